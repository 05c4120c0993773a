//! Encode a small batch and compare a few analytic parameter gradients with
//! central finite differences in f64.
//!
//! ```bash
//! cargo run --release --example encoder_gradcheck
//! ```

use dgc::encoder::{encode, encode_backward, BatchShape, EncoderConfig, EncoderParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dgc::Result<()> {
    let cfg = EncoderConfig::auto(24, 6, 5)?;
    println!("strides {:?}, spectral lengths {:?}, {} parameters", cfg.strides, cfg.spectral_lengths()?, cfg.param_count());

    let params = EncoderParams::<f32>::init(cfg, 3)?.cast::<f64>();
    let shape = BatchShape { batch: 2, height: 6, width: 6 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches: Vec<f64> = (0..shape.batch * shape.pixels() * cfg.bands).map(|_| rng.random_range(0.0..1.0)).collect();

    let emb = encode(&params, &patches, shape)?;
    println!("embedding grid {}x{}x{}x{}, unit rows: {}", emb.batch, emb.height, emb.width, emb.dim, emb.normalized);

    // scalar objective: <w, embeddings> for a fixed random w
    let w: Vec<f64> = (0..emb.values.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |p: &EncoderParams<f64>| -> f64 {
        let e = encode(p, &patches, shape).unwrap();
        e.values.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let grad = encode_backward(&params, &patches, shape, &w)?;

    let h = 1e-5;
    for j in (0..params.data.len()).step_by(params.data.len() / 6) {
        let mut p = params.clone();
        p.data[j] += h;
        let up = objective(&p);
        p.data[j] -= 2.0 * h;
        let down = objective(&p);
        let num = (up - down) / (2.0 * h);
        println!("param {j:4}: analytic {:+.8e} numeric {:+.8e}", grad[j], num);
    }
    Ok(())
}
