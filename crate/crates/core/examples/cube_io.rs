//! Write a synthetic cube and its mask, read them back, and render a
//! pseudo-RGB preview.
//!
//! ```bash
//! cargo run --release --example cube_io
//! ```

use dgc::data_io::{generate_one, load_cube, load_mask, read_cube_header, save_cube, save_mask, SynthSpec};
use dgc::eval_diag::{render_pseudo_rgb, write_ppm};

fn main() -> dgc::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::leaf_like(1, 64, 48, 3, 1);
    let (cube, mask) = generate_one(&spec, 0)?;

    let cube_path = dir.path().join("leaf.hsic");
    let mask_path = dir.path().join("leaf.hsim");
    save_cube(&cube, &cube_path)?;
    save_mask(&mask, &mask_path)?;

    let header = read_cube_header(&cube_path)?;
    println!(
        "header: {}x{} px, {} bands from {} nm in {:.2} nm steps",
        header.height, header.width, header.bands, header.wavelength_start, header.wavelength_step
    );

    let back = load_cube(&cube_path)?;
    assert_eq!(back, cube);
    assert_eq!(load_mask(&mask_path)?, mask);
    println!("{} bytes on disk, round trip exact", std::fs::metadata(&cube_path).unwrap().len());

    let (r, g, b) = (back.nearest_band(650.0), back.nearest_band(550.0), back.nearest_band(450.0));
    println!("pseudo-RGB bands {r}/{g}/{b} at {:.0}/{:.0}/{:.0} nm", back.wavelength(r), back.wavelength(g), back.wavelength(b));
    let ppm = dir.path().join("leaf.ppm");
    write_ppm(&render_pseudo_rgb(&back), &ppm)?;

    let mut counts = [0usize; 3];
    mask.labels.iter().for_each(|&l| counts[l as usize] += 1);
    println!("background {} / tissue {} / lesion {} pixels", counts[0], counts[1], counts[2]);
    Ok(())
}
