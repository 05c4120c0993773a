use super::SegmentationMap;
use crate::error::Result;

fn entropy_of(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Shannon entropy (nats) of the label histogram.
pub fn seg_entropy(map: &SegmentationMap) -> f64 {
    let mut hist = [0u64; 256];
    for &l in &map.labels {
        hist[l as usize] += 1;
    }
    entropy_of(hist.into_iter(), map.labels.len() as f64)
}

/// Mutual information (nats) of the joint label histogram of two maps.
pub fn seg_mutual_information(a: &SegmentationMap, b: &SegmentationMap) -> Result<f64> {
    a.same_shape(b.height, b.width)?;
    let (ka, kb) = (a.label_count(), b.label_count());
    let mut joint = vec![0u64; ka * kb];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        joint[x as usize * kb + y as usize] += 1;
    }
    let n = a.labels.len() as f64;
    let ra: Vec<u64> = joint.chunks_exact(kb).map(|r| r.iter().sum()).collect();
    let cb: Vec<u64> = (0..kb).map(|j| (0..ka).map(|i| joint[i * kb + j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[i * kb + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (c as f64 * n / (ra[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    // clip roundoff so the bounds hold exactly
    let cap = seg_entropy(a).min(seg_entropy(b));
    Ok(mi.clamp(0.0, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(l: &[u8]) -> SegmentationMap {
        SegmentationMap::new(1, l.len(), l.to_vec()).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(seg_entropy(&map(&[3; 9])), 0.0);
        assert!((seg_entropy(&map(&[0, 1, 0, 1])) - 2f64.ln()).abs() < 1e-12);
        let mut l = vec![0u8; 8];
        l.extend([1; 4]);
        l.extend([2; 2]);
        l.extend([3; 2]);
        let want = -(0.5 * 0.5f64.ln() + 0.25 * 0.25f64.ln() + 2.0 * 0.125 * 0.125f64.ln());
        let h = seg_entropy(&map(&l));
        assert!((h - want).abs() < 1e-12);
        assert!((h - 1.2130).abs() < 1e-4);
    }

    #[test]
    fn mi_cases() {
        let a = map(&[0, 0, 1, 1]);
        assert!((seg_mutual_information(&a, &a).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(seg_mutual_information(&a, &map(&[5; 4])).unwrap(), 0.0);
        // joint counts (0,0)=1 (0,1)=1 (1,1)=2: MI = sum p log(p / (pa pb))
        let b = map(&[0, 1, 1, 1]);
        let want = 0.25 * (0.25f64 / (0.5 * 0.25)).ln() + 0.25 * (0.25f64 / (0.5 * 0.75)).ln() + 0.5 * (0.5f64 / (0.5 * 0.75)).ln();
        assert!((seg_mutual_information(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(seg_mutual_information(&a, &map(&[0, 1])).is_err());
    }

    proptest! {
        #[test]
        fn mi_bounds(a in prop::collection::vec(0u8..5, 30), b in prop::collection::vec(0u8..3, 30)) {
            let (a, b) = (map(&a), map(&b));
            let mi = seg_mutual_information(&a, &b).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= seg_entropy(&a).min(seg_entropy(&b)));
            prop_assert!((mi - seg_mutual_information(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((seg_mutual_information(&a, &a).unwrap() - seg_entropy(&a)).abs() < 1e-12);
        }
    }
}
