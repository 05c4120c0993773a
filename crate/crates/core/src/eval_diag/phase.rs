use std::fmt;
use std::str::FromStr;

use super::{seg_entropy, seg_mutual_information, SegmentationMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseLabel {
    Inactive,
    Ignite,
    Afterglow,
    Smoldering,
    Aftermath,
}

impl PhaseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::Inactive => "inactive",
            PhaseLabel::Ignite => "ignite",
            PhaseLabel::Afterglow => "afterglow",
            PhaseLabel::Smoldering => "smoldering",
            PhaseLabel::Aftermath => "aftermath",
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "inactive" => PhaseLabel::Inactive,
            "ignite" => PhaseLabel::Ignite,
            "afterglow" => PhaseLabel::Afterglow,
            "smoldering" => PhaseLabel::Smoldering,
            "aftermath" => PhaseLabel::Aftermath,
            _ => return Err(Error::Invalid(format!("unknown phase {s:?}"))),
        })
    }
}

/// Rule thresholds as fractions: the first three scale with `log K`,
/// `delta` with the running entropy maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseThresholds {
    pub stable: f64,
    pub noise: f64,
    pub near_max: f64,
    pub delta: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        PhaseThresholds {
            stable: 0.5,
            noise: 0.1,
            near_max: 0.75,
            delta: 0.2,
        }
    }
}

/// Summary of one segmentation snapshot taken during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub entropy: f64,
    /// Mutual information with the previous snapshot.
    pub mi_prev: Option<f64>,
    pub active_clusters: usize,
}

impl Snapshot {
    /// Clusters holding at least `min_share` of the pixels count as active.
    pub fn from_maps(step: u64, map: &SegmentationMap, prev: Option<&SegmentationMap>, min_share: f64) -> Result<Self> {
        let mut hist = [0usize; 256];
        for &l in &map.labels {
            hist[l as usize] += 1;
        }
        let n = map.labels.len() as f64;
        Ok(Snapshot {
            step,
            entropy: seg_entropy(map),
            mi_prev: prev.map(|p| seg_mutual_information(p, map)).transpose()?,
            active_clusters: hist.iter().filter(|&&c| c > 0 && c as f64 / n >= min_share).count(),
        })
    }
}

/// Labels the last snapshot of `window`. Rules, first match wins:
/// one active cluster is inactive; low MI with the previous snapshot at
/// near-maximal entropy is aftermath; rising entropy with stable MI is
/// ignite (both MI tests are skipped right after an inactive snapshot);
/// otherwise the
/// drop from the running entropy maximum separates afterglow from smoldering.
pub fn classify_phase(window: &[Snapshot], k: usize, th: &PhaseThresholds) -> Result<PhaseLabel> {
    if window.len() < 2 {
        return Err(Error::Invalid("phase classification needs at least two snapshots".into()));
    }
    let log_k = (k as f64).ln();
    let cur = window[window.len() - 1];
    let prev = window[window.len() - 2];
    if cur.active_clusters <= 1 {
        return Ok(PhaseLabel::Inactive);
    }
    // MI against a collapsed map is bounded by its zero entropy and says nothing
    let informative = prev.active_clusters > 1;
    let mi = cur.mi_prev.unwrap_or(0.0);
    if informative && mi < th.noise * log_k && cur.entropy >= th.near_max * log_k {
        return Ok(PhaseLabel::Aftermath);
    }
    if cur.entropy > prev.entropy && (!informative || mi >= th.stable * log_k) {
        return Ok(PhaseLabel::Ignite);
    }
    let peak = window.iter().map(|s| s.entropy).fold(f64::NEG_INFINITY, f64::max);
    if peak - cur.entropy < th.delta * peak {
        Ok(PhaseLabel::Afterglow)
    } else {
        Ok(PhaseLabel::Smoldering)
    }
}

/// One label per snapshot from the second on, each using all snapshots so far.
pub fn classify_timeline(snaps: &[Snapshot], k: usize, th: &PhaseThresholds) -> Result<Vec<PhaseLabel>> {
    (2..=snaps.len()).map(|n| classify_phase(&snaps[..n], k, th)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snaps(maps: &[SegmentationMap]) -> Vec<Snapshot> {
        maps.iter()
            .enumerate()
            .map(|(i, m)| Snapshot::from_maps(i as u64, m, i.checked_sub(1).map(|j| &maps[j]), 0.01).unwrap())
            .collect()
    }

    fn columns(bounds: &[usize]) -> SegmentationMap {
        let labels = (0..64 * 64)
            .map(|i| bounds.iter().filter(|&&b| i % 64 >= b).count() as u8)
            .collect();
        SegmentationMap::new(64, 64, labels).unwrap()
    }

    #[test]
    fn collapsed_run_is_inactive() {
        let maps = vec![SegmentationMap::constant(8, 8, 2); 4];
        let t = classify_timeline(&snaps(&maps), 4, &PhaseThresholds::default()).unwrap();
        assert_eq!(t, vec![PhaseLabel::Inactive; 3]);
        assert!(classify_phase(&snaps(&maps)[..1], 4, &PhaseThresholds::default()).is_err());
    }

    #[test]
    fn identical_high_entropy_is_not_aftermath() {
        let m = columns(&[16, 32, 48]);
        let t = classify_timeline(&snaps(&[m.clone(), m]), 4, &PhaseThresholds::default()).unwrap();
        assert_ne!(t[0], PhaseLabel::Aftermath);
    }

    #[test]
    fn scripted_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut maps = vec![SegmentationMap::constant(64, 64, 0); 3];
        maps.push(columns(&[21, 43]));
        maps.push(columns(&[11, 21, 43]));
        for _ in 0..3 {
            let labels = (0..64 * 64).map(|_| rng.random_range(0..4u8)).collect();
            maps.push(SegmentationMap::new(64, 64, labels).unwrap());
        }
        let t = classify_timeline(&snaps(&maps), 4, &PhaseThresholds::default()).unwrap();
        use PhaseLabel::*;
        assert_eq!(t, vec![Inactive, Inactive, Ignite, Ignite, Aftermath, Aftermath, Aftermath]);
    }

    #[test]
    fn falling_entropy_splits_afterglow_and_smoldering() {
        let s = |e: f64| Snapshot {
            step: 0,
            entropy: e,
            mi_prev: Some(1.0),
            active_clusters: 3,
        };
        let th = PhaseThresholds::default();
        assert_eq!(classify_phase(&[s(1.0), s(0.9)], 4, &th).unwrap(), PhaseLabel::Afterglow);
        assert_eq!(classify_phase(&[s(1.0), s(0.7)], 4, &th).unwrap(), PhaseLabel::Smoldering);
        for p in ["inactive", "ignite", "afterglow", "smoldering", "aftermath"] {
            assert_eq!(p.parse::<PhaseLabel>().unwrap().as_str(), p);
        }
    }
}
