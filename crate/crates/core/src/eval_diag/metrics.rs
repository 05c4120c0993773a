use super::SegmentationMap;
use crate::data_io::GroundTruthMask;
use crate::error::{Error, Result};

/// Cluster id to semantic class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeMap {
    pub mapping: Vec<u8>,
}

impl MergeMap {
    pub fn identity(k: usize) -> Self {
        MergeMap {
            mapping: (0..k).map(|i| i as u8).collect(),
        }
    }

    /// Parses `cluster = class` lines; every cluster below the largest listed
    /// id must be present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(['=', ':'])
                .ok_or_else(|| Error::Config(format!("expected cluster = class, got {line:?}")))?;
            let a: usize = a.trim().parse().map_err(|_| Error::Config(format!("bad cluster id {a:?}")))?;
            let b: u8 = b.trim().parse().map_err(|_| Error::Config(format!("bad class id {b:?}")))?;
            pairs.push((a, b));
        }
        let k = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut mapping = vec![None; k];
        for (a, b) in pairs {
            if mapping[a].replace(b).is_some() {
                return Err(Error::Config(format!("cluster {a} mapped twice")));
            }
        }
        let mapping = mapping
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| Error::Config(format!("cluster {i} has no class"))))
            .collect::<Result<_>>()?;
        Ok(MergeMap { mapping })
    }

    pub fn to_text(&self) -> String {
        self.mapping
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i} = {c}\n"))
            .collect()
    }
}

pub fn apply_merge(map: &SegmentationMap, merge: &MergeMap) -> Result<SegmentationMap> {
    let labels = map
        .labels
        .iter()
        .map(|&l| {
            merge
                .mapping
                .get(l as usize)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("cluster {l} is not covered by the merge map")))
        })
        .collect::<Result<_>>()?;
    SegmentationMap::new(map.height, map.width, labels)
}

/// Cluster-by-class pixel counts, accumulated over any number of maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrence {
    pub clusters: usize,
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl CoOccurrence {
    pub fn new(clusters: usize, classes: usize) -> Self {
        CoOccurrence {
            clusters,
            classes,
            counts: vec![0; clusters * classes],
        }
    }

    pub fn add(&mut self, map: &SegmentationMap, gt: &GroundTruthMask) -> Result<()> {
        map.same_shape(gt.height, gt.width)?;
        for (&c, &g) in map.labels.iter().zip(&gt.labels) {
            let (c, g) = (c as usize, g as usize);
            if c >= self.clusters || g >= self.classes {
                return Err(Error::Invalid(format!(
                    "label pair ({c}, {g}) outside {}x{}",
                    self.clusters, self.classes
                )));
            }
            self.counts[c * self.classes + g] += 1;
        }
        Ok(())
    }

    /// Each cluster goes to the class it shares the most pixels with; ties
    /// go to the smaller class id.
    pub fn best_merge(&self) -> MergeMap {
        let mapping = self
            .counts
            .chunks_exact(self.classes)
            .map(|row| {
                let mut best = 0;
                for (j, &n) in row.iter().enumerate() {
                    if n > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect();
        MergeMap { mapping }
    }
}

pub fn best_match_merge(
    map: &SegmentationMap,
    gt: &GroundTruthMask,
    clusters: usize,
    classes: usize,
) -> Result<MergeMap> {
    if map.labels.is_empty() {
        return Err(Error::Invalid("empty map".into()));
    }
    let mut co = CoOccurrence::new(clusters, classes);
    co.add(map, gt)?;
    Ok(co.best_merge())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// Intersection and union pixel counts per class.
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Ground-truth pixel count per class.
    pub support: Vec<u64>,
}

impl IoUReport {
    pub fn new(classes: usize) -> Self {
        IoUReport {
            intersection: vec![0; classes],
            union: vec![0; classes],
            support: vec![0; classes],
        }
    }

    /// Adds one semantic map; counts pool across calls.
    pub fn add(&mut self, pred: &SegmentationMap, gt: &GroundTruthMask) -> Result<()> {
        pred.same_shape(gt.height, gt.width)?;
        let n = self.support.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if g >= n {
                return Err(Error::Invalid(format!("ground-truth class {g} outside {n} classes")));
            }
            self.support[g] += 1;
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                if p < n {
                    self.union[p] += 1;
                }
            }
        }
        Ok(())
    }

    /// IoU of one class, 1 when prediction and ground truth both lack it.
    pub fn class_iou(&self, c: usize) -> f64 {
        if self.union[c] == 0 {
            1.0
        } else {
            self.intersection[c] as f64 / self.union[c] as f64
        }
    }

    pub fn per_class(&self) -> Vec<f64> {
        (0..self.union.len()).map(|c| self.class_iou(c)).collect()
    }

    /// Mean over classes present in the ground truth.
    pub fn mean(&self) -> f64 {
        let present: Vec<usize> = (0..self.support.len()).filter(|&c| self.support[c] > 0).collect();
        if present.is_empty() {
            return 1.0;
        }
        present.iter().map(|&c| self.class_iou(c)).sum::<f64>() / present.len() as f64
    }
}

pub fn iou(pred: &SegmentationMap, gt: &GroundTruthMask, classes: usize) -> Result<IoUReport> {
    let mut r = IoUReport::new(classes);
    r.add(pred, gt)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, l: &[u8]) -> SegmentationMap {
        SegmentationMap::new(h, w, l.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, l: &[u8]) -> GroundTruthMask {
        GroundTruthMask::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn merge_examples() {
        let m = map(3, 3, &[0, 1, 2, 3, 0, 1, 2, 3, 3]);
        assert_eq!(apply_merge(&m, &MergeMap::identity(4)).unwrap(), m);
        let all0 = MergeMap { mapping: vec![0; 4] };
        assert!(apply_merge(&m, &all0).unwrap().labels.iter().all(|&l| l == 0));
        let bt = MergeMap::parse("0 = 0\n1 = 0\n2 = 1\n3 = 1\n").unwrap();
        assert_eq!(apply_merge(&m, &bt).unwrap().labels, vec![0, 0, 1, 1, 0, 0, 1, 1, 1]);
        assert!(apply_merge(&m, &MergeMap { mapping: vec![0, 0] }).is_err());
        assert_eq!(MergeMap::parse(&bt.to_text()).unwrap(), bt);
        assert!(MergeMap::parse("0 = 0\n2 = 1\n").is_err());
    }

    #[test]
    fn best_match_cases() {
        let gt = mask(2, 3, &[0, 0, 1, 1, 2, 2]);
        let m = map(2, 3, &[0, 0, 1, 1, 2, 2]);
        assert_eq!(best_match_merge(&m, &gt, 3, 3).unwrap(), MergeMap::identity(3));
        let m = map(2, 3, &[1, 1, 0, 0, 0, 1]);
        // cluster 0 covers classes (0,1,1,2) -> 1; cluster 1 covers (0,0,2) -> 0
        assert_eq!(best_match_merge(&m, &gt, 2, 3).unwrap().mapping, vec![1, 0]);
    }

    #[test]
    fn iou_examples() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let r = iou(&map(2, 2, &[0, 0, 1, 1]), &gt, 2).unwrap();
        assert_eq!(r.per_class(), vec![1.0, 1.0]);
        assert_eq!(r.mean(), 1.0);
        let r = iou(&map(2, 2, &[0, 0, 0, 0]), &gt, 2).unwrap();
        assert_eq!(r.per_class(), vec![0.5, 0.0]);
        assert_eq!(r.mean(), 0.25);
        // class 2 absent from both: IoU 1 but excluded from the mean
        let r = iou(&map(2, 2, &[0, 0, 0, 0]), &gt, 3).unwrap();
        assert_eq!(r.class_iou(2), 1.0);
        assert_eq!(r.mean(), 0.25);
        assert!(iou(&map(1, 4, &[0; 4]), &gt, 2).is_err());
    }

    fn brute_best(co: &CoOccurrence) -> u64 {
        let mut best = 0;
        let total = co.classes.pow(co.clusters as u32);
        for code in 0..total {
            let mut c = code;
            let mut agree = 0;
            for k in 0..co.clusters {
                agree += co.counts[k * co.classes + c % co.classes];
                c /= co.classes;
            }
            best = best.max(agree);
        }
        best
    }

    proptest! {
        #[test]
        fn best_match_maximizes_agreement(labels in prop::collection::vec(0u8..4, 64), gt in prop::collection::vec(0u8..3, 64)) {
            let m = map(8, 8, &labels);
            let g = mask(8, 8, &gt);
            let merge = best_match_merge(&m, &g, 4, 3).unwrap();
            let mut co = CoOccurrence::new(4, 3);
            co.add(&m, &g).unwrap();
            let got: u64 = (0..4).map(|k| co.counts[k * 3 + merge.mapping[k] as usize]).sum();
            prop_assert_eq!(got, brute_best(&co));
        }

        #[test]
        fn iou_symmetric_and_relabel_invariant(a in prop::collection::vec(0u8..2, 16), b in prop::collection::vec(0u8..2, 16)) {
            let ab = iou(&map(4, 4, &a), &mask(4, 4, &b), 2).unwrap();
            let ba = iou(&map(4, 4, &b), &mask(4, 4, &a), 2).unwrap();
            prop_assert_eq!(ab.per_class(), ba.per_class());
            let fa: Vec<u8> = a.iter().map(|x| 1 - x).collect();
            let fb: Vec<u8> = b.iter().map(|x| 1 - x).collect();
            let f = iou(&map(4, 4, &fa), &mask(4, 4, &fb), 2).unwrap();
            prop_assert_eq!(f.class_iou(0), ab.class_iou(1));
            prop_assert_eq!(f.class_iou(1), ab.class_iou(0));
            let same = iou(&map(4, 4, &a), &mask(4, 4, &a), 2).unwrap();
            prop_assert_eq!(same.mean(), 1.0);
        }
    }
}
