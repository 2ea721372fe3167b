//! Segmentation metrics: confusion counts, DSC/FPR/FNR, soft Dice loss,
//! Cohen's kappa and connected components.
//!
//! Binary inputs are label volumes read as `value > 0`. Metrics whose
//! denominator vanishes return [`UndefinedMetric`] instead of NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{IntensityVolume, LabelVolume, Volume, VolumeError};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("{metric} is undefined for these inputs (zero denominator)")]
pub struct UndefinedMetric {
    pub metric: &'static str,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] VolumeError),
    #[error("prediction at voxel {index} is {value}, outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error(transparent)]
    Undefined(#[from] UndefinedMetric),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`
    pub fn dsc(&self) -> Result<f64, UndefinedMetric> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, "DSC")
    }

    /// `FP / (TN + FP)`
    pub fn fpr(&self) -> Result<f64, UndefinedMetric> {
        ratio(self.fp, self.tn + self.fp, "FPR")
    }

    /// `FN / (TP + FN)`
    pub fn fnr(&self) -> Result<f64, UndefinedMetric> {
        ratio(self.fn_, self.tp + self.fn_, "FNR")
    }

    /// Cohen's kappa reading the table as rater A = prediction, rater B = truth.
    pub fn kappa(&self) -> Result<f64, UndefinedMetric> {
        let n = self.total() as u128;
        let (both_pos, both_neg) = (self.tp as u128, self.tn as u128);
        let (a_only, b_only) = (self.fp as u128, self.fn_ as u128);
        let chance = (both_pos + a_only) * (both_pos + b_only) + (both_neg + b_only) * (both_neg + a_only);
        if n == 0 || chance == n * n {
            return Err(UndefinedMetric { metric: "kappa" });
        }
        let n = n as f64;
        let po = (both_pos + both_neg) as f64 / n;
        let pe = chance as f64 / (n * n);
        Ok((po - pe) / (1.0 - pe))
    }
}

fn ratio(num: u64, den: u64, metric: &'static str) -> Result<f64, UndefinedMetric> {
    if den == 0 {
        Err(UndefinedMetric { metric })
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// Voxelwise counts of `pred > 0` against `truth > 0`, optionally only where
/// `mask > 0`.
pub fn confusion(
    pred: &LabelVolume,
    truth: &LabelVolume,
    mask: Option<&LabelVolume>,
) -> Result<ConfusionCounts, VolumeError> {
    pred.check_same_shape(truth)?;
    if let Some(m) = mask {
        pred.check_same_shape(m)?;
    }
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if let Some(m) = mask {
            if m.data()[i] <= 0 {
                continue;
            }
        }
        match (pred.data()[i] > 0, truth.data()[i] > 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Cohen's kappa between two binary raters.
pub fn cohens_kappa(a: &LabelVolume, b: &LabelVolume, mask: Option<&LabelVolume>) -> Result<f64, MetricsError> {
    Ok(confusion(a, b, mask)?.kappa()?)
}

/// Soft Dice loss `1 - (2 yᵀŷ + ε) / (yᵀy + ŷᵀŷ + ε)` with ε equal to the
/// voxel count.
pub fn dice_loss_values(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    soft_dice_loss(pred, truth, pred.len() as f64)
}

/// Soft Dice loss with an explicit stabilizer `eps`.
pub fn soft_dice_loss(pred: &[f64], truth: &[f64], eps: f64) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(VolumeError::ShapeMismatch([pred.len(), 1, 1], [truth.len(), 1, 1]).into());
    }
    if let Some((index, &value)) = pred.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(MetricsError::ProbabilityRange { index, value });
    }
    let (mut cross, mut yy, mut pp) = (0.0, 0.0, 0.0);
    for (p, y) in pred.iter().zip(truth) {
        cross += y * p;
        yy += y * y;
        pp += p * p;
    }
    Ok(1.0 - (2.0 * cross + eps) / (yy + pp + eps))
}

pub fn dice_loss(pred: &IntensityVolume, truth: &LabelVolume) -> Result<f64, MetricsError> {
    pred.check_same_shape(truth)?;
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = truth.data().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    dice_loss_values(&p, &y)
}

/// One evaluated volume pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub kappa: Option<f64>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dsc,fpr,fnr,kappa,tp,tn,fp,fn";

    pub fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            dsc: counts.dsc().ok(),
            fpr: counts.fpr().ok(),
            fnr: counts.fnr().ok(),
            kappa: None,
            counts,
        }
    }

    /// Flat row matching [`Self::CSV_HEADER`]; undefined values are empty.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let c = &self.counts;
        format!("{},{},{},{},{},{},{},{}", f(self.dsc), f(self.fpr), f(self.fnr), f(self.kappa), c.tp, c.tn, c.fp, c.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Faces = 6,
    Edges = 18,
    Vertices = 26,
}

impl TryFrom<u32> for Connectivity {
    type Error = String;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        match value {
            6 => Ok(Self::Faces),
            18 => Ok(Self::Edges),
            26 => Ok(Self::Vertices),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl Connectivity {
    /// Neighbor offsets preceding a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Self::Faces => 1,
            Self::Edges => 2,
            Self::Vertices => 3,
        };
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 == 0 || l1 > max_l1 {
                        continue;
                    }
                    if (dz, dy, dx) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labeling: id 1 is the largest component, ties broken by the
/// first voxel in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: LabelVolume,
    /// `sizes[i]` is the voxel count of component `i + 1`; descending.
    pub sizes: Vec<usize>,
}

impl Components {
    /// Keep only the `k` largest components.
    pub fn largest(&self, k: usize) -> LabelVolume {
        self.labels.map(|&l| if l > 0 && (l as usize) <= k { l } else { 0 })
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let grand = parent[parent[x as usize] as usize];
        parent[x as usize] = grand;
        x = grand;
    }
    x
}

/// Two-pass union-find labeling of `mask > 0`.
pub fn connected_components(mask: &LabelVolume, connectivity: Connectivity) -> Components {
    let [nx, ny, nz] = mask.shape();
    let offsets = connectivity.backward_offsets();
    let n = mask.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let fg = |i: usize| mask.data()[i] > 0;

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if !fg(i) {
                    continue;
                }
                for o in &offsets {
                    let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let j = mask.index(qx as usize, qy as usize, qz as usize);
                    if !fg(j) {
                        continue;
                    }
                    let (ri, rj) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                    if ri != rj {
                        // Smaller index becomes the root.
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi as usize] = lo;
                    }
                }
            }
        }
    }

    // Roots, their sizes and first voxel (the root itself, since the
    // smaller index always wins).
    let mut size_of_root: Vec<usize> = Vec::new();
    let mut root_slot = vec![u32::MAX; n];
    let mut roots: Vec<u32> = Vec::new();
    let mut slot_of_voxel = vec![u32::MAX; n];
    for i in 0..n {
        if !fg(i) {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        if root_slot[r] == u32::MAX {
            root_slot[r] = roots.len() as u32;
            roots.push(r as u32);
            size_of_root.push(0);
        }
        let s = root_slot[r];
        size_of_root[s as usize] += 1;
        slot_of_voxel[i] = s;
    }
    let mut order: Vec<usize> = (0..roots.len()).collect();
    order.sort_by(|&a, &b| size_of_root[b].cmp(&size_of_root[a]).then(roots[a].cmp(&roots[b])));
    let mut id_of_slot = vec![0i32; roots.len()];
    for (rank, &slot) in order.iter().enumerate() {
        id_of_slot[slot] = rank as i32 + 1;
    }
    let labels: Vec<i32> = slot_of_voxel.iter().map(|&s| if s == u32::MAX { 0 } else { id_of_slot[s as usize] }).collect();
    let sizes = order.iter().map(|&s| size_of_root[s]).collect();
    Components {
        labels: Volume::from_vec(mask.shape(), mask.voxel_size_um(), labels).expect("same shape"),
        sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn vol(shape: [usize; 3], data: Vec<i32>) -> LabelVolume {
        Volume::from_vec(shape, 20.0, data).unwrap()
    }

    #[test]
    fn four_voxel_counts() {
        let pred = vol([4, 1, 1], vec![1, 1, 0, 0]);
        let truth = vol([4, 1, 1], vec![1, 0, 1, 0]);
        let c = confusion(&pred, &truth, None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
        assert_eq!(c.dsc().unwrap(), 0.5);
        assert_eq!(c.fpr().unwrap(), 0.5);
        assert_eq!(c.fnr().unwrap(), 0.5);
    }

    #[test]
    fn identical_and_disjoint() {
        let a = vol([4, 1, 1], vec![1, 1, 0, 0]);
        let c = confusion(&a, &a, None).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!((c.dsc().unwrap(), c.fpr().unwrap(), c.fnr().unwrap()), (1.0, 0.0, 0.0));
        let b = vol([4, 1, 1], vec![0, 0, 1, 1]);
        assert_eq!(confusion(&a, &b, None).unwrap().dsc().unwrap(), 0.0);
    }

    #[test]
    fn mask_restriction() {
        let pred = vol([4, 1, 1], vec![1, 1, 0, 0]);
        let truth = vol([4, 1, 1], vec![1, 0, 1, 0]);
        let mask = vol([4, 1, 1], vec![1, 0, 0, 1]);
        let c = confusion(&pred, &truth, Some(&mask)).unwrap();
        assert_eq!((c.fp, c.fn_, c.total()), (0, 0, 2));
    }

    #[test]
    fn shape_mismatch() {
        let a = vol([4, 1, 1], vec![0; 4]);
        let b = vol([2, 2, 1], vec![0; 4]);
        assert!(confusion(&a, &b, None).is_err());
    }

    #[test]
    fn undefined_metrics() {
        let empty = vol([3, 1, 1], vec![0; 3]);
        let c = confusion(&empty, &empty, None).unwrap();
        assert_eq!(c.fnr(), Err(UndefinedMetric { metric: "FNR" }));
        assert!(c.dsc().is_err());
        assert_eq!(c.fpr().unwrap(), 0.0);
        assert!(cohens_kappa(&empty, &empty, None).is_err());
    }

    #[test]
    fn dice_loss_examples() {
        assert!((dice_loss_values(&[0.5, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap() - (1.0 - 5.0 / 5.25)).abs() < 1e-12);
        assert_eq!(dice_loss_values(&[0.0; 6], &[0.0; 6]).unwrap(), 0.0);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(dice_loss_values(&y, &y).unwrap(), 0.0);
        assert!(matches!(dice_loss_values(&[1.2], &[1.0]), Err(MetricsError::ProbabilityRange { index: 0, .. })));
    }

    #[test]
    fn kappa_tables() {
        let k = ConfusionCounts { tp: 40, tn: 40, fp: 10, fn_: 10 }.kappa().unwrap();
        assert!((k - 0.6).abs() < 1e-12);
        let a = vol([4, 1, 1], vec![1, 1, 0, 0]);
        let b = vol([4, 1, 1], vec![0, 0, 1, 1]);
        assert!((cohens_kappa(&a, &b, None).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cohens_kappa(&a, &a, None).unwrap(), 1.0);
    }

    #[test]
    fn face_vs_corner_adjacency() {
        let mut m = vol([2, 2, 2], vec![0; 8]);
        *m.get_mut(0, 0, 0) = 1;
        *m.get_mut(1, 0, 0) = 1;
        assert_eq!(connected_components(&m, Connectivity::Faces).sizes, vec![2]);

        let mut m = vol([2, 2, 2], vec![0; 8]);
        *m.get_mut(0, 0, 0) = 1;
        *m.get_mut(1, 1, 1) = 1;
        assert_eq!(connected_components(&m, Connectivity::Faces).sizes, vec![1, 1]);
        assert_eq!(connected_components(&m, Connectivity::Edges).sizes, vec![1, 1]);
        assert_eq!(connected_components(&m, Connectivity::Vertices).sizes, vec![2]);

        let mut m = vol([2, 2, 2], vec![0; 8]);
        *m.get_mut(0, 0, 0) = 1;
        *m.get_mut(1, 1, 0) = 1;
        assert_eq!(connected_components(&m, Connectivity::Faces).sizes.len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Edges).sizes, vec![2]);
    }

    #[test]
    fn empty_mask() {
        let c = connected_components(&vol([3, 3, 3], vec![0; 27]), Connectivity::Vertices);
        assert!(c.sizes.is_empty());
        assert!(c.labels.data().iter().all(|&v| v == 0));
    }

    /// Flood fill over the full neighborhood definition.
    fn bfs_components(m: &LabelVolume, conn: Connectivity) -> (Vec<i32>, Vec<usize>) {
        let max_l1 = match conn {
            Connectivity::Faces => 1,
            Connectivity::Edges => 2,
            Connectivity::Vertices => 3,
        };
        let shape = m.shape();
        let mut comp = vec![0i32; m.len()];
        let mut sizes = Vec::new();
        for start in 0..m.len() {
            if m.data()[start] <= 0 || comp[start] != 0 {
                continue;
            }
            let id = sizes.len() as i32 + 1;
            let mut q = VecDeque::from([start]);
            comp[start] = id;
            let mut size = 0;
            while let Some(i) = q.pop_front() {
                size += 1;
                let c = m.coords(i);
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let l1 = dx.abs() + dy.abs() + dz.abs();
                            if l1 == 0 || l1 > max_l1 {
                                continue;
                            }
                            let p = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                            if (0..3).any(|k| p[k] < 0 || p[k] >= shape[k] as isize) {
                                continue;
                            }
                            let j = m.index(p[0] as usize, p[1] as usize, p[2] as usize);
                            if m.data()[j] > 0 && comp[j] == 0 {
                                comp[j] = id;
                                q.push_back(j);
                            }
                        }
                    }
                }
            }
            sizes.push(size);
        }
        (comp, sizes)
    }

    #[test]
    fn matches_flood_fill_oracle() {
        use crate::sampling::SeededRng;
        let mut rng = SeededRng::new(17);
        for trial in 0..12 {
            let density = 0.2 + 0.05 * trial as f64;
            let data = (0..16 * 16 * 16).map(|_| (rng.unit() < density) as i32).collect();
            let m = vol([16, 16, 16], data);
            for conn in [Connectivity::Faces, Connectivity::Edges, Connectivity::Vertices] {
                let got = connected_components(&m, conn);
                let (oracle, mut oracle_sizes) = bfs_components(&m, conn);
                oracle_sizes.sort_unstable_by(|a, b| b.cmp(a));
                assert_eq!(got.sizes, oracle_sizes);
                // Same partition: a bijection between ids.
                let mut map = std::collections::HashMap::new();
                for (g, o) in got.labels.data().iter().zip(&oracle) {
                    assert_eq!(*g == 0, *o == 0);
                    if *g > 0 {
                        assert_eq!(*map.entry(*g).or_insert(*o), *o);
                    }
                }
                assert_eq!(map.len(), oracle_sizes.len());
            }
        }
    }

    fn random_pair(seed: u64, n: usize) -> (LabelVolume, LabelVolume) {
        use crate::sampling::SeededRng;
        let mut rng = SeededRng::new(seed);
        let (pa, pb) = (rng.unit(), rng.unit());
        let a = (0..n).map(|_| (rng.unit() < pa) as i32).collect();
        let b = (0..n).map(|_| (rng.unit() < pb) as i32).collect();
        (vol([n, 1, 1], a), vol([n, 1, 1], b))
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn swap_symmetries(seed in proptest::prelude::any::<u64>()) {
            let (p, t) = random_pair(seed, 200);
            let c = confusion(&p, &t, None).unwrap();
            let swapped = confusion(&t, &p, None).unwrap();
            proptest::prop_assert_eq!(c.dsc().ok(), swapped.dsc().ok());
            let (pc, tc) = (p.map(|&v| 1 - v), t.map(|&v| 1 - v));
            let comp = confusion(&pc, &tc, None).unwrap();
            proptest::prop_assert_eq!(c.fpr().ok(), comp.fnr().ok());
            proptest::prop_assert_eq!(c.total(), 200);
            for m in [c.dsc(), c.fpr(), c.fnr()].into_iter().flatten() {
                proptest::prop_assert!((0.0..=1.0).contains(&m));
            }
            if let Ok(k) = c.kappa() {
                proptest::prop_assert!((-1.0..=1.0).contains(&k));
            }
        }

        #[test]
        fn dice_loss_vs_dsc(seed in proptest::prelude::any::<u64>()) {
            let (p, t) = random_pair(seed, 300);
            let pf: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
            let tf: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
            let c = confusion(&p, &t, None).unwrap();
            // Direct summation oracle with ε = N.
            let (tp, fp, fneg) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
            let n = 300.0;
            let oracle = 1.0 - (2.0 * tp + n) / (2.0 * tp + fp + fneg + n);
            let loss = dice_loss_values(&pf, &tf).unwrap();
            proptest::prop_assert!((loss - oracle).abs() < 1e-12);
            if let Ok(dsc) = c.dsc() {
                proptest::prop_assert!(loss <= 1.0 - dsc + 1e-12);
                let limit = soft_dice_loss(&pf, &tf, 1e-12).unwrap();
                proptest::prop_assert!((limit - (1.0 - dsc)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn largest_keeps_top_k() {
        let m = vol([7, 1, 1], vec![1, 1, 1, 0, 1, 0, 1]);
        let c = connected_components(&m, Connectivity::Faces);
        assert_eq!(c.sizes, vec![3, 1, 1]);
        assert_eq!(c.largest(1).data(), &[1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(c.labels.data(), &[1, 1, 1, 0, 2, 0, 3]);
    }
}
