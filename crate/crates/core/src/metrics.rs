//! Segmentation metrics: confusion-matrix IoU and F1, tolerance-matched
//! boundary F1, and the share of sampled points that land on foreground.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::learn::IGNORE_LABEL;
use crate::nn::NormalizedPoint;

/// Boundary tolerances in pixels at the reference crop size.
pub const REFERENCE_THRESHOLDS: [usize; 4] = [12, 9, 5, 3];
/// Scale from reference tolerances to desk-scale ones.
pub const DESK_THRESHOLD_SCALE: f64 = 0.25;

/// `floor(t · scale)`, at least 1 pixel.
pub fn scaled_thresholds(reference: &[usize], scale: f64) -> Vec<usize> {
    reference.iter().map(|&t| ((t as f64 * scale).floor() as usize).max(1)).collect()
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape("confusion_matrix", format!("{} counts for {k} classes", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore label.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion_matrix", format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::arg("confusion_matrix", format!("label {} outside {} classes", p.max(g), self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion_matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: usize,
}

fn class_scores(cm: &ConfusionMatrix, score: impl Fn(u64, u64, u64) -> f64) -> Result<ClassScores> {
    if cm.k < 2 {
        return Err(Error::arg("metrics", "need at least two classes"));
    }
    if cm.total() == 0 {
        return Err(Error::arg("metrics", "empty confusion matrix"));
    }
    let per_class: Vec<Option<f64>> = (0..cm.k)
        .map(|c| {
            let (tp, fp, fn_) = cm.class_counts(c);
            (tp + fp + fn_ > 0).then(|| score(tp, fp, fn_))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassScores {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        excluded: cm.k - present.len(),
        per_class,
    })
}

/// `IoU = tp / (tp + fp + fn)`, averaged over classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<ClassScores> {
    class_scores(cm, |tp, fp, fn_| tp as f64 / (tp + fp + fn_) as f64)
}

/// `F1 = 2tp / (2tp + fp + fn)`, averaged like [`miou`].
pub fn class_f1(cm: &ConfusionMatrix) -> Result<ClassScores> {
    class_scores(cm, |tp, fp, fn_| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Contour pixels of a label grid: a pixel whose right or lower neighbor
/// has a different label, giving one-pixel-wide contours.
pub fn contour(labels: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = labels[i * w + j];
            out[i * w + j] = (j + 1 < w && labels[i * w + j + 1] != v) || (i + 1 < h && labels[(i + 1) * w + j] != v);
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function (lower envelope
/// of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: Option<usize> = None;
    let intersect = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let Some(mut kk) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        let mut s = intersect(q, v[kk]);
        while s <= z[kk] {
            kk -= 1;
            s = intersect(q, v[kk]);
        }
        kk += 1;
        v[kk] = q;
        z[kk] = s;
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel; infinite when none is set.
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for j in 0..w {
        for i in 0..h {
            col[i] = d[i * w + j];
        }
        edt_1d(&col, &mut tmp[..h]);
        for i in 0..h {
            d[i * w + j] = tmp[i];
        }
    }
    for i in 0..h {
        let row = d[i * w..(i + 1) * w].to_vec();
        edt_1d(&row, &mut d[i * w..(i + 1) * w]);
    }
    d
}

/// Mergeable tallies behind boundary F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_matched: u64,
    pub pred_total: u64,
    pub gt_matched: u64,
    pub gt_total: u64,
}

impl BoundaryCounts {
    pub fn merge(&mut self, o: &Self) {
        self.pred_matched += o.pred_matched;
        self.pred_total += o.pred_total;
        self.gt_matched += o.gt_matched;
        self.gt_total += o.gt_total;
    }

    /// F-measure of the tallies; 1 when both contours are empty, 0 when
    /// only one is.
    pub fn f1(&self) -> f64 {
        match (self.pred_total, self.gt_total) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (pt, gt) => {
                let p = self.pred_matched as f64 / pt as f64;
                let r = self.gt_matched as f64 / gt as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            }
        }
    }
}

/// Matches contour pixels within Euclidean distance `threshold`.
pub fn boundary_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, threshold: usize) -> Result<BoundaryCounts> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape("boundary_f1", format!("masks of {} and {} pixels for {h}x{w}", pred.len(), gt.len())));
    }
    if threshold == 0 {
        return Err(Error::arg("boundary_f1", "threshold must be at least 1 px"));
    }
    let (bp, bg) = (contour(pred, h, w), contour(gt, h, w));
    let (dp, dg) = (squared_distance_transform(&bp, h, w), squared_distance_transform(&bg, h, w));
    let t2 = (threshold * threshold) as f64;
    let mut c = BoundaryCounts::default();
    for px in 0..h * w {
        if bp[px] {
            c.pred_total += 1;
            c.pred_matched += u64::from(dg[px] <= t2);
        }
        if bg[px] {
            c.gt_total += 1;
            c.gt_matched += u64::from(dp[px] <= t2);
        }
    }
    Ok(c)
}

pub fn boundary_f1(pred: &[u8], gt: &[u8], h: usize, w: usize, threshold: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, h, w, threshold)?.f1())
}

/// Fraction of distinct full-resolution cells hit by `points` that are
/// foreground (label not 0 and not ignored).
pub fn fg_sample_ratio(points: impl IntoIterator<Item = NormalizedPoint>, gt: &[u8], h: usize, w: usize) -> Result<f64> {
    PointCounts::of(points, gt, h, w).ratio().ok_or_else(|| Error::arg("fg_sample_ratio", "no points"))
}

/// Fraction-of-points tallies, mergeable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PointCounts {
    pub foreground: u64,
    pub total: u64,
}

impl PointCounts {
    pub fn of(points: impl IntoIterator<Item = NormalizedPoint>, gt: &[u8], h: usize, w: usize) -> Self {
        Self::of_cells(&points.into_iter().map(|p| p.cell(h, w)).collect(), gt, w)
    }

    /// Tallies distinct `(row, col)` cells of a label grid `w` wide.
    pub fn of_cells(cells: &HashSet<(usize, usize)>, gt: &[u8], w: usize) -> Self {
        let foreground = cells.iter().filter(|&&(i, j)| !matches!(gt[i * w + j], 0 | IGNORE_LABEL)).count() as u64;
        Self { foreground, total: cells.len() as u64 }
    }

    pub fn merge(&mut self, o: &Self) {
        self.foreground += o.foreground;
        self.total += o.total;
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.foreground as f64 / self.total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(k: usize, counts: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(k, counts.to_vec()).unwrap()
    }

    #[test]
    fn iou_and_f1_hand_cases() {
        let m = cm(2, &[3, 1, 1, 3]);
        let iou = miou(&m).unwrap();
        assert_eq!(iou.per_class, vec![Some(0.6), Some(0.6)]);
        assert!((iou.mean - 0.6).abs() < 1e-15);
        assert_eq!(class_f1(&m).unwrap().per_class, vec![Some(0.75), Some(0.75)]);

        let perfect = cm(3, &[4, 0, 0, 0, 2, 0, 0, 0, 0]);
        let s = miou(&perfect).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!((s.mean, s.excluded), (1.0, 1));

        let wrong = cm(2, &[0, 5, 7, 0]);
        assert_eq!(class_f1(&wrong).unwrap().per_class, vec![Some(0.0), Some(0.0)]);
        assert!(miou(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn ignore_label_is_skipped() {
        let mut m = ConfusionMatrix::new(2);
        m.add(&[0, 1, 1], &[0, IGNORE_LABEL, 1]).unwrap();
        assert_eq!(m.total(), 2);
        assert!(m.add(&[2], &[0]).is_err());
    }

    #[test]
    fn identical_masks_score_one() {
        let mask: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 3) as u8).collect();
        for t in [1, 2, 3] {
            assert_eq!(boundary_f1(&mask, &mask, 8, 8, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn shifted_contour() {
        let (h, w) = (8, 16);
        let split = |c: usize| (0..h * w).map(|i| u8::from(i % w >= c)).collect::<Vec<_>>();
        let (gt, pred) = (split(6), split(8));
        assert_eq!(boundary_f1(&pred, &gt, h, w, 3).unwrap(), 1.0);
        assert_eq!(boundary_f1(&pred, &gt, h, w, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_contours_agree() {
        assert_eq!(boundary_f1(&[1; 16], &[1; 16], 4, 4, 1).unwrap(), 1.0);
        let mut one = [0u8; 16];
        one[5] = 1;
        assert_eq!(boundary_f1(&one, &[0; 16], 4, 4, 2).unwrap(), 0.0);
    }

    fn brute_sq_dist(set: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|p| {
                (0..h * w)
                    .filter(|&q| set[q])
                    .map(|q| {
                        let (di, dj) = ((p / w) as f64 - (q / w) as f64, (p % w) as f64 - (q % w) as f64);
                        di * di + dj * dj
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn threshold_scaling() {
        assert_eq!(scaled_thresholds(&REFERENCE_THRESHOLDS, DESK_THRESHOLD_SCALE), vec![3, 2, 1, 1]);
    }

    #[test]
    fn fg_ratio_cases() {
        let (h, w) = (8, 8);
        let mut gt = vec![0u8; 64];
        for i in 2..4 {
            for j in 2..6 {
                gt[i * w + j] = 1;
            }
        }
        let on_fg: Vec<_> = [(2, 2), (3, 3)].iter().map(|&(i, j)| NormalizedPoint::cell_center(i, j, h, w)).collect();
        assert_eq!(fg_sample_ratio(on_fg.clone(), &gt, h, w).unwrap(), 1.0);
        // the same cell reached from a coarser grid is counted once
        let dup = NormalizedPoint::cell_center(1, 1, 4, 4);
        assert_eq!(dup.cell(8, 8), (3, 3));
        assert_eq!(fg_sample_ratio(on_fg.into_iter().chain([dup]), &gt, h, w).unwrap(), 1.0);
        let grid: Vec<_> = (0..64).map(|i| NormalizedPoint::from_flat(i, h, w)).collect();
        assert_eq!(fg_sample_ratio(grid, &gt, h, w).unwrap(), 8.0 / 64.0);
        assert!(fg_sample_ratio(Vec::new(), &gt, h, w).is_err());
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(bits in prop::collection::vec(prop::bool::weighted(0.1), 10 * 7)) {
            prop_assert_eq!(squared_distance_transform(&bits, 10, 7), brute_sq_dist(&bits, 10, 7));
        }

        #[test]
        fn streaming_equals_concatenated(a in prop::collection::vec(0u8..3, 32), b in prop::collection::vec(0u8..3, 32),
                                         c in prop::collection::vec(0u8..3, 32), d in prop::collection::vec(0u8..3, 32)) {
            let mut m1 = ConfusionMatrix::new(3);
            m1.add(&a, &b).unwrap();
            let mut m2 = ConfusionMatrix::new(3);
            m2.add(&c, &d).unwrap();
            m1.merge(&m2).unwrap();
            let mut whole = ConfusionMatrix::new(3);
            whole.add(&[a, c].concat(), &[b, d].concat()).unwrap();
            prop_assert_eq!(&m1, &whole);
            prop_assert_eq!(miou(&m1).unwrap(), miou(&whole).unwrap());
        }

        #[test]
        fn boundary_f1_symmetric_and_bounded(a in prop::collection::vec(0u8..3, 64), b in prop::collection::vec(0u8..3, 64), t in 1usize..4) {
            let f = boundary_f1(&a, &b, 8, 8, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let (ca, cb) = (contour(&a, 8, 8), contour(&b, 8, 8));
            if ca.contains(&true) && cb.contains(&true) {
                prop_assert!((f - boundary_f1(&b, &a, 8, 8, t).unwrap()).abs() < 1e-12);
            }
            let iou = miou(&{ let mut m = ConfusionMatrix::new(3); m.add(&a, &b).unwrap(); m }).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou.mean));
        }
    }
}
