//! Segmentation metrics: confusion matrices, IoU, seen/unseen mIoU and their
//! harmonic mean, plus pseudo-label quality against hidden ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label_space::{ClassId, LabelMask, LabelSpace, UNLABELED};
use crate::pseudo_labeler::UnlabeledPixelSet;

pub const REPORT_HEADER: &str = "# zlss-report v1";

/// Pixel counts indexed by (ground-truth id, predicted id). Pixels whose
/// ground truth is 0 are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Square matrix covering ids `0..=max_id`.
    pub fn new(max_id: ClassId) -> Self {
        let size = max_id as usize + 1;
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn for_space(space: &LabelSpace) -> Self {
        Self::new(space.max_id())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        let (g, p) = (gt as usize, pred as usize);
        if g >= self.size || p >= self.size {
            return 0;
        }
        self.counts[g * self.size + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.size() != gt.size() {
            return Err(Error::Shape(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == UNLABELED {
                continue;
            }
            let (gi, pi) = (g as usize, p as usize);
            if gi >= self.size || pi >= self.size {
                return Err(Error::LabelSpace(format!(
                    "id {} outside the confusion matrix (max {})",
                    gi.max(pi),
                    self.size - 1
                )));
            }
            self.counts[gi * self.size + pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::Shape(format!(
                "cannot merge {0}x{0} and {1}x{1} confusion matrices",
                self.size, other.size
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Pixels whose ground truth is `c`.
    pub fn gt_pixels(&self, c: ClassId) -> u64 {
        (0..self.size).map(|p| self.get(c, p as ClassId)).sum()
    }

    /// Pixels predicted as `c` (among evaluated pixels).
    pub fn pred_pixels(&self, c: ClassId) -> u64 {
        (0..self.size).map(|g| self.get(g as ClassId, c)).sum()
    }

    /// TP / (TP + FP + FN), or `None` when the class is neither present nor
    /// predicted.
    pub fn iou(&self, c: ClassId) -> Option<f64> {
        let tp = self.get(c, c);
        let union = self.gt_pixels(c) + self.pred_pixels(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// 2SU / (S + U), 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if !(s >= 0.0 && u >= 0.0) || !s.is_finite() || !u.is_finite() {
        return Err(Error::Numeric(format!(
            "harmonic mean needs finite non-negative inputs, got {s} and {u}"
        )));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub id: ClassId,
    pub seen: bool,
    pub iou: Option<f64>,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
}

/// Per-class IoU and the seen/unseen/harmonic summary, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct GzlssReport {
    pub classes: Vec<ClassReport>,
    pub seen_miou: f64,
    pub unseen_miou: f64,
    pub hm: f64,
}

fn mean_percent(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

impl GzlssReport {
    pub fn from_confusion(cm: &ConfusionMatrix, space: &LabelSpace) -> Result<Self> {
        let classes: Vec<ClassReport> = space
            .all()
            .iter()
            .map(|&id| ClassReport {
                id,
                seen: space.is_seen(id),
                iou: cm.iou(id),
                gt_pixels: cm.gt_pixels(id),
                pred_pixels: cm.pred_pixels(id),
            })
            .collect();
        let group = |seen: bool| {
            mean_percent(classes.iter().filter(|c| c.seen == seen).filter_map(|c| c.iou))
        };
        let seen_miou = group(true);
        let unseen_miou = group(false);
        Ok(Self {
            hm: harmonic_mean(seen_miou, unseen_miou)?,
            classes,
            seen_miou,
            unseen_miou,
        })
    }

    /// `S=<v> U=<v> HM=<v>` with one decimal.
    pub fn summary(&self) -> String {
        format!("S={:.1} U={:.1} HM={:.1}", self.seen_miou, self.unseen_miou, self.hm)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\nclass,iou,gt_pixels,pred_pixels\n");
        for c in &self.classes {
            let iou = c.iou.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_default();
            let _ = writeln!(out, "{},{iou},{},{}", c.id, c.gt_pixels, c.pred_pixels);
        }
        let _ = writeln!(out, "seen_miou,{:.1},,", self.seen_miou);
        let _ = writeln!(out, "unseen_miou,{:.1},,", self.unseen_miou);
        let _ = writeln!(out, "hm,{:.1},,", self.hm);
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Raw counts behind pseudo-label quality, summable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PseudoCounts {
    /// Unlabeled pixels.
    pub unlabeled: u64,
    /// Unlabeled pixels that received a pseudo-label.
    pub assigned: u64,
    /// Pseudo-labels on pixels with nonzero ground truth.
    pub assigned_evaluated: u64,
    /// Pseudo-labels equal to the ground truth.
    pub correct: u64,
    /// Unlabeled pixels whose ground truth is an unseen class.
    pub gt_unseen: u64,
}

impl PseudoCounts {
    pub fn add(&mut self, other: &PseudoCounts) {
        self.unlabeled += other.unlabeled;
        self.assigned += other.assigned;
        self.assigned_evaluated += other.assigned_evaluated;
        self.correct += other.correct;
        self.gt_unseen += other.gt_unseen;
    }

    pub fn quality(&self) -> PseudoQuality {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        PseudoQuality {
            precision: ratio(self.correct, self.assigned_evaluated),
            recall: ratio(self.correct, self.gt_unseen),
            coverage: ratio(self.assigned, self.unlabeled),
        }
    }
}

/// Fractions in [0, 1]; `None` when the denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoQuality {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn pseudo_counts(
    pseudo: &LabelMask,
    hidden_gt: &LabelMask,
    unlabeled: &UnlabeledPixelSet,
    space: &LabelSpace,
) -> Result<PseudoCounts> {
    if pseudo.size() != hidden_gt.size() || pseudo.size() != unlabeled.size() {
        return Err(Error::Shape("pseudo-mask, ground truth and unlabeled set differ in size".into()));
    }
    let mut c = PseudoCounts::default();
    for ((&p, &g), &free) in pseudo.as_slice().iter().zip(hidden_gt.as_slice()).zip(unlabeled.flags()) {
        if !free {
            continue;
        }
        c.unlabeled += 1;
        c.assigned += u64::from(p != UNLABELED);
        if g == UNLABELED {
            continue;
        }
        c.assigned_evaluated += u64::from(p != UNLABELED);
        c.correct += u64::from(p != UNLABELED && p == g);
        c.gt_unseen += u64::from(space.is_unseen(g));
    }
    Ok(c)
}

pub fn pseudo_quality(
    pseudo: &LabelMask,
    hidden_gt: &LabelMask,
    unlabeled: &UnlabeledPixelSet,
    space: &LabelSpace,
) -> Result<PseudoQuality> {
    Ok(pseudo_counts(pseudo, hidden_gt, unlabeled, space)?.quality())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_enumerated_matrix_and_iou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(2, 1, &[1, 1]), &mask(2, 1, &[1, 2])).unwrap();
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(2, 1), 1);
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.iou(1), Some(0.5));
        assert_eq!(cm.iou(2), Some(0.0));
    }

    #[test]
    fn ground_truth_zero_is_skipped() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(1, 3, &[1, 2, 3]), &LabelMask::zeros(1, 3)).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert_eq!(cm.iou(2), None);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = mask(2, 2, &[1, 2, 2, 3]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        for g in 0..4u8 {
            for p in 0..4u8 {
                assert_eq!(cm.get(g, p) > 0, g == p && g != 0);
            }
        }
        assert_eq!(cm.iou(2), Some(1.0));
        assert!(cm.accumulate(&gt, &LabelMask::zeros(1, 4)).is_err());
    }

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(82.7, 35.6).unwrap() - 49.8).abs() < 0.05);
        assert!((harmonic_mean(77.8, 25.8).unwrap() - 38.7498).abs() < 1e-4);
        assert_eq!(harmonic_mean(42.0, 42.0).unwrap(), 42.0);
        assert_eq!(harmonic_mean(42.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!(harmonic_mean(-1.0, 3.0).is_err());
    }

    #[test]
    fn report_skips_absent_classes() {
        let space = LabelSpace::dense(2, 2, false).unwrap();
        let mut cm = ConfusionMatrix::for_space(&space);
        // class 2 never appears or is predicted
        cm.accumulate(&mask(1, 3, &[1, 3, 4]), &mask(1, 3, &[1, 3, 3])).unwrap();
        let r = GzlssReport::from_confusion(&cm, &space).unwrap();
        assert_eq!(r.classes[1].iou, None);
        assert_eq!(r.seen_miou, 100.0);
        assert_eq!(r.unseen_miou, 25.0);
        assert_eq!(r.hm, 40.0);
        assert_eq!(r.summary(), "S=100.0 U=25.0 HM=40.0");
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.contains("\n2,,0,0\n"));
        assert!(csv.contains("\nhm,40.0,,\n"));
    }

    #[test]
    fn pseudo_quality_hand_count() {
        let space = LabelSpace::dense(1, 2, false).unwrap();
        let i = UnlabeledPixelSet::from_mask(&LabelMask::zeros(1, 3));
        let q = pseudo_quality(&mask(1, 3, &[2, 0, 2]), &mask(1, 3, &[2, 2, 3]), &i, &space).unwrap();
        assert_eq!(q.precision, Some(0.5));
        assert_eq!(q.recall, Some(1.0 / 3.0));
        assert_eq!(q.coverage, Some(2.0 / 3.0));
    }

    #[test]
    fn pseudo_quality_edges() {
        let space = LabelSpace::dense(1, 2, false).unwrap();
        let y = mask(1, 3, &[0, 0, 1]);
        let gt = mask(1, 3, &[2, 3, 1]);
        let i = UnlabeledPixelSet::from_mask(&y);
        let q = pseudo_quality(&LabelMask::zeros(1, 3), &gt, &i, &space).unwrap();
        assert_eq!((q.coverage, q.precision), (Some(0.0), None));
        let q = pseudo_quality(&mask(1, 3, &[2, 3, 0]), &gt, &i, &space).unwrap();
        assert_eq!((q.precision, q.recall, q.coverage), (Some(1.0), Some(1.0), Some(1.0)));
        let none = UnlabeledPixelSet::from_mask(&mask(1, 3, &[1, 1, 1]));
        let q = pseudo_quality(&LabelMask::zeros(1, 3), &gt, &none, &space).unwrap();
        assert_eq!(q, PseudoQuality { precision: None, recall: None, coverage: None });
    }
}
