//! Generalized zero-shot inference: per-pixel argmax over seen and unseen
//! classes, with an optional calibration constant subtracted from every seen
//! logit. Softmax is monotone, so the argmax is taken on logits directly.

use crate::error::Result;
use crate::image::Image;
use crate::label_space::{ClassId, EmbeddingTable, LabelMask, LabelSpace};
use crate::model::backbone::{forward_backbone, BackboneParams};
use crate::model::projection::{project_logits, ScoreGrid};

/// Index of the largest value; ties go to the earliest entry.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax of a score grid whose ids are in ascending order, after
/// subtracting `offsets[k]` from class `k`.
pub(crate) fn argmax_mask(scores: &ScoreGrid, offsets: &[f64]) -> Result<LabelMask> {
    let ids = scores.ids();
    let (h, w) = scores.size();
    let mut buf = vec![0.0; ids.len()];
    let mut out = Vec::with_capacity(h * w);
    for n in 0..h {
        for m in 0..w {
            buf.iter_mut()
                .zip(scores.pixel(n, m))
                .zip(offsets)
                .for_each(|((b, s), o)| *b = s - o);
            out.push(ids[argmax_first(&buf)]);
        }
    }
    LabelMask::new(h, w, out)
}

/// Logits of every pixel over `ids` (which should be ascending so that ties
/// break toward the lowest id).
pub fn score_image(
    image: &Image,
    params: &BackboneParams,
    table: &EmbeddingTable,
    ids: &[ClassId],
) -> Result<ScoreGrid> {
    let feat = forward_backbone(image, params)?;
    project_logits(&feat, table, ids)
}

/// Calibrated argmax over a GZS score grid: `gamma` is subtracted from every
/// seen-class logit.
pub fn calibrated_labels(scores: &ScoreGrid, space: &LabelSpace, gamma: f64) -> Result<LabelMask> {
    let offsets: Vec<f64> = scores
        .ids()
        .iter()
        .map(|&id| if space.is_seen(id) { gamma } else { 0.0 })
        .collect();
    argmax_mask(scores, &offsets)
}

/// Predicts one class per pixel over seen and unseen classes. `gamma = 0`
/// is plain argmax.
pub fn infer_gzs(
    image: &Image,
    params: &BackboneParams,
    table: &EmbeddingTable,
    space: &LabelSpace,
    gamma: f64,
) -> Result<LabelMask> {
    let scores = score_image(image, params, table, space.all())?;
    calibrated_labels(&scores, space, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::projection::ClassGrid;

    #[test]
    fn ties_break_toward_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[2.0, 2.0]), 0);
    }

    #[test]
    fn calibration_flips_close_call() {
        let space = LabelSpace::dense(1, 1, false).unwrap();
        let scores = ClassGrid::new(vec![1, 2], 1, 1, vec![1.0, 0.8]).unwrap();
        assert_eq!(calibrated_labels(&scores, &space, 0.0).unwrap().get(0, 0), 1);
        assert_eq!(calibrated_labels(&scores, &space, 0.3).unwrap().get(0, 0), 2);
        assert_eq!(calibrated_labels(&scores, &space, 0.2).unwrap().get(0, 0), 1);
    }

    #[test]
    fn huge_gamma_predicts_only_unseen() {
        let space = LabelSpace::dense(2, 2, false).unwrap();
        let scores = ClassGrid::new(
            vec![1, 2, 3, 4],
            1,
            2,
            vec![50.0, 40.0, -30.0, -31.0, 9.0, 8.0, -3.0, 2.0],
        )
        .unwrap();
        let mask = calibrated_labels(&scores, &space, 1e6).unwrap();
        assert_eq!(mask.as_slice(), &[3, 4]);
    }

    #[test]
    fn identity_backbone_end_to_end() {
        let space = LabelSpace::dense(1, 1, false).unwrap();
        let table = EmbeddingTable::new(2, vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]).unwrap();
        let image = Image::new(2, 1, 2, vec![0.9, 0.1, 0.2, 0.7]).unwrap();
        let params = BackboneParams::identity(2, 2);
        let mask = infer_gzs(&image, &params, &table, &space, 0.0).unwrap();
        assert_eq!(mask.as_slice(), &[1, 2]);
    }
}
