//! Masked pixel-wise cross-entropy, the combined labeled + pseudo-labeled
//! objective, and its exact gradient with respect to the backbone.
//!
//! Losses are sums over contributing pixels; the contributing-pixel count is
//! reported alongside so callers can average. Word embeddings are frozen and
//! receive no gradient.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::label_space::{ClassId, EmbeddingTable, LabelMask, UNLABELED};
use crate::model::backbone::{BackboneParams, Gradients};
use crate::model::projection::{log_softmax_at, pixel_logits, softmax_in_place, ProbGrid};

/// A summed cross-entropy and the number of pixels that contributed to it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CeLoss {
    pub loss: f64,
    pub pixels: usize,
}

impl CeLoss {
    pub fn mean(&self) -> Option<f64> {
        (self.pixels > 0).then(|| self.loss / self.pixels as f64)
    }

    pub fn add(&mut self, other: CeLoss) {
        self.loss += other.loss;
        self.pixels += other.pixels;
    }
}

fn check_same_size(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// `sum_{nm} -1[y_nm != 0] log p(y_nm)`.
pub fn masked_cross_entropy(probs: &ProbGrid, mask: &LabelMask) -> Result<CeLoss> {
    check_same_size(probs.size(), mask.size(), "probabilities and mask differ in size")?;
    let mut out = CeLoss::default();
    for n in 0..mask.height() {
        for m in 0..mask.width() {
            let y = mask.get(n, m);
            if y == UNLABELED {
                continue;
            }
            let k = probs.position(y).ok_or_else(|| {
                Error::Mask(format!("label {y} at ({n}, {m}) is not among the projected classes"))
            })?;
            out.loss -= probs.pixel(n, m)[k].ln();
            out.pixels += 1;
        }
    }
    Ok(out)
}

fn check_disjoint(y: &LabelMask, ybar: &LabelMask) -> Result<()> {
    check_same_size(y.size(), ybar.size(), "label and pseudo-label masks differ in size")?;
    let overlap = y
        .as_slice()
        .iter()
        .zip(ybar.as_slice())
        .position(|(&a, &b)| a != UNLABELED && b != UNLABELED);
    match overlap {
        Some(i) => Err(Error::Mask(format!(
            "pixel ({}, {}) is supervised by both a label and a pseudo-label",
            i / y.width(),
            i % y.width()
        ))),
        None => Ok(()),
    }
}

/// `L_CE(x, y) + lambda * L_CE(x, ybar)`.
pub fn combined_loss(
    probs_seen: &ProbGrid,
    y: &LabelMask,
    probs_pseudo: &ProbGrid,
    ybar: &LabelMask,
    lambda: f64,
) -> Result<f64> {
    check_disjoint(y, ybar)?;
    let seen = masked_cross_entropy(probs_seen, y)?;
    let pseudo = masked_cross_entropy(probs_pseudo, ybar)?;
    Ok(seen.loss + lambda * pseudo.loss)
}

/// Which classes each loss term normalizes over, and the pseudo-label weight.
///
/// Base training uses the seen classes for `seen_ids`; self-training
/// fine-tuning normalizes both terms over seen and unseen classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub seen_ids: Vec<ClassId>,
    pub pseudo_ids: Vec<ClassId>,
    pub lambda: f64,
}

impl Objective {
    pub fn new(seen_ids: Vec<ClassId>, pseudo_ids: Vec<ClassId>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if seen_ids.is_empty() || pseudo_ids.is_empty() {
            return Err(Error::Config("objective class lists must be non-empty".into()));
        }
        Ok(Self {
            seen_ids,
            pseudo_ids,
            lambda,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub seen: CeLoss,
    pub pseudo: CeLoss,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.seen.loss + self.lambda * self.pseudo.loss
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.seen.add(other.seen);
        self.pseudo.add(other.pseudo);
        self.lambda = other.lambda;
    }
}

struct Term {
    weights: Vec<f64>,
    index: [Option<u8>; 256],
    len: usize,
}

impl Term {
    fn new(table: &EmbeddingTable, ids: &[ClassId]) -> Result<Self> {
        let mut index = [None; 256];
        for (k, &id) in ids.iter().enumerate() {
            index[id as usize] = Some(k as u8);
        }
        Ok(Self {
            weights: table.gather(ids)?,
            index,
            len: ids.len(),
        })
    }
}

/// Loss and exact gradient of the combined objective for one image.
pub fn backward(
    image: &Image,
    params: &BackboneParams,
    table: &EmbeddingTable,
    objective: &Objective,
    y: &LabelMask,
    ybar: &LabelMask,
) -> Result<(LossBreakdown, Gradients)> {
    params.check_image(image)?;
    check_same_size(image.size(), y.size(), "image and label mask differ in size")?;
    check_disjoint(y, ybar)?;
    let dim = table.dim();
    if params.output_dim() != dim {
        return Err(Error::Shape(format!(
            "backbone outputs {} dimensions, embeddings have {dim}",
            params.output_dim()
        )));
    }
    let seen = Term::new(table, &objective.seen_ids)?;
    let pseudo = Term::new(table, &objective.pseudo_ids)?;

    let mut out = LossBreakdown {
        lambda: objective.lambda,
        ..Default::default()
    };
    let mut grads = params.zero_grads();
    let mut acts = params.scratch();
    let mut logits = vec![0.0; seen.len.max(pseudo.len)];
    let mut d_feat = vec![0.0; dim];

    for n in 0..image.height() {
        for m in 0..image.width() {
            let (label, term, weight, acc) = match (y.get(n, m), ybar.get(n, m)) {
                (UNLABELED, UNLABELED) => continue,
                (l, UNLABELED) => (l, &seen, 1.0, &mut out.seen),
                (UNLABELED, l) => (l, &pseudo, objective.lambda, &mut out.pseudo),
                _ => unreachable!("overlap rejected above"),
            };
            let k = term.index[label as usize].ok_or_else(|| {
                Error::Mask(format!("label {label} at ({n}, {m}) is not among the projected classes"))
            })? as usize;

            params.gather_input(image, n, m, &mut acts[0]);
            params.forward_pixel(&mut acts);
            let feature = acts.last().expect("non-empty");
            let logits = &mut logits[..term.len];
            pixel_logits(&term.weights, dim, feature, logits);

            acc.loss -= log_softmax_at(logits, k);
            acc.pixels += 1;
            if weight == 0.0 {
                continue;
            }

            // d(-log p_k)/d logit_j = p_j - 1[j = k]
            softmax_in_place(logits);
            logits[k] -= 1.0;
            d_feat.iter_mut().for_each(|v| *v = 0.0);
            for (g, w) in logits.iter().zip(term.weights.chunks_exact(dim)) {
                let g = weight * g;
                d_feat.iter_mut().zip(w).for_each(|(d, wi)| *d += g * wi);
            }
            params.backward_pixel(&acts, &d_feat, &mut grads);
        }
    }

    if !out.total().is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient is not finite".into()));
    }
    Ok((out, grads))
}
