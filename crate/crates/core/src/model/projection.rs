//! Semantic projection head: per-pixel inner products with word embeddings,
//! followed by a softmax over a chosen subset of classes.

use crate::error::{Error, Result};
use crate::image::FeatureGrid;
use crate::label_space::{ClassId, EmbeddingTable};

/// Per-pixel values over an ordered class list, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    ids: Vec<ClassId>,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Raw logits `w_c^T phi(x)_nm`.
pub type ScoreGrid = ClassGrid;

/// Softmax-normalized logits.
pub type ProbGrid = ClassGrid;

impl ClassGrid {
    pub fn new(ids: Vec<ClassId>, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Shape("class list is empty".into()));
        }
        if data.len() != ids.len() * height * width {
            return Err(Error::Shape(format!(
                "{}x{} grid over {} classes needs {} values, got {}",
                height,
                width,
                ids.len(),
                ids.len() * height * width,
                data.len()
            )));
        }
        Ok(Self {
            ids,
            height,
            width,
            data,
        })
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Values of pixel `(n, m)`, aligned with [`Self::ids`].
    pub fn pixel(&self, n: usize, m: usize) -> &[f64] {
        let k = self.ids.len();
        let start = (n * self.width + m) * k;
        &self.data[start..start + k]
    }

    pub fn position(&self, id: ClassId) -> Option<usize> {
        self.ids.iter().position(|&c| c == id)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Logits of one embedding vector against a row-major `k x D` class matrix.
pub(crate) fn pixel_logits(embeddings: &[f64], dim: usize, feature: &[f64], out: &mut [f64]) {
    for (o, w) in out.iter_mut().zip(embeddings.chunks_exact(dim)) {
        *o = w.iter().zip(feature).map(|(a, b)| a * b).sum();
    }
}

/// In-place max-shifted softmax.
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
}

/// `log softmax(values)[index]`, computed without forming probabilities.
pub(crate) fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values[index] - lse
}

fn check_dims(feat: &FeatureGrid, table: &EmbeddingTable, ids: &[ClassId]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Shape("projection over an empty class list".into()));
    }
    if feat.channels() != table.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, embeddings {}",
            feat.channels(),
            table.dim()
        )));
    }
    Ok(())
}

pub fn project_logits(feat: &FeatureGrid, table: &EmbeddingTable, ids: &[ClassId]) -> Result<ScoreGrid> {
    check_dims(feat, table, ids)?;
    let w = table.gather(ids)?;
    let k = ids.len();
    let mut data = vec![0.0; feat.pixel_count() * k];
    for (p, out) in data.chunks_exact_mut(k).enumerate() {
        let (n, m) = (p / feat.width(), p % feat.width());
        pixel_logits(&w, table.dim(), feat.pixel(n, m), out);
    }
    ClassGrid::new(ids.to_vec(), feat.height(), feat.width(), data)
}

/// Per-pixel posterior over `ids`.
pub fn project_probs(feat: &FeatureGrid, table: &EmbeddingTable, ids: &[ClassId]) -> Result<ProbGrid> {
    let mut grid = project_logits(feat, table, ids)?;
    let k = ids.len();
    grid.data.chunks_exact_mut(k).for_each(softmax_in_place);
    Ok(grid)
}
