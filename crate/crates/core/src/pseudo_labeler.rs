//! Unseen-class pseudo-labels for unlabeled training pixels.
//!
//! Each augmented view of an image is labeled by an argmax over the unseen
//! classes only, mapped back to original coordinates, and restricted to the
//! pixels that carry no human label. The consistency filter keeps a pixel's
//! label only when every view agrees on it.

use std::fmt;
use std::str::FromStr;

use crate::augmentation::{self, format_spec_list, validate_spec_list, AugmentationSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::label_space::{ClassId, EmbeddingTable, LabelMask, LabelSpace, UNLABELED};
use crate::model::inference::{argmax_first, argmax_mask, score_image};
use crate::model::BackboneParams;

/// The pixels of a training mask that carry no label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledPixelSet {
    height: usize,
    width: usize,
    flags: Vec<bool>,
}

impl UnlabeledPixelSet {
    pub fn from_mask(mask: &LabelMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            flags: mask.as_slice().iter().map(|&v| v == UNLABELED).collect(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn contains(&self, n: usize, m: usize) -> bool {
        self.flags[n * self.width + m]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn restrict(&self, mask: &mut LabelMask) {
        for (v, &keep) in mask.as_mut_slice().iter_mut().zip(&self.flags) {
            if !keep {
                *v = UNLABELED;
            }
        }
    }
}

/// Pseudo-label filtering strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Intersection of the labels from every augmentation.
    Strict,
    /// Labels of the unaugmented image, unfiltered.
    RawSt,
    /// GZS-softmax ranking that drops the least confident `p` percent.
    TopP(f64),
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::TopP(p) if !(0.0..=100.0).contains(&p) => Err(Error::Config(format!(
                "top-p percentage {p} must be in [0, 100]"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Strict => f.write_str("strict"),
            Strategy::RawSt => f.write_str("raw_st"),
            Strategy::TopP(p) => write!(f, "topp:{p}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let strategy = match s {
            "strict" => Strategy::Strict,
            "raw_st" => Strategy::RawSt,
            _ => {
                let p = s
                    .strip_prefix("topp:")
                    .ok_or_else(|| Error::Parse(format!("unknown strategy `{s}`")))?;
                Strategy::TopP(
                    p.parse()
                        .map_err(|_| Error::Parse(format!("bad top-p percentage `{p}`")))?,
                )
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Where a pseudo-mask came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub strategy: Strategy,
    pub specs: Vec<AugmentationSpec>,
    /// Fingerprint of the generator's parameters.
    pub generator: u64,
}

impl Provenance {
    pub fn k(&self) -> usize {
        self.specs.len()
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "strategy={} k={} specs={} generator={:016x}",
            self.strategy,
            self.k(),
            format_spec_list(&self.specs),
            self.generator
        )
    }
}

/// A pseudo-label mask: 0 or unseen ids, nonzero only on unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub mask: LabelMask,
    pub provenance: Provenance,
}

/// Unseen-only hard labels for one augmented view, in original coordinates,
/// zero outside `unlabeled`.
pub fn unseen_hard_labels(
    generator: &BackboneParams,
    image: &Image,
    spec: &AugmentationSpec,
    table: &EmbeddingTable,
    space: &LabelSpace,
    unlabeled: &UnlabeledPixelSet,
) -> Result<LabelMask> {
    if unlabeled.size() != image.size() {
        return Err(Error::Shape("unlabeled set and image differ in size".into()));
    }
    let mut unseen: Vec<ClassId> = space.unseen().to_vec();
    if unseen.is_empty() {
        return Err(Error::LabelSpace("no unseen classes to pseudo-label".into()));
    }
    unseen.sort_unstable();
    let augmented = augmentation::apply(spec, image)?;
    let scores = score_image(&augmented, generator, table, &unseen)?;
    let labels = argmax_mask(&scores, &vec![0.0; unseen.len()])?;
    let mut mask = augmentation::invert_mask(spec, &labels, image.size())?;
    unlabeled.restrict(&mut mask);
    Ok(mask)
}

/// Keeps a pixel's label only where every mask holds the same value.
pub fn consistency_intersect(masks: &[LabelMask]) -> Result<LabelMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Config("intersection of zero masks".into()))?;
    let mut out = first.clone();
    for mask in rest {
        if mask.size() != out.size() {
            return Err(Error::Shape(format!(
                "cannot intersect {}x{} and {}x{} masks",
                out.height(),
                out.width(),
                mask.height(),
                mask.width()
            )));
        }
        for (o, &v) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if *o != v {
                *o = UNLABELED;
            }
        }
    }
    Ok(out)
}

fn top_p_labels(
    generator: &BackboneParams,
    image: &Image,
    table: &EmbeddingTable,
    space: &LabelSpace,
    unlabeled: &UnlabeledPixelSet,
    p: f64,
) -> Result<LabelMask> {
    let scores = score_image(image, generator, table, space.all())?;
    let ids = scores.ids();
    let unseen_idx: Vec<usize> = (0..ids.len()).filter(|&k| space.is_unseen(ids[k])).collect();
    let (h, w) = image.size();
    let mut mask = LabelMask::zeros(h, w);
    // (confidence, row-major index) of every unlabeled pixel
    let mut ranked = Vec::with_capacity(unlabeled.len());
    let mut buf = vec![0.0; unseen_idx.len()];
    for n in 0..h {
        for m in 0..w {
            if !unlabeled.contains(n, m) {
                continue;
            }
            let logits = scores.pixel(n, m);
            buf.iter_mut().zip(&unseen_idx).for_each(|(b, &k)| *b = logits[k]);
            let best = unseen_idx[argmax_first(&buf)];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            let confidence = (logits[best] - max).exp() / z;
            mask.set(n, m, ids[best]);
            ranked.push((confidence, n * w + m));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let drop = ((p / 100.0) * ranked.len() as f64).floor() as usize;
    for &(_, idx) in ranked.iter().take(drop) {
        mask.as_mut_slice()[idx] = UNLABELED;
    }
    Ok(mask)
}

/// Produces the pseudo-mask for one training image under `strategy`.
///
/// `specs` must start with the identity; `raw_st` and `topp` use only the
/// unaugmented image.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    strategy: Strategy,
    generator: &BackboneParams,
    image: &Image,
    y: &LabelMask,
    specs: &[AugmentationSpec],
    table: &EmbeddingTable,
    space: &LabelSpace,
) -> Result<PseudoMask> {
    strategy.validate()?;
    validate_spec_list(specs)?;
    let unlabeled = UnlabeledPixelSet::from_mask(y);
    let (mask, used) = match strategy {
        Strategy::Strict => {
            let views = specs
                .iter()
                .map(|spec| unseen_hard_labels(generator, image, spec, table, space, &unlabeled))
                .collect::<Result<Vec<_>>>()?;
            (consistency_intersect(&views)?, specs.to_vec())
        }
        Strategy::RawSt => (
            unseen_hard_labels(
                generator,
                image,
                &AugmentationSpec::Identity,
                table,
                space,
                &unlabeled,
            )?,
            vec![AugmentationSpec::Identity],
        ),
        Strategy::TopP(p) => (
            top_p_labels(generator, image, table, space, &unlabeled, p)?,
            vec![AugmentationSpec::Identity],
        ),
    };
    Ok(PseudoMask {
        mask,
        provenance: Provenance {
            strategy,
            specs: used,
            generator: generator.fingerprint(),
        },
    })
}
