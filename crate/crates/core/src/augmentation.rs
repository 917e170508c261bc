//! Invertible spatial augmentations and the inverse resampling of label
//! masks back to original coordinates.
//!
//! Images are resampled bilinearly; label masks only ever by nearest
//! neighbor. For a resize from `S` to `T` pixels along an axis, target index
//! `i` reads source index `floor((i + 0.5) * S / T)`, clamped to `S - 1`.
//! Bilinear sampling uses the same half-pixel-center convention.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::label_space::LabelMask;

/// A positive rational scale factor in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleFactor {
    num: u32,
    den: u32,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl ScaleFactor {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Parse(format!("scale factor {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        let (num, den) = (num / g, den / g);
        match (u32::try_from(num), u32::try_from(den)) {
            (Ok(num), Ok(den)) => Ok(Self { num, den }),
            _ => Err(Error::Parse(format!("scale factor {num}/{den} is too precise"))),
        }
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(len * num / den)`, halves rounded up.
    pub fn scale_len(&self, len: usize) -> usize {
        let (num, den) = (self.num as u64, self.den as u64);
        ((2 * len as u64 * num + den) / (2 * den)) as usize
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// How a scale factor was chosen. Recorded for provenance only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    Down,
    Up,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentationSpec {
    Identity,
    MirrorHorizontal,
    Scale { factor: ScaleFactor, mode: ScaleMode },
}

impl AugmentationSpec {
    /// A fixed scale; the mode is inferred from the factor.
    pub fn scale(num: u64, den: u64) -> Result<Self> {
        let factor = ScaleFactor::new(num, den)?;
        let mode = if factor.num < factor.den {
            ScaleMode::Down
        } else {
            ScaleMode::Up
        };
        Ok(Self::Scale { factor, mode })
    }

    /// A scale factor drawn uniformly from `[1/2, 2]` in steps of `1/100`.
    pub fn random_scale<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let factor = ScaleFactor::new(rng.gen_range(50..=200), 100).expect("positive");
        Self::Scale {
            factor,
            mode: ScaleMode::Random,
        }
    }

    /// Size of the augmented grid for an input of `size`.
    pub fn output_size(&self, size: (usize, usize)) -> Result<(usize, usize)> {
        match self {
            Self::Identity | Self::MirrorHorizontal => Ok(size),
            Self::Scale { factor, .. } => {
                let out = (factor.scale_len(size.0), factor.scale_len(size.1));
                if out.0 == 0 || out.1 == 0 {
                    return Err(Error::Shape(format!(
                        "scaling {}x{} by {factor} leaves an empty image",
                        size.0, size.1
                    )));
                }
                Ok(out)
            }
        }
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::MirrorHorizontal => f.write_str("mirror"),
            Self::Scale { factor, .. } => write!(f, "scale={factor}"),
        }
    }
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

fn bilinear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(src - 1);
    (x0, x1, x - x0 as f64)
}

fn resize_bilinear(image: &Image, size: (usize, usize)) -> Result<Image> {
    let (h, w) = image.size();
    let c = image.channels();
    let mut out = Image::zeros(c, size.0, size.1);
    let cols: Vec<_> = (0..size.1).map(|m| bilinear_taps(m, w, size.1)).collect();
    for n in 0..size.0 {
        let (n0, n1, fy) = bilinear_taps(n, h, size.0);
        for (m, &(m0, m1, fx)) in cols.iter().enumerate() {
            let (a, b) = (image.pixel(n0, m0), image.pixel(n0, m1));
            let (cc, d) = (image.pixel(n1, m0), image.pixel(n1, m1));
            for (k, v) in out.pixel_mut(n, m).iter_mut().enumerate() {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = cc[k] + (d[k] - cc[k]) * fx;
                *v = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

fn resize_nearest(mask: &LabelMask, size: (usize, usize)) -> Result<LabelMask> {
    let (h, w) = mask.size();
    let cols: Vec<usize> = (0..size.1).map(|m| nearest_index(m, w, size.1)).collect();
    let mut data = Vec::with_capacity(size.0 * size.1);
    for n in 0..size.0 {
        let src_n = nearest_index(n, h, size.0);
        data.extend(cols.iter().map(|&src_m| mask.get(src_n, src_m)));
    }
    LabelMask::new(size.0, size.1, data)
}

fn mirror_mask(mask: &LabelMask) -> LabelMask {
    let mut out = mask.clone();
    let w = mask.width();
    for row in out.as_mut_slice().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Applies the augmentation to a real-valued image.
pub fn apply(spec: &AugmentationSpec, image: &Image) -> Result<Image> {
    match spec {
        AugmentationSpec::Identity => Ok(image.clone()),
        AugmentationSpec::MirrorHorizontal => {
            let mut out = image.clone();
            let (h, w) = image.size();
            for n in 0..h {
                for m in 0..w {
                    out.pixel_mut(n, m).copy_from_slice(image.pixel(n, w - 1 - m));
                }
            }
            Ok(out)
        }
        AugmentationSpec::Scale { .. } => resize_bilinear(image, spec.output_size(image.size())?),
    }
}

/// Applies the augmentation to a label mask (nearest neighbor).
pub fn apply_mask(spec: &AugmentationSpec, mask: &LabelMask) -> Result<LabelMask> {
    match spec {
        AugmentationSpec::Identity => Ok(mask.clone()),
        AugmentationSpec::MirrorHorizontal => Ok(mirror_mask(mask)),
        AugmentationSpec::Scale { .. } => resize_nearest(mask, spec.output_size(mask.size())?),
    }
}

/// Maps a mask predicted on the augmented image back to `original_size`.
pub fn invert_mask(
    spec: &AugmentationSpec,
    mask: &LabelMask,
    original_size: (usize, usize),
) -> Result<LabelMask> {
    let expected = spec.output_size(original_size)?;
    if mask.size() != expected {
        return Err(Error::Shape(format!(
            "{spec} of {}x{} yields {}x{}, got a {}x{} mask",
            original_size.0,
            original_size.1,
            expected.0,
            expected.1,
            mask.height(),
            mask.width()
        )));
    }
    match spec {
        AugmentationSpec::Identity => Ok(mask.clone()),
        AugmentationSpec::MirrorHorizontal => Ok(mirror_mask(mask)),
        AugmentationSpec::Scale { .. } => resize_nearest(mask, original_size),
    }
}

fn parse_decimal(text: &str) -> Result<ScaleFactor> {
    let bad = || Error::Parse(format!("bad scale factor `{text}`"));
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 9 {
        return Err(bad());
    }
    let den = 10u64.pow(frac.len() as u32);
    let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?;
    ScaleFactor::new(num, den)
}

/// Parses one token: `identity`, `mirror`, `scale=<num>/<den>` or
/// `scale=<decimal>`.
pub fn parse_spec(text: &str) -> Result<AugmentationSpec> {
    let text = text.trim();
    match text {
        "identity" => return Ok(AugmentationSpec::Identity),
        "mirror" => return Ok(AugmentationSpec::MirrorHorizontal),
        _ => {}
    }
    let value = text
        .strip_prefix("scale=")
        .ok_or_else(|| Error::Parse(format!("unknown augmentation `{text}`")))?;
    let factor = match value.split_once('/') {
        Some((num, den)) => {
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Parse(format!("bad scale factor `{value}`")))
            };
            ScaleFactor::new(parse(num)?, parse(den)?)?
        }
        None => parse_decimal(value)?,
    };
    AugmentationSpec::scale(factor.num as u64, factor.den as u64)
}

/// Parses a comma-separated list. Identity always comes first: it is
/// prepended when absent and moved to the front when listed elsewhere.
pub fn parse_spec_list(text: &str) -> Result<Vec<AugmentationSpec>> {
    let mut specs = vec![AugmentationSpec::Identity];
    for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let spec = parse_spec(token)?;
        if spec != AugmentationSpec::Identity {
            specs.push(spec);
        }
    }
    Ok(specs)
}

pub fn format_spec_list(specs: &[AugmentationSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

/// A consistency set must be non-empty and start with the identity.
pub fn validate_spec_list(specs: &[AugmentationSpec]) -> Result<()> {
    match specs.first() {
        Some(AugmentationSpec::Identity) => Ok(()),
        Some(other) => Err(Error::Config(format!(
            "augmentation list must start with identity, starts with {other}"
        ))),
        None => Err(Error::Config("augmentation list is empty".into())),
    }
}
