//! Synthetic zero-label segmentation benchmarks.
//!
//! Every class gets a random unit word embedding `w_c` and a pixel prototype
//! `Φ* w_c`, where `Φ*` is one hidden linear map shared by all classes. Images
//! are a background field with shapes painted on top; pixels are prototype
//! plus Gaussian noise. Since prototypes are linear in the embeddings, a
//! linear backbone equal to the pseudo-inverse of `Φ*` segments every class,
//! seen or unseen, which makes zero-shot transfer achievable by construction.

mod io;

pub use io::{load_dataset, load_feat, load_pgm, save_dataset, save_feat, save_pgm, LoadOptions, DATASET_FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::label_space::{BackgroundMode, ClassId, EmbeddingTable, LabelMask, LabelSpace, UNLABELED};
use crate::model::{BackboneParams, Dense};

const MAP_RETRIES: usize = 100;
const EMBEDDING_RETRIES: usize = 10_000;
const PLACEMENT_RETRIES: u64 = 100;
/// Largest accepted condition number of the hidden map.
const MAX_CONDITION: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKinds {
    Rect,
    Blob,
    Both,
}

impl fmt::Display for ShapeKinds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKinds::Rect => "rect",
            ShapeKinds::Blob => "blob",
            ShapeKinds::Both => "rect+blob",
        })
    }
}

impl FromStr for ShapeKinds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rect" => Ok(ShapeKinds::Rect),
            "blob" => Ok(ShapeKinds::Blob),
            "rect+blob" | "blob+rect" => Ok(ShapeKinds::Both),
            other => Err(Error::Parse(format!("unknown shape kinds `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Seen classes, including the background class when it is seen.
    pub n_seen: usize,
    pub n_unseen: usize,
    pub noise: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub shape_kinds: ShapeKinds,
    /// Probability that a training image contains an unseen region.
    pub cooccurrence: f64,
    pub train_size: usize,
    pub eval_size: usize,
    /// Background pixels carry seen id 1 instead of 0.
    pub background_seen: bool,
    pub min_class_images: usize,
    /// Upper bound on the cosine between any two word embeddings.
    pub max_cosine: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 8,
            embed_dim: 8,
            n_seen: 6,
            n_unseen: 3,
            noise: 0.5,
            shapes_min: 2,
            shapes_max: 4,
            shape_kinds: ShapeKinds::Both,
            cooccurrence: 0.7,
            train_size: 200,
            eval_size: 50,
            background_seen: true,
            min_class_images: 1,
            max_cosine: 0.8,
            seed: 0,
        }
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value `{value}` for `{key}`")))
}

impl GeneratorConfig {
    pub const KEYS: &'static [&'static str] = &[
        "height",
        "width",
        "in_channels",
        "embed_dim",
        "n_seen",
        "n_unseen",
        "noise",
        "shapes_min",
        "shapes_max",
        "shape_kinds",
        "cooccurrence",
        "train_size",
        "eval_size",
        "background",
        "min_class_images",
        "max_cosine",
        "seed",
    ];

    /// Sets one field by its config key. Returns `Ok(false)` for keys that
    /// are not generator keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "n_seen" => self.n_seen = parse_value(key, value)?,
            "n_unseen" => self.n_unseen = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "shapes_min" => self.shapes_min = parse_value(key, value)?,
            "shapes_max" => self.shapes_max = parse_value(key, value)?,
            "shape_kinds" => self.shape_kinds = value.parse()?,
            "cooccurrence" => self.cooccurrence = parse_value(key, value)?,
            "train_size" => self.train_size = parse_value(key, value)?,
            "eval_size" => self.eval_size = parse_value(key, value)?,
            "background" => {
                self.background_seen = match value.trim() {
                    "seen" => true,
                    "ignored" => false,
                    other => {
                        return Err(Error::Parse(format!(
                            "background must be `ignored` or `seen`, got `{other}`"
                        )))
                    }
                }
            }
            "min_class_images" => self.min_class_images = parse_value(key, value)?,
            "max_cosine" => self.max_cosine = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)`; floats use round-trip formatting.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("n_seen", self.n_seen.to_string()),
            ("n_unseen", self.n_unseen.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("shapes_min", self.shapes_min.to_string()),
            ("shapes_max", self.shapes_max.to_string()),
            ("shape_kinds", self.shape_kinds.to_string()),
            ("cooccurrence", format!("{:?}", self.cooccurrence)),
            ("train_size", self.train_size.to_string()),
            ("eval_size", self.eval_size.to_string()),
            (
                "background",
                if self.background_seen { "seen" } else { "ignored" }.to_string(),
            ),
            ("min_class_images", self.min_class_images.to_string()),
            ("max_cosine", format!("{:?}", self.max_cosine)),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("n_seen", self.n_seen),
            ("n_unseen", self.n_unseen),
            ("shapes_min", self.shapes_min),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{key}` must be positive")));
        }
        if self.shapes_max < self.shapes_min {
            return Err(Error::Config("`shapes_max` is below `shapes_min`".into()));
        }
        if self.background_seen && self.n_seen < 2 {
            return Err(Error::Config(
                "a seen background needs at least one other seen class".into(),
            ));
        }
        if self.train_size + self.eval_size == 0 {
            return Err(Error::Config("dataset has no images".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.cooccurrence) {
            return Err(Error::Config(format!(
                "cooccurrence {} must be in [0, 1]",
                self.cooccurrence
            )));
        }
        if !(self.max_cosine > -1.0 && self.max_cosine < 1.0) {
            return Err(Error::Config(format!(
                "max_cosine {} must be in (-1, 1)",
                self.max_cosine
            )));
        }
        self.label_space().map(|_| ())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::dense(self.n_seen, self.n_unseen, self.background_seen)
    }
}

/// The hidden map `Φ*`, `in_channels x embed_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl HiddenMap {
    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Ratio of largest to smallest singular value (infinite when rank
    /// deficient).
    pub fn condition(&self) -> f64 {
        let sv = self.matrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Single linear layer `Φ*⁺`, mapping pixels back to embedding space.
    pub fn oracle_params(&self) -> Result<BackboneParams> {
        let pinv = self
            .matrix()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))?;
        let mut weights = Vec::with_capacity(self.rows * self.cols);
        for r in 0..pinv.nrows() {
            weights.extend(pinv.row(r).iter());
        }
        let layer = Dense {
            out_dim: self.cols,
            in_dim: self.rows,
            weights,
            bias: vec![0.0; self.cols],
        };
        BackboneParams::new(self.rows, 1, vec![layer])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position in the dataset; with the dataset seed this fixes the
    /// sample's random stream.
    pub index: usize,
    pub image: Image,
    /// Ground truth with unseen ids replaced by 0.
    pub train_mask: LabelMask,
    /// Full ground truth. Absent when loaded for training only.
    pub hidden_gt: Option<LabelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub space: LabelSpace,
    pub table: EmbeddingTable,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub hidden_map: Option<HiddenMap>,
}

fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_embeddings(rng: &mut impl Rng, count: usize, dim: usize, max_cosine: f64) -> Result<Vec<Vec<f64>>> {
    for _ in 0..EMBEDDING_RETRIES {
        let vs: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let v = normal_vec(rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let separated = (0..count).all(|i| {
            (i + 1..count).all(|j| vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum::<f64>() <= max_cosine)
        });
        if separated {
            return Ok(vs);
        }
    }
    Err(Error::Config(format!(
        "could not draw {count} embeddings in {dim} dimensions with cosine <= {max_cosine}"
    )))
}

fn hidden_map(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<HiddenMap> {
    for _ in 0..MAP_RETRIES {
        let map = HiddenMap {
            rows,
            cols,
            data: normal_vec(rng, rows * cols),
        };
        if map.condition() <= MAX_CONDITION {
            return Ok(map);
        }
    }
    Err(Error::Numeric(format!(
        "no well-conditioned {rows}x{cols} hidden map in {MAP_RETRIES} draws"
    )))
}

/// Random stream for one purpose within a dataset.
fn stream(seed: u64, split: u64, index: u64, attempt: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (chunk, v) in bytes.chunks_exact_mut(8).zip([seed, split, index, attempt]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

const SPLIT_GLOBAL: u64 = 0;
const SPLIT_TRAIN: u64 = 1;
const SPLIT_EVAL: u64 = 2;

struct Painter<'a> {
    config: &'a GeneratorConfig,
    prototypes: Vec<(ClassId, Vec<f64>)>,
    background: Vec<f64>,
    background_id: ClassId,
}

impl Painter<'_> {
    fn prototype(&self, id: ClassId) -> &[f64] {
        if id == self.background_id {
            return &self.background;
        }
        &self.prototypes.iter().find(|(c, _)| *c == id).expect("class has a prototype").1
    }

    fn paint_shape(&self, rng: &mut ChaCha8Rng, gt: &mut LabelMask, id: ClassId) {
        let (h, w) = (self.config.height, self.config.width);
        let side = h.min(w);
        let lo = (side / 6).max(2).min(side);
        let hi = (side / 2).max(lo);
        let blob = match self.config.shape_kinds {
            ShapeKinds::Rect => false,
            ShapeKinds::Blob => true,
            ShapeKinds::Both => rng.gen_bool(0.5),
        };
        if blob {
            let ry = rng.gen_range(lo..=hi) as f64 / 2.0;
            let rx = rng.gen_range(lo..=hi) as f64 / 2.0;
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let amp = rng.gen_range(0.0..0.3);
            let freq = rng.gen_range(2..=5) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for n in 0..h {
                for m in 0..w {
                    let dy = n as f64 + 0.5 - cy;
                    let dx = m as f64 + 0.5 - cx;
                    let r = 1.0 + amp * (freq * dy.atan2(dx) + phase).sin();
                    if (dy / ry).powi(2) + (dx / rx).powi(2) <= r * r {
                        gt.set(n, m, id);
                    }
                }
            }
        } else {
            let sh = rng.gen_range(lo..=hi).min(h);
            let sw = rng.gen_range(lo..=hi).min(w);
            let top = rng.gen_range(0..=h - sh);
            let left = rng.gen_range(0..=w - sw);
            for n in top..top + sh {
                for m in left..left + sw {
                    gt.set(n, m, id);
                }
            }
        }
    }

    /// Full ground truth for one image. `required` classes are painted last,
    /// in order, so at least their final shape stays visible.
    fn layout(&self, rng: &mut ChaCha8Rng, pool: &[ClassId], required: &[ClassId]) -> LabelMask {
        let c = self.config;
        let mut gt = LabelMask::filled(c.height, c.width, self.background_id);
        let count = rng.gen_range(c.shapes_min..=c.shapes_max).max(required.len());
        let mut classes: Vec<ClassId> = (0..count - required.len())
            .map(|_| *pool.choose(rng).expect("non-empty class pool"))
            .collect();
        classes.extend_from_slice(required);
        for id in classes {
            self.paint_shape(rng, &mut gt, id);
        }
        gt
    }

    fn render(&self, rng: &mut ChaCha8Rng, gt: &LabelMask) -> Result<Image> {
        let c = self.config;
        let noise = Normal::new(0.0, c.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut image = Image::zeros(c.in_channels, c.height, c.width);
        for n in 0..c.height {
            for m in 0..c.width {
                let proto = self.prototype(gt.get(n, m));
                for (v, p) in image.pixel_mut(n, m).iter_mut().zip(proto) {
                    // stored as 32-bit floats on disk
                    *v = (p + noise.sample(rng)) as f32 as f64;
                }
            }
        }
        Ok(image)
    }
}

fn redact(gt: &LabelMask, space: &LabelSpace) -> LabelMask {
    let mut mask = gt.clone();
    for v in mask.as_mut_slice() {
        if space.is_unseen(*v) {
            *v = UNLABELED;
        }
    }
    mask
}

/// Generates a dataset, its embedding table and the hidden map.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let space = config.label_space()?;
    let mut global = stream(config.seed, SPLIT_GLOBAL, 0, 0);
    let ids = space.all().to_vec();
    let embeddings = unit_embeddings(&mut global, ids.len(), config.embed_dim, config.max_cosine)?;
    let map = hidden_map(&mut global, config.in_channels, config.embed_dim)?;
    let table = EmbeddingTable::new(config.embed_dim, ids.iter().copied().zip(embeddings.iter().cloned()).collect())?;

    let background_id = match space.background() {
        BackgroundMode::SeenClass(id) => id,
        BackgroundMode::Ignored => UNLABELED,
    };
    let background = if background_id == UNLABELED {
        normal_vec(&mut global, config.in_channels)
    } else {
        map.apply(table.get(background_id).expect("background embedding"))
    };
    let painter = Painter {
        config,
        prototypes: ids.iter().zip(&embeddings).map(|(&id, w)| (id, map.apply(w))).collect(),
        background,
        background_id,
    };

    let seen_fg: Vec<ClassId> = space.seen().iter().copied().filter(|&id| id != background_id).collect();
    let unseen = space.unseen().to_vec();
    let mut train = Vec::with_capacity(config.train_size);
    let mut eval = Vec::with_capacity(config.eval_size);
    // Round-robin required classes keep every class represented.
    let (mut next_seen, mut next_unseen) = (0usize, 0usize);
    for (split, size) in [(SPLIT_TRAIN, config.train_size), (SPLIT_EVAL, config.eval_size)] {
        let mut flags = stream(config.seed, split, u64::MAX, 0);
        for i in 0..size {
            let with_unseen = split == SPLIT_EVAL || flags.gen_bool(config.cooccurrence);
            let mut required = Vec::new();
            let mut pool = seen_fg.clone();
            if !seen_fg.is_empty() {
                required.push(seen_fg[next_seen % seen_fg.len()]);
                next_seen += 1;
            }
            if with_unseen {
                required.push(unseen[next_unseen % unseen.len()]);
                next_unseen += 1;
                pool.extend_from_slice(&unseen);
            }
            let mut placed = None;
            for attempt in 0..PLACEMENT_RETRIES {
                let mut rng = stream(config.seed, split, i as u64, attempt);
                let gt = painter.layout(&mut rng, &pool, &required);
                if required.iter().all(|id| gt.as_slice().contains(id)) {
                    placed = Some((gt, rng));
                    break;
                }
            }
            let (gt, mut rng) = placed.ok_or_else(|| {
                Error::Config(format!("could not place the required classes in image {i}"))
            })?;
            let image = painter.render(&mut rng, &gt)?;
            let index = if split == SPLIT_TRAIN { i } else { config.train_size + i };
            let sample = Sample {
                index,
                image,
                train_mask: redact(&gt, &space),
                hidden_gt: Some(gt),
            };
            if split == SPLIT_TRAIN {
                train.push(sample);
            } else {
                eval.push(sample);
            }
        }
    }

    let dataset = Dataset {
        config: config.clone(),
        space,
        table,
        train,
        eval,
        hidden_map: Some(map),
    };
    dataset.check_class_balance()?;
    Ok(dataset)
}

impl Dataset {
    /// Number of images (over both splits) whose ground truth contains each
    /// class of the label space, in `space.all()` order.
    pub fn class_image_counts(&self) -> Vec<(ClassId, usize)> {
        self.space
            .all()
            .iter()
            .map(|&id| {
                let count = self
                    .train
                    .iter()
                    .chain(&self.eval)
                    .filter(|s| s.hidden_gt.as_ref().is_some_and(|gt| gt.as_slice().contains(&id)))
                    .count();
                (id, count)
            })
            .collect()
    }

    fn check_class_balance(&self) -> Result<()> {
        let min = self.config.min_class_images;
        match self.class_image_counts().into_iter().find(|&(_, n)| n < min) {
            Some((id, n)) => Err(Error::Config(format!(
                "class {id} appears in {n} images, fewer than min_class_images = {min}"
            ))),
            None => Ok(()),
        }
    }
}
