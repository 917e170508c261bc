//! Dataset directory format.
//!
//! ```text
//! meta.txt          key=value: format version, split sizes, generator config
//! embeddings.txt    word embeddings
//! hidden_map.txt    the hidden map, one row per input channel
//! oracle.ckpt       pseudo-inverse parameters of the hidden map
//! img_<i>.feat      "ZLSSFEAT", u32 C_in, N, M, then f32 values, one
//!                   row-major N x M plane per channel (little-endian)
//! img_<i>.mask.pgm  training mask, binary 8-bit PGM
//! img_<i>.gt.pgm    full ground truth, same format
//! ```
//!
//! Training images come first (`0..train_size`), then evaluation images.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use super::{parse_value, Dataset, GeneratorConfig, HiddenMap, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::label_space::{load_embeddings, save_embeddings, LabelMask};
use crate::model::save_checkpoint;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const FEAT_MAGIC: &[u8; 8] = b"ZLSSFEAT";
const FEAT_HEADER: usize = 8 + 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Also read the full ground truth of training images. Evaluation
    /// images always carry theirs.
    pub train_hidden_gt: bool,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn feat_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEAT_HEADER + 4 * image.as_slice().len());
    out.extend_from_slice(FEAT_MAGIC);
    for v in [image.channels(), image.height(), image.width()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in image.to_planar() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn parse_feat(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < FEAT_HEADER {
        return Err(Error::format(
            path,
            format!("truncated header at byte {} of {FEAT_HEADER}", bytes.len()),
        ));
    }
    if &bytes[..8] != FEAT_MAGIC {
        return Err(Error::format(path, "bad magic at byte 0, not a feature file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, n, m) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(n)
        .and_then(|v| v.checked_mul(m))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(FEAT_HEADER))
        .ok_or_else(|| Error::format(path, "implausible dimensions in header"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated at byte {}, expected {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, format!("trailing data after byte {expected}")));
    }
    let planar: Vec<f64> = bytes[FEAT_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::from_planar(c, n, m, &planar).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_feat(path: &Path, image: &Image) -> Result<()> {
    write(path, feat_bytes(image))
}

pub fn load_feat(path: &Path) -> Result<Image> {
    parse_feat(&read(path)?, path)
}

pub fn save_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            mask.as_slice(),
            mask.width() as u32,
            mask.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::format(path, e.to_string()))?;
    write(path, out)
}

pub fn load_pgm(path: &Path) -> Result<LabelMask> {
    let bytes = read(path)?;
    let decoder = PnmDecoder::new(Cursor::new(&bytes)).map_err(|e| Error::format(path, e.to_string()))?;
    if decoder.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(Error::format(path, "expected a binary (P5) graymap"));
    }
    if decoder.color_type() != image::ColorType::L8 {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    let (w, h) = decoder.dimensions();
    let mut data = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    LabelMask::new(h as usize, w as usize, data).map_err(|e| Error::format(path, e.to_string()))
}

fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("img_{index}.feat")),
        dir.join(format!("img_{index}.mask.pgm")),
        dir.join(format!("img_{index}.gt.pgm")),
    )
}

fn hidden_map_text(map: &HiddenMap) -> String {
    let mut out = format!("# {} x {}\n", map.rows, map.cols);
    for row in map.data.chunks_exact(map.cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn parse_hidden_map(text: &str, path: &Path) -> Result<HiddenMap> {
    let mut rows = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("bad number `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::format(path, "ragged or empty hidden map"));
    }
    Ok(HiddenMap {
        rows: rows.len(),
        cols,
        data: rows.concat(),
    })
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = format!("# zlss dataset\nformat_version={DATASET_FORMAT_VERSION}\n");
    for (k, v) in dataset.config.pairs() {
        meta.push_str(&format!("{k}={v}\n"));
    }
    write(&dir.join("meta.txt"), meta)?;
    save_embeddings(&dir.join("embeddings.txt"), &dataset.table)?;
    if let Some(map) = &dataset.hidden_map {
        write(&dir.join("hidden_map.txt"), hidden_map_text(map))?;
        save_checkpoint(&dir.join("oracle.ckpt"), &map.oracle_params()?, None)?;
    }
    for s in dataset.train.iter().chain(&dataset.eval) {
        let (feat, mask, gt) = sample_paths(dir, s.index);
        save_feat(&feat, &s.image)?;
        save_pgm(&mask, &s.train_mask)?;
        if let Some(g) = &s.hidden_gt {
            save_pgm(&gt, g)?;
        }
    }
    Ok(())
}

fn load_meta(path: &Path) -> Result<GeneratorConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = GeneratorConfig::default();
    let mut version = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "format_version" {
            version = Some(parse_value::<u32>(k, v).map_err(|e| Error::format(path, e.to_string()))?);
        } else if !config.set(k, v).map_err(|e| Error::format(path, e.to_string()))? {
            return Err(Error::format(path, format!("unknown key `{k}`")));
        }
    }
    match version {
        Some(DATASET_FORMAT_VERSION) => Ok(config),
        Some(v) => Err(Error::format(path, format!("unsupported dataset format version {v}"))),
        None => Err(Error::format(path, "missing format_version")),
    }
}

fn load_sample(dir: &Path, index: usize, with_gt: bool, config: &GeneratorConfig) -> Result<Sample> {
    let (feat, mask, gt) = sample_paths(dir, index);
    let image = load_feat(&feat)?;
    let expected = (config.in_channels, config.height, config.width);
    if (image.channels(), image.height(), image.width()) != expected {
        return Err(Error::format(&feat, format!("shape differs from meta.txt {expected:?}")));
    }
    let train_mask = load_pgm(&mask)?;
    if train_mask.size() != image.size() {
        return Err(Error::format(&mask, "mask size differs from image size"));
    }
    let hidden_gt = if with_gt {
        let g = load_pgm(&gt)?;
        if g.size() != image.size() {
            return Err(Error::format(&gt, "ground-truth size differs from image size"));
        }
        Some(g)
    } else {
        None
    };
    Ok(Sample {
        index,
        image,
        train_mask,
        hidden_gt,
    })
}

pub fn load_dataset(dir: &Path, options: LoadOptions) -> Result<Dataset> {
    let config = load_meta(&dir.join("meta.txt"))?;
    config.validate().map_err(|e| Error::format(dir.join("meta.txt"), e.to_string()))?;
    let space = config.label_space()?;
    let table = load_embeddings(&dir.join("embeddings.txt"), &space)?;
    let map_path = dir.join("hidden_map.txt");
    let hidden_map = if map_path.exists() {
        let text = fs::read_to_string(&map_path).map_err(|e| Error::io(&map_path, e))?;
        Some(parse_hidden_map(&text, &map_path)?)
    } else {
        None
    };
    let train = (0..config.train_size)
        .map(|i| load_sample(dir, i, options.train_hidden_gt, &config))
        .collect::<Result<Vec<_>>>()?;
    let eval = (config.train_size..config.train_size + config.eval_size)
        .map(|i| load_sample(dir, i, true, &config))
        .collect::<Result<Vec<_>>>()?;
    for s in &train {
        crate::label_space::validate_training_mask(&s.train_mask, &space)?;
    }
    Ok(Dataset {
        config,
        space,
        table,
        train,
        eval,
        hidden_map,
    })
}
