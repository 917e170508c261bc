//! Class identifiers, the seen/unseen partition, word-embedding storage and
//! label masks.
//!
//! Identifier `0` is reserved for "unlabeled" everywhere. Masks are stored as
//! 8-bit identifiers so they map one-to-one onto binary PGM files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Class identifier. `0` means unlabeled / ignored.
pub type ClassId = u8;

/// The reserved "unlabeled" identifier.
pub const UNLABELED: ClassId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Background pixels carry id 0 and are excluded from training and metrics.
    Ignored,
    /// Background is an ordinary seen class with the given id.
    SeenClass(ClassId),
}

/// Disjoint seen and unseen class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
    background: BackgroundMode,
    all: Vec<ClassId>,
}

impl LabelSpace {
    /// Validates and builds a label space. Ids are kept in the given order.
    pub fn new(seen: Vec<ClassId>, unseen: Vec<ClassId>, background: BackgroundMode) -> Result<Self> {
        if seen.is_empty() {
            return Err(Error::LabelSpace("seen class list is empty".into()));
        }
        if unseen.is_empty() {
            return Err(Error::LabelSpace("unseen class list is empty".into()));
        }
        let mut present = [false; 256];
        for &id in seen.iter().chain(unseen.iter()) {
            if id == UNLABELED {
                return Err(Error::LabelSpace("class id 0 is reserved for unlabeled pixels".into()));
            }
            if present[id as usize] {
                let which = if seen.contains(&id) && unseen.contains(&id) {
                    "appears in both seen and unseen lists"
                } else {
                    "is listed twice"
                };
                return Err(Error::LabelSpace(format!("class id {id} {which}")));
            }
            present[id as usize] = true;
        }
        if let BackgroundMode::SeenClass(bg) = background {
            if !seen.contains(&bg) {
                return Err(Error::LabelSpace(format!(
                    "background id {bg} is not a seen class"
                )));
            }
        }
        let mut all: Vec<ClassId> = seen.iter().chain(unseen.iter()).copied().collect();
        all.sort_unstable();
        Ok(Self {
            seen,
            unseen,
            background,
            all,
        })
    }

    /// Dense layout: seen ids `1..=n_seen`, unseen ids following them. When
    /// `background` is true, id 1 is the background class.
    pub fn dense(n_seen: usize, n_unseen: usize, background: bool) -> Result<Self> {
        if n_seen + n_unseen > 255 {
            return Err(Error::LabelSpace(format!(
                "{} classes do not fit in 8-bit ids",
                n_seen + n_unseen
            )));
        }
        let seen: Vec<ClassId> = (1..=n_seen).map(|i| i as ClassId).collect();
        let unseen: Vec<ClassId> = (n_seen + 1..=n_seen + n_unseen).map(|i| i as ClassId).collect();
        let mode = if background {
            BackgroundMode::SeenClass(1)
        } else {
            BackgroundMode::Ignored
        };
        Self::new(seen, unseen, mode)
    }

    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn unseen(&self) -> &[ClassId] {
        &self.unseen
    }

    /// Seen and unseen ids in ascending order.
    pub fn all(&self) -> &[ClassId] {
        &self.all
    }

    pub fn background(&self) -> BackgroundMode {
        self.background
    }

    pub fn is_seen(&self, id: ClassId) -> bool {
        self.seen.contains(&id)
    }

    pub fn is_unseen(&self, id: ClassId) -> bool {
        self.unseen.contains(&id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.all.binary_search(&id).is_ok()
    }

    pub fn max_id(&self) -> ClassId {
        *self.all.last().expect("label space is non-empty")
    }
}

/// Spec-named constructor.
pub fn build_label_space(
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
    background: BackgroundMode,
) -> Result<LabelSpace> {
    LabelSpace::new(seen, unseen, background)
}

/// Per-class word embeddings, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<ClassId>,
    data: Vec<f64>,
    index: Box<[Option<u16>; 256]>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<(ClassId, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::LabelSpace("embedding dimension must be positive".into()));
        }
        let mut index = Box::new([None; 256]);
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if id == UNLABELED {
                return Err(Error::LabelSpace("embedding given for reserved id 0".into()));
            }
            if v.len() != dim {
                return Err(Error::LabelSpace(format!(
                    "embedding for class {id} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::LabelSpace(format!(
                    "embedding for class {id} has a non-finite entry"
                )));
            }
            if index[id as usize].is_some() {
                return Err(Error::LabelSpace(format!("duplicate embedding for class {id}")));
            }
            index[id as usize] = Some(ids.len() as u16);
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Ok(Self {
            dim,
            ids,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn get(&self, id: ClassId) -> Option<&[f64]> {
        self.index[id as usize].map(|row| {
            let row = row as usize;
            &self.data[row * self.dim..(row + 1) * self.dim]
        })
    }

    /// Checks that the table holds exactly the ids of `space`.
    pub fn check_covers(&self, space: &LabelSpace) -> Result<()> {
        for &id in space.all() {
            if self.get(id).is_none() {
                return Err(Error::LabelSpace(format!("no embedding for class {id}")));
            }
        }
        if let Some(extra) = self.ids.iter().find(|id| !space.contains(**id)) {
            return Err(Error::LabelSpace(format!(
                "embedding for class {extra} which is not in the label space"
            )));
        }
        Ok(())
    }

    /// Gathers the rows of `ids` into a row-major `ids.len() x dim` matrix.
    pub fn gather(&self, ids: &[ClassId]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let row = self
                .get(id)
                .ok_or_else(|| Error::LabelSpace(format!("no embedding for class {id}")))?;
            out.extend_from_slice(row);
        }
        Ok(out)
    }

    /// Text form: one `<id> <v_1> ... <v_D>` row per class. Floats are written
    /// in shortest round-trip form so parsing reproduces them bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (row, id) in self.ids.iter().enumerate() {
            write!(out, "{id}").unwrap();
            for v in &self.data[row * self.dim..(row + 1) * self.dim] {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, space: &LabelSpace) -> Result<Self> {
        let mut rows = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id_text = fields.next().expect("non-empty line");
            let id: ClassId = id_text.parse().map_err(|_| {
                Error::Parse(format!("line {}: bad class id `{id_text}`", lineno + 1))
            })?;
            let values = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("line {}: bad number `{f}`", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!(
                    "line {}: non-finite embedding value for class {id}",
                    lineno + 1
                )));
            }
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(Error::Parse(format!(
                    "line {}: class {id} has {} values, expected {d}",
                    lineno + 1,
                    values.len()
                )));
            }
            rows.push((id, values));
        }
        let dim = dim.ok_or_else(|| Error::Parse("embedding file has no rows".into()))?;
        let table = Self::new(dim, rows)?;
        table.check_covers(space)?;
        Ok(table)
    }
}

pub fn load_embeddings(path: &Path, space: &LabelSpace) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::parse(&text, space).map_err(|e| match e {
        Error::Parse(msg) | Error::LabelSpace(msg) => Error::format(path, msg),
        other => other,
    })
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    fs::write(path, table.to_text()).map_err(|e| Error::io(path, e))
}

/// An `N x M` grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<ClassId>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask size {height}x{width} is empty")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, id: ClassId) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, UNLABELED)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, m: usize) -> ClassId {
        self.data[n * self.width + m]
    }

    pub fn set(&mut self, n: usize, m: usize, id: ClassId) {
        self.data[n * self.width + m] = id;
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Every entry is 0 or a member of the label space.
    pub fn check_in_space(&self, space: &LabelSpace) -> Result<()> {
        match self.data.iter().position(|&v| v != UNLABELED && !space.contains(v)) {
            Some(i) => Err(Error::Mask(format!(
                "pixel ({}, {}) has id {} outside the label space",
                i / self.width,
                i % self.width,
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// A training mask may only hold 0 or seen ids.
pub fn validate_training_mask(mask: &LabelMask, space: &LabelSpace) -> Result<()> {
    mask.check_in_space(space)?;
    match mask.as_slice().iter().position(|&v| space.is_unseen(v)) {
        Some(i) => Err(Error::Mask(format!(
            "training mask has unseen class {} at pixel ({}, {})",
            mask.as_slice()[i],
            i / mask.width(),
            i % mask.width()
        ))),
        None => Ok(()),
    }
}
