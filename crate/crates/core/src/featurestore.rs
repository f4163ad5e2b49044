//! Feature data model: the raw embedding table, its L2-normalized view,
//! file I/O, and a synthetic generator for desk-scale experiments.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic "PRFS" | version u32 | count u64 | dim u32 | num_classes u32 | flags u8
//! labels: count × u32
//! vectors: count × dim × f32, row-major
//! if flags == 1: num_classes × (len u32 | UTF-8 bytes)   class names
//! ```
//!
//! CSV layout: header `label,f0,...,f{D-1}`, one sample per row.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::{stream_rng, TAG_SYNTH};
use crate::MIN_VECTOR_NORM;

const MAGIC: [u8; 4] = *b"PRFS";
const VERSION: u32 = 1;

/// On-disk encodings understood by [`FeatureSet::load`] and [`FeatureSet::save`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl fmt::Display for FeatureFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureFormat::Binary => "binary",
            FeatureFormat::Csv => "csv",
        })
    }
}

impl std::str::FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(FeatureFormat::Binary),
            "csv" => Ok(FeatureFormat::Csv),
            other => Err(Error::Invalid(format!(
                "unknown feature format `{other}` (expected binary|csv)"
            ))),
        }
    }
}

/// Immutable table of D-dimensional embedding vectors with integer class
/// labels. Rows are stored raw; [`FeatureSet::normalize`] produces the
/// unit-norm view consumed by prototype and theory computations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    count: usize,
    num_classes: usize,
    vectors: Vec<f32>,
    labels: Vec<u32>,
    class_names: Option<Vec<String>>,
    class_rows: Vec<Vec<usize>>,
}

impl FeatureSet {
    /// Validates and freezes a feature table. Every class in
    /// `[0, num_classes)` must own at least one row and every value must be
    /// finite.
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        labels: Vec<u32>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dim must be at least 1".into()));
        }
        if labels.is_empty() {
            return Err(Error::Invalid("feature set needs at least one row".into()));
        }
        if num_classes == 0 {
            return Err(Error::Invalid("num_classes must be at least 1".into()));
        }
        if vectors.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} labels with dim {} require {} values, got {}",
                labels.len(),
                dim,
                labels.len() * dim,
                vectors.len()
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Shape(format!(
                    "{} class names for {} classes",
                    names.len(),
                    num_classes
                )));
            }
        }
        for (i, &v) in vectors.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value at row {} dim {}",
                    i / dim,
                    i % dim
                )));
            }
        }
        let mut class_rows = vec![Vec::new(); num_classes];
        for (row, &label) in labels.iter().enumerate() {
            let class = label as usize;
            if class >= num_classes {
                return Err(Error::Label(format!(
                    "row {row} has label {label}, outside [0, {num_classes})"
                )));
            }
            class_rows[class].push(row);
        }
        if let Some(empty) = class_rows.iter().position(|rows| rows.is_empty()) {
            return Err(Error::Data(format!("class {empty} has no rows")));
        }
        Ok(FeatureSet {
            dim,
            count: labels.len(),
            num_classes,
            vectors,
            labels,
            class_names,
            class_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row] as usize
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Row indices belonging to `class`, in insertion order.
    pub fn class_rows(&self, class: usize) -> &[usize] {
        &self.class_rows[class]
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// L2-normalizes every row into an f64 view. Rows with norm below
    /// [`MIN_VECTOR_NORM`] are rejected with the offending row index.
    pub fn normalize(&self) -> Result<NormalizedView> {
        let mut matrix = Array2::<f64>::zeros((self.count, self.dim));
        for i in 0..self.count {
            let row = self.row(i);
            let norm = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm < MIN_VECTOR_NORM {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {norm:.3e}, below {MIN_VECTOR_NORM:.0e}"
                )));
            }
            for d in 0..self.dim {
                matrix[[i, d]] = row[d] as f64 / norm;
            }
        }
        Ok(NormalizedView {
            dim: self.dim,
            count: self.count,
            num_classes: self.num_classes,
            matrix,
            labels: self.labels.clone(),
            class_rows: self.class_rows.clone(),
        })
    }

    /// Deterministic synthetic features: each class gets a mean direction
    /// drawn uniformly on the unit sphere and rows sampled from an isotropic
    /// Gaussian around it with per-dimension std `spread`.
    pub fn synth(
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> Result<FeatureSet> {
        if num_classes < 2 {
            return Err(Error::Invalid("synth needs at least 2 classes".into()));
        }
        if per_class < 2 {
            return Err(Error::Invalid(
                "synth needs at least 2 rows per class".into(),
            ));
        }
        if dim < 2 {
            return Err(Error::Invalid("synth needs dim of at least 2".into()));
        }
        if !spread.is_finite() || spread < 0.0 {
            return Err(Error::Invalid(format!(
                "spread must be finite and >= 0, got {spread}"
            )));
        }
        let mut rng = stream_rng(seed, 0, TAG_SYNTH);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        let mut means_f32: Vec<Vec<f32>> = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            // Resample on the (measure-zero) chance of a duplicate direction;
            // class means must stay pairwise distinct.
            loop {
                let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-9 {
                    continue;
                }
                let mean: Vec<f64> = g.iter().map(|v| v / norm).collect();
                let cast: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
                if means_f32.iter().all(|prev| prev != &cast) {
                    means.push(mean);
                    means_f32.push(cast);
                    break;
                }
            }
        }
        let count = num_classes * per_class;
        let mut vectors = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean.iter() {
                    let noise: f64 = rng.sample(StandardNormal);
                    vectors.push((m + spread * noise) as f32);
                }
                labels.push(class as u32);
            }
        }
        FeatureSet::new(dim, vectors, labels, num_classes, None)
    }

    pub fn save(&self, path: &Path, format: FeatureFormat) -> Result<()> {
        let bytes = match format {
            FeatureFormat::Binary => self.to_binary(),
            FeatureFormat::Csv => self.to_csv().into_bytes(),
        };
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path, format: FeatureFormat) -> Result<FeatureSet> {
        let bytes = std::fs::read(path)?;
        match format {
            FeatureFormat::Binary => Self::from_binary(&bytes),
            FeatureFormat::Csv => {
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Format("csv file is not valid UTF-8".into()))?;
                Self::from_csv(&text)
            }
        }
    }

    fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.count * (4 + self.dim * 4));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(u8::from(self.class_names.is_some()));
        for &label in &self.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        for &v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(names) = &self.class_names {
            for name in names {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
            }
        }
        out
    }

    fn from_binary(bytes: &[u8]) -> Result<FeatureSet> {
        let mut r = ByteReader::new(bytes);
        let magic = r.header(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = u32::from_le_bytes(r.header(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = u64::from_le_bytes(r.header(8, "count")?.try_into().unwrap());
        let count = usize::try_from(count)
            .map_err(|_| Error::Format(format!("count {count} does not fit in memory")))?;
        let dim = u32::from_le_bytes(r.header(4, "dim")?.try_into().unwrap()) as usize;
        let num_classes =
            u32::from_le_bytes(r.header(4, "num_classes")?.try_into().unwrap()) as usize;
        let flags = r.header(1, "flags")?[0];
        if flags > 1 {
            return Err(Error::Format(format!("unknown flags value {flags}")));
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let b = r.payload(4, "labels")?;
            labels.push(u32::from_le_bytes(b.try_into().unwrap()));
        }
        let values = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format(format!("count {count} x dim {dim} overflows")))?;
        let mut vectors = Vec::with_capacity(values);
        for i in 0..values {
            let b = r.payload(4, "vectors")?;
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value at row {} dim {}",
                    i / dim.max(1),
                    i % dim.max(1)
                )));
            }
            vectors.push(v);
        }
        let class_names = if flags == 1 {
            let mut names = Vec::with_capacity(num_classes);
            for i in 0..num_classes {
                let len =
                    u32::from_le_bytes(r.payload(4, "class name length")?.try_into().unwrap());
                let raw = r.payload(len as usize, "class name")?;
                let name = std::str::from_utf8(raw)
                    .map_err(|_| Error::Format(format!("class name {i} is not UTF-8")))?;
                names.push(name.to_string());
            }
            Some(names)
        } else {
            None
        };
        if !r.exhausted() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        FeatureSet::new(dim, vectors, labels, num_classes, class_names)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for d in 0..self.dim {
            out.push_str(&format!(",f{d}"));
        }
        out.push('\n');
        for i in 0..self.count {
            out.push_str(&self.labels[i].to_string());
            for &v in self.row(i) {
                out.push(',');
                // Display prints the shortest decimal that round-trips.
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    fn from_csv(text: &str) -> Result<FeatureSet> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("csv file is empty".into()))?;
        let fields: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if fields.first() != Some(&"label") || fields.len() < 2 {
            return Err(Error::Format(
                "csv header must be `label,f0,...,f{D-1}`".into(),
            ));
        }
        let dim = fields.len() - 1;
        for (d, name) in fields[1..].iter().enumerate() {
            if *name != format!("f{d}") {
                return Err(Error::Format(format!(
                    "csv header column {} is `{name}`, expected `f{d}`",
                    d + 1
                )));
            }
        }
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 1 {
                return Err(Error::Format(format!(
                    "csv row {} has {} fields, expected {}",
                    lineno + 2,
                    cells.len(),
                    dim + 1
                )));
            }
            let label: u32 = cells[0].parse().map_err(|_| {
                Error::Format(format!(
                    "csv row {} has bad label `{}`",
                    lineno + 2,
                    cells[0]
                ))
            })?;
            labels.push(label);
            for (d, cell) in cells[1..].iter().enumerate() {
                let v: f32 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "csv row {} column f{d} is not a float: `{cell}`",
                        lineno + 2
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite value at row {} dim {d}",
                        labels.len() - 1
                    )));
                }
                vectors.push(v);
            }
        }
        let num_classes = labels
            .iter()
            .max()
            .map(|&m| m as usize + 1)
            .ok_or_else(|| Error::Format("csv file has no data rows".into()))?;
        FeatureSet::new(dim, vectors, labels, num_classes, None)
    }
}

/// Byte cursor distinguishing header shortage (format error) from payload
/// shortage (truncation error).
struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return None;
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(slice)
    }

    fn header(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n)
            .ok_or_else(|| Error::Format(format!("file too short reading {what}")))
    }

    fn payload(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.remaining();
        self.take(n).ok_or_else(|| {
            Error::Truncation(format!(
                "{what}: need {n} more bytes, {remaining} left in file"
            ))
        })
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Row-normalized counterpart of a [`FeatureSet`]: same shape and labels,
/// every row a unit vector in f64.
#[derive(Debug, Clone)]
pub struct NormalizedView {
    dim: usize,
    count: usize,
    num_classes: usize,
    matrix: Array2<f64>,
    labels: Vec<u32>,
    class_rows: Vec<Vec<usize>>,
}

impl NormalizedView {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    pub fn class_rows(&self, class: usize) -> &[usize] {
        &self.class_rows[class]
    }

    /// Copies the given rows into a dense matrix, in order.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.matrix.row(r));
        }
        out
    }

    /// All rows of one class as a dense matrix.
    pub fn class_matrix(&self, class: usize) -> Array2<f64> {
        self.gather(&self.class_rows[class].clone())
    }
}
