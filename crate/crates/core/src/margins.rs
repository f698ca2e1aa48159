//! Class-to-class distances in the text modality, normalized to [0, 1].
//!
//! These are the `d_yz` consumed by [`crate::loss::adaptive_margin_loss`].
//! Text encoding happens upstream; this module only sees one vector per class.
//!
//! File layout (`MGN1`, little-endian):
//!
//! ```text
//! "MGN1" | u32 C | u8 metric | u8 norm_mode | C x (u32 len, UTF-8 id) | C*C f32 row-major
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader};
use crate::tensor::{self, Matrix};

pub const MARGIN_MAGIC: &[u8; 4] = b"MGN1";

const SYMMETRY_TOL: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceMetric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Fixed map from the metric's natural range onto [0, 1].
    #[default]
    Analytic,
    /// Off-diagonal minimum to 0, maximum to 1.
    MinMax,
}

impl DistanceMetric {
    fn code(self) -> u8 {
        match self {
            DistanceMetric::Cosine => 0,
            DistanceMetric::Euclidean => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DistanceMetric::Cosine),
            1 => Ok(DistanceMetric::Euclidean),
            _ => Err(Error::Format(format!("unknown metric code {c}"))),
        }
    }
}

impl NormMode {
    fn code(self) -> u8 {
        match self {
            NormMode::Analytic => 0,
            NormMode::MinMax => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(NormMode::Analytic),
            1 => Ok(NormMode::MinMax),
            _ => Err(Error::Format(format!("unknown normalization code {c}"))),
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Analytic => "analytic",
            NormMode::MinMax => "minmax",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(NormMode::Analytic),
            "minmax" => Ok(NormMode::MinMax),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    match ids.iter().find(|id| !seen.insert(id.as_str())) {
        Some(dup) => Err(Error::InvariantViolation(format!(
            "duplicate class id {dup:?}"
        ))),
        None => Ok(()),
    }
}

/// One text-modality vector per class.
#[derive(Clone, Debug)]
pub struct ClassTextEmbeddings {
    embeddings: Matrix,
    class_ids: Vec<String>,
}

impl ClassTextEmbeddings {
    pub fn new(embeddings: Matrix, class_ids: Vec<String>) -> Result<Self> {
        if embeddings.rows() != class_ids.len() {
            return Err(Error::DimMismatch(format!(
                "{} class ids for {} text embeddings",
                class_ids.len(),
                embeddings.rows()
            )));
        }
        check_unique(&class_ids)?;
        if let Some(row) = embeddings.first_non_finite_row() {
            return Err(Error::NonFiniteData(format!("text embedding row {row}")));
        }
        for row in embeddings.iter_rows() {
            let n = tensor::norm(row);
            if n < tensor::MIN_NORM {
                return Err(Error::ZeroNorm { norm: n });
            }
        }
        Ok(ClassTextEmbeddings {
            embeddings,
            class_ids,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }
}

/// Symmetric `C x C` matrix of normalized class distances, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginMatrix {
    d: Matrix,
    class_ids: Vec<String>,
    index: HashMap<String, usize>,
    metric: DistanceMetric,
    norm_mode: NormMode,
}

impl MarginMatrix {
    /// Wraps a distance matrix after checking range, diagonal and symmetry.
    pub fn from_parts(
        d: Matrix,
        class_ids: Vec<String>,
        metric: DistanceMetric,
        norm_mode: NormMode,
    ) -> Result<Self> {
        let c = class_ids.len();
        if d.shape() != (c, c) {
            return Err(Error::MarginShapeMismatch {
                rows: d.rows(),
                cols: d.cols(),
                expected: c,
            });
        }
        check_unique(&class_ids)?;
        for y in 0..c {
            if d.get(y, y) != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "diagonal entry {y} is {}",
                    d.get(y, y)
                )));
            }
            for z in 0..c {
                let v = d.get(y, z);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvariantViolation(format!(
                        "entry ({y}, {z}) = {v} outside [0, 1]"
                    )));
                }
                if (v - d.get(z, y)).abs() > SYMMETRY_TOL {
                    return Err(Error::InvariantViolation(format!(
                        "entries ({y}, {z}) and ({z}, {y}) differ"
                    )));
                }
            }
        }
        let index = class_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(MarginMatrix {
            d,
            class_ids,
            index,
            metric,
            norm_mode,
        })
    }

    pub fn distances(&self) -> &Matrix {
        &self.d
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn row(&self, index: usize) -> &[f32] {
        self.d.row(index)
    }

    /// Distances from `class_id` to every class.
    pub fn lookup_row(&self, class_id: &str) -> Result<&[f32]> {
        self.index
            .get(class_id)
            .map(|&i| self.d.row(i))
            .ok_or_else(|| Error::UnknownClass(class_id.to_owned()))
    }

    /// `(min, mean, max)` over off-diagonal entries, `None` for a single class.
    pub fn off_diagonal_stats(&self) -> Option<(f32, f32, f32)> {
        let c = self.num_classes();
        if c < 2 {
            return None;
        }
        let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for y in 0..c {
            for z in (0..c).filter(|&z| z != y) {
                let v = self.d.get(y, z);
                lo = lo.min(v);
                hi = hi.max(v);
                sum += f64::from(v);
            }
        }
        Some((lo, (sum / (c * (c - 1)) as f64) as f32, hi))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.num_classes();
        let mut out = Vec::with_capacity(10 + c * c * 4);
        out.extend_from_slice(MARGIN_MAGIC);
        io::put_u32(&mut out, io::checked_u32(c, "class count")?);
        out.push(self.metric.code());
        out.push(self.norm_mode.code());
        for id in &self.class_ids {
            io::put_string(&mut out, id)?;
        }
        for v in self.d.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MARGIN_MAGIC)?;
        let c = r.u32("class count")? as usize;
        let metric = DistanceMetric::from_code(r.u8("metric")?)?;
        let norm_mode = NormMode::from_code(r.u8("normalization")?)?;
        let mut ids = Vec::new();
        for _ in 0..c {
            ids.push(r.string("class id")?);
        }
        let n = c
            .checked_mul(c)
            .ok_or_else(|| Error::Format("class count overflows".into()))?;
        let data = r.f32s(n, "distance payload")?;
        r.finish()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("margin matrix".into()));
        }
        Self::from_parts(Matrix::from_vec(c, c, data)?, ids, metric, norm_mode)
    }
}

/// Builds the normalized distance matrix between class text embeddings.
///
/// - cosine, analytic: `(1 - cos) / 2` on unit rows
/// - euclidean, analytic: `|a - b| / 2` on unit rows
/// - min-max: cosine distance `1 - cos` (unit rows) or raw Euclidean distance,
///   mapped affinely so the off-diagonal minimum is 0 and the maximum is 1
pub fn build_margin_matrix(
    cte: &ClassTextEmbeddings,
    metric: DistanceMetric,
    norm_mode: NormMode,
) -> Result<MarginMatrix> {
    let c = cte.class_ids.len();
    let mut unit = cte.embeddings.clone();
    unit.normalize_rows()?;
    let source = match (metric, norm_mode) {
        (DistanceMetric::Euclidean, NormMode::MinMax) => &cte.embeddings,
        _ => &unit,
    };

    let mut d = Matrix::zeros(c, c);
    for y in 0..c {
        for z in y + 1..c {
            let (a, b) = (source.row(y), source.row(z));
            let raw = match metric {
                DistanceMetric::Cosine => 1.0 - tensor::dot(a, b).clamp(-1.0, 1.0),
                DistanceMetric::Euclidean => a
                    .iter()
                    .zip(b)
                    .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            let v = match norm_mode {
                NormMode::Analytic => raw / 2.0,
                NormMode::MinMax => raw,
            };
            d.set(y, z, v as f32);
        }
    }

    if norm_mode == NormMode::MinMax && c >= 2 {
        let upper = || (0..c).flat_map(|y| (y + 1..c).map(move |z| (y, z)));
        let (lo, hi) = upper().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (y, z)| {
            (lo.min(d.get(y, z)), hi.max(d.get(y, z)))
        });
        if hi <= lo {
            return Err(Error::DegenerateRange);
        }
        let span = f64::from(hi) - f64::from(lo);
        for (y, z) in upper() {
            let v = (f64::from(d.get(y, z)) - f64::from(lo)) / span;
            d.set(y, z, v as f32);
        }
    }

    for y in 0..c {
        for z in y + 1..c {
            let v = d.get(y, z).clamp(0.0, 1.0);
            d.set(y, z, v);
            d.set(z, y, v);
        }
    }
    MarginMatrix::from_parts(d, cte.class_ids.clone(), metric, norm_mode)
}

pub fn save_margin_matrix(m: &MarginMatrix, path: impl AsRef<Path>) -> Result<()> {
    io::write_file(path.as_ref(), &m.to_bytes()?)
}

pub fn load_margin_matrix(path: impl AsRef<Path>) -> Result<MarginMatrix> {
    MarginMatrix::from_bytes(&io::read_file(path.as_ref())?)
}
