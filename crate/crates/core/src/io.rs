//! Binary containers for matrices and labels, plus the feature bundles built
//! from them.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! EMB1  magic "EMB1" | u32 rows | u32 cols | rows*cols f32, row-major
//! LBL1  magic "LBL1" | u32 n    | u32 classes | n u32 label indices
//! ```
//!
//! Loaders reject trailing bytes as well as short payloads.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::index_class_ids;
use crate::tensor::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"EMB1";
pub const LABELS_MAGIC: &[u8; 4] = b"LBL1";

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, checked_u32(s.len(), "string length")?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn checked_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Appends an EMB1 record for `m`.
pub fn encode_matrix(m: &Matrix, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MATRIX_MAGIC);
    put_u32(out, checked_u32(m.rows(), "row count")?);
    put_u32(out, checked_u32(m.cols(), "column count")?);
    out.reserve(m.as_slice().len() * 4);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub(crate) fn decode_matrix(r: &mut ByteReader<'_>) -> Result<Matrix> {
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let data = r.f32s(n, "matrix payload")?;
    let m = Matrix::from_vec(rows, cols, data)?;
    if let Some(row) = m.first_non_finite_row() {
        return Err(Error::NonFiniteData(format!("matrix row {row}")));
    }
    Ok(m)
}

pub fn matrix_to_bytes(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + m.as_slice().len() * 4);
    encode_matrix(m, &mut out)?;
    Ok(out)
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    let m = decode_matrix(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &matrix_to_bytes(m)?)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    matrix_from_bytes(&read_file(path.as_ref())?)
}

/// Dense label indices together with the size of their class namespace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabelSet {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as u32,
                classes: num_classes as u32,
            });
        }
        Ok(LabelSet {
            labels,
            num_classes,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.labels.len() * 4);
        out.extend_from_slice(LABELS_MAGIC);
        put_u32(&mut out, checked_u32(self.labels.len(), "label count")?);
        put_u32(&mut out, checked_u32(self.num_classes, "class count")?);
        for &l in &self.labels {
            put_u32(&mut out, checked_u32(l, "label")?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(LABELS_MAGIC)?;
        let n = r.u32("label count")? as usize;
        let classes = r.u32("class count")?;
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("label count overflows".into()))?,
            "label payload",
        )?;
        r.finish()?;
        let mut labels = Vec::with_capacity(n);
        for (index, c) in payload.chunks_exact(4).enumerate() {
            let label = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    classes,
                });
            }
            labels.push(label as usize);
        }
        Ok(LabelSet {
            labels,
            num_classes: classes as usize,
        })
    }
}

pub fn save_labels(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &labels.to_bytes()?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    LabelSet::from_bytes(&read_file(path.as_ref())?)
}

/// Reads a class-id sidecar: one UTF-8 id per line.
pub fn load_class_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn save_class_ids(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        if id.contains('\n') {
            return Err(Error::Format(format!("class id {id:?} contains a newline")));
        }
        text.push_str(id);
        text.push('\n');
    }
    write_file(path.as_ref(), text.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
}

/// Precomputed backbone features with their labels.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_ids: Vec<String>,
    pub split: SplitTag,
}

impl FeatureBundle {
    pub fn new(features: Matrix, labels: LabelSet, split: SplitTag) -> Result<Self> {
        let class_ids = index_class_ids(labels.num_classes);
        Self::with_class_ids(features, labels.labels, class_ids, split)
    }

    pub fn with_class_ids(
        features: Matrix,
        labels: Vec<usize>,
        class_ids: Vec<String>,
        split: SplitTag,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Format("feature bundle has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let labels = LabelSet::new(labels, class_ids.len())?;
        if split == SplitTag::Train {
            let counts = class_counts(&labels.labels, class_ids.len());
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(Error::InvariantViolation(format!(
                    "training class {} has no samples",
                    class_ids[c]
                )));
            }
        }
        Ok(FeatureBundle {
            features,
            labels: labels.labels,
            class_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn load_bundle(
    features: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: SplitTag,
) -> Result<FeatureBundle> {
    FeatureBundle::new(load_matrix(features)?, load_labels(labels)?, split)
}

pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BundleWarning {
    /// The class has fewer than `k` samples; the sampler draws it with replacement.
    ReplacementSampling {
        class: String,
        count: usize,
        k: usize,
    },
    ZeroRow {
        row: usize,
    },
}

impl fmt::Display for BundleWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BundleWarning::ReplacementSampling { class, count, k } => write!(
                f,
                "class {class} has {count} samples (< k = {k}); replacement sampling"
            ),
            BundleWarning::ZeroRow { row } => write!(f, "feature row {row} is all zeros"),
        }
    }
}

/// Checks a bundle for conditions the trainer can live with (warnings) and
/// ones it cannot (non-finite rows).
pub fn validate_bundle(bundle: &FeatureBundle, k: usize) -> Result<Vec<BundleWarning>> {
    if let Some(row) = bundle.features.first_non_finite_row() {
        return Err(Error::NonFiniteData(format!("feature row {row}")));
    }
    let mut warnings = Vec::new();
    for (c, &count) in class_counts(&bundle.labels, bundle.num_classes())
        .iter()
        .enumerate()
    {
        if count > 0 && count < k {
            warnings.push(BundleWarning::ReplacementSampling {
                class: bundle.class_ids[c].clone(),
                count,
                k,
            });
        }
    }
    for (row, r) in bundle.features.iter_rows().enumerate() {
        if r.iter().all(|&v| v == 0.0) {
            warnings.push(BundleWarning::ZeroRow { row });
        }
    }
    Ok(warnings)
}

/// Query and gallery bundles over one class namespace.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub query: FeatureBundle,
    pub gallery: FeatureBundle,
}

impl EvalSplit {
    pub fn new(query: FeatureBundle, gallery: FeatureBundle) -> Result<Self> {
        if query.class_ids != gallery.class_ids {
            return Err(Error::DimMismatch(format!(
                "query has {} classes, gallery has {}",
                query.num_classes(),
                gallery.num_classes()
            )));
        }
        if query.feature_dim() != gallery.feature_dim() {
            return Err(Error::DimMismatch(format!(
                "query features are {}-d, gallery features are {}-d",
                query.feature_dim(),
                gallery.feature_dim()
            )));
        }
        Ok(EvalSplit { query, gallery })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m23() -> Matrix {
        Matrix::from_rows(&[[1.0f32, -2.5, 3.0], [0.0, 1e-30, -7.25]]).unwrap()
    }

    #[test]
    fn matrix_file_size_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb");
        save_matrix(&m23(), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 12 + 24);
        assert_eq!(load_matrix(&path).unwrap(), m23());
    }

    #[test]
    fn matrix_rejects_bad_input() {
        let mut bytes = Vec::new();
        encode_matrix(&m23(), &mut bytes).unwrap();
        assert!(matches!(
            matrix_from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(matrix_from_bytes(&long), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(matrix_from_bytes(&magic), Err(Error::Format(_))));
        let mut nan = bytes.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            matrix_from_bytes(&nan),
            Err(Error::NonFiniteData(_))
        ));
    }

    #[test]
    fn labels_examples() {
        let ok = LabelSet::new(vec![0, 1, 0], 2).unwrap();
        assert_eq!(LabelSet::from_bytes(&ok.to_bytes().unwrap()).unwrap(), ok);

        let mut bad = ok.to_bytes().unwrap();
        bad[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            LabelSet::from_bytes(&bad),
            Err(Error::LabelOutOfRange {
                label: 5,
                classes: 2,
                ..
            })
        ));

        let mut empty = Vec::new();
        empty.extend_from_slice(LABELS_MAGIC);
        put_u32(&mut empty, 1);
        put_u32(&mut empty, 2);
        assert!(matches!(
            LabelSet::from_bytes(&empty),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bundle_validation() {
        let feats =
            Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]]).unwrap();
        let clean = FeatureBundle::new(
            feats.clone(),
            LabelSet::new(vec![0, 0, 1, 1], 2).unwrap(),
            SplitTag::Train,
        )
        .unwrap();
        assert!(validate_bundle(&clean, 2).unwrap().is_empty());

        let w = validate_bundle(&clean, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w[0].to_string().contains("replacement sampling"));

        let mut zeroed = clean.clone();
        zeroed.features.row_mut(1).fill(0.0);
        assert_eq!(
            validate_bundle(&zeroed, 2).unwrap(),
            vec![BundleWarning::ZeroRow { row: 1 }]
        );

        let mut nan = clean.clone();
        nan.features.set(2, 0, f32::NAN);
        assert!(matches!(
            validate_bundle(&nan, 2),
            Err(Error::NonFiniteData(_))
        ));

        let missing = FeatureBundle::new(
            feats.clone(),
            LabelSet::new(vec![0, 0, 0, 0], 2).unwrap(),
            SplitTag::Train,
        );
        assert!(matches!(missing, Err(Error::InvariantViolation(_))));
        // evaluation splits may omit classes
        FeatureBundle::new(
            feats,
            LabelSet::new(vec![0, 0, 0, 0], 2).unwrap(),
            SplitTag::Gallery,
        )
        .unwrap();
    }

    #[test]
    fn class_id_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ids.txt");
        let ids = vec!["dress-01".to_string(), "größe".to_string(), "".to_string()];
        save_class_ids(&ids, &path).unwrap();
        assert_eq!(load_class_ids(&path).unwrap(), ids);
        assert!(save_class_ids(&["a\nb".to_string()], &path).is_err());
    }
}
