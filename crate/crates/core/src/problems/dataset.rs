//! Sparse labeled datasets, the libsvm text format, the IDX format and
//! synthetic generators standing in for the public benchmark sets.

use std::io::{BufRead, Read};
use std::path::PathBuf;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::Rng;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "BILEVEL_DATA_DIR";

/// Dataset cache root: `$BILEVEL_DATA_DIR`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Row-compressed sparse features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    labels: Vec<f64>,
    num_features: usize,
}

/// Borrowed view of one row.
#[derive(Debug, Clone, Copy)]
pub struct SparseRow<'a> {
    pub indices: &'a [usize],
    pub values: &'a [f64],
}

impl SparseRow<'_> {
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(self.values)
            .map(|(&k, &val)| val * w[k])
            .sum()
    }

    /// `out += a * row`
    pub fn axpy(&self, a: f64, out: &mut [f64]) {
        for (&k, &val) in self.indices.iter().zip(self.values) {
            out[k] += a * val;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        linalg::norm_sq(self.values)
    }
}

impl SparseDataset {
    pub fn empty(num_features: usize) -> Self {
        Self {
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
            num_features,
        }
    }

    /// Appends a row given as `(0-based index, value)` pairs with strictly
    /// increasing indices.
    pub fn push_row(&mut self, entries: &[(usize, f64)], label: f64) -> Result<()> {
        let mut prev: Option<usize> = None;
        for &(k, val) in entries {
            if prev.is_some_and(|p| k <= p) {
                return Err(invalid(format!("column indices not strictly increasing at {k}")));
            }
            if k >= self.num_features {
                return Err(invalid(format!(
                    "column index {k} out of range for {} features",
                    self.num_features
                )));
            }
            prev = Some(k);
            self.indices.push(k);
            self.values.push(val);
        }
        self.indptr.push(self.indices.len());
        self.labels.push(label);
        Ok(())
    }

    pub fn from_dense(rows: &[Vec<f64>], labels: &[f64]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(invalid("row and label counts differ"));
        }
        let num_features = rows.first().map_or(0, Vec::len);
        let mut ds = Self::empty(num_features);
        for (row, &label) in rows.iter().zip(labels) {
            if row.len() != num_features {
                return Err(invalid("ragged dense rows"));
            }
            let entries: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(k, &v)| (k, v))
                .collect();
            ds.push_row(&entries, label)?;
        }
        Ok(ds)
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let r = self.indptr[i]..self.indptr[i + 1];
        SparseRow {
            indices: &self.indices[r.clone()],
            values: &self.values[r],
        }
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.num_rows() {
            return Err(invalid("label count does not match row count"));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Widens the feature space (e.g. to align train and validation files).
    pub fn with_num_features(mut self, num_features: usize) -> Result<Self> {
        if num_features < self.num_features {
            return Err(invalid("cannot shrink the feature space"));
        }
        self.num_features = num_features;
        Ok(self)
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        self.select(range)
    }

    pub fn select(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::empty(self.num_features);
        for i in rows {
            let row = self.row(i);
            out.indices.extend_from_slice(row.indices);
            out.values.extend_from_slice(row.values);
            out.indptr.push(out.indices.len());
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Labels as class indices in `0..num_classes`.
    pub fn class_labels(&self, num_classes: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if y.fract() == 0.0 && y >= 0.0 && (y as usize) < num_classes {
                    Ok(y as usize)
                } else {
                    Err(invalid(format!("row {i}: label {y} is not a class in 0..{num_classes}")))
                }
            })
            .collect()
    }

    /// Feature data as bytes plus labels, for fingerprints.
    pub(crate) fn hash_into(&self, hasher: &mut impl sha2::Digest) {
        hasher.update((self.num_rows() as u64).to_le_bytes());
        hasher.update((self.num_features as u64).to_le_bytes());
        for &p in &self.indptr {
            hasher.update((p as u64).to_le_bytes());
        }
        for &k in &self.indices {
            hasher.update((k as u64).to_le_bytes());
        }
        for v in self.values.iter().chain(&self.labels) {
            hasher.update(v.to_le_bytes());
        }
    }

    /// libsvm text: one `label idx:value ...` line per row, 1-based indices.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.num_rows() {
            out.push_str(&self.labels[i].to_string());
            let row = self.row(i);
            for (&k, &v) in row.indices.iter().zip(row.values) {
                out.push(' ');
                out.push_str(&(k + 1).to_string());
                out.push(':');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Parses libsvm text. Blank lines and `#` comments are skipped; indices are
/// 1-based and must be strictly ascending within a line. The feature count is
/// the largest index seen.
pub fn parse_libsvm(reader: impl BufRead) -> Result<SparseDataset> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut num_features = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(perr(format!("non-finite label {label_tok:?}")));
        }
        let mut entries = Vec::new();
        let mut prev = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("feature token {tok:?} lacks ':'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| perr(format!("bad feature index in {tok:?}")))?;
            if idx == 0 {
                return Err(perr(format!("feature index 0 in {tok:?}; indices are 1-based")));
            }
            if idx <= prev {
                return Err(perr(format!("feature index {idx} not ascending (after {prev})")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| perr(format!("bad feature value in {tok:?}")))?;
            if !val.is_finite() {
                return Err(perr(format!("non-finite feature value in {tok:?}")));
            }
            prev = idx;
            entries.push((idx - 1, val));
        }
        num_features = num_features.max(prev);
        rows.push((label, entries));
    }
    let mut ds = SparseDataset::empty(num_features);
    for (label, entries) in rows {
        ds.push_row(&entries, label)?;
    }
    Ok(ds)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image file: returns `(rows, cols, pixels per image)`.
pub fn read_idx_images(mut reader: impl Read) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32_be(&mut reader)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(invalid(format!("IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32_be(&mut reader)? as usize;
    let rows = read_u32_be(&mut reader)? as usize;
    let cols = read_u32_be(&mut reader)? as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut px = vec![0u8; rows * cols];
        reader.read_exact(&mut px)?;
        images.push(px);
    }
    Ok((rows, cols, images))
}

pub fn read_idx_labels(mut reader: impl Read) -> Result<Vec<u8>> {
    let magic = read_u32_be(&mut reader)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(invalid(format!("IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = read_u32_be(&mut reader)? as usize;
    let mut labels = vec![0u8; count];
    reader.read_exact(&mut labels)?;
    Ok(labels)
}

/// Images scaled to `[0, 1]` as sparse rows with class labels.
pub fn idx_to_dataset(images: &[Vec<u8>], labels: &[u8]) -> Result<SparseDataset> {
    if images.len() != labels.len() {
        return Err(invalid("image and label counts differ"));
    }
    let num_features = images.first().map_or(0, Vec::len);
    let mut ds = SparseDataset::empty(num_features);
    for (px, &y) in images.iter().zip(labels) {
        let entries: Vec<(usize, f64)> = px
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(k, &b)| (k, f64::from(b) / 255.0))
            .collect();
        ds.push_row(&entries, f64::from(y))?;
    }
    Ok(ds)
}

/// Binary ±1 classification data: each feature is present with probability
/// `density`, labels follow a logistic model around a Gaussian weight vector.
pub fn synthetic_binary(rng: &mut Rng, rows: usize, features: usize, density: f64) -> SparseDataset {
    let w: Vec<f64> = (0..features).map(|_| StandardNormal.sample(rng)).collect();
    let mut ds = SparseDataset::empty(features);
    for _ in 0..rows {
        let mut entries = Vec::new();
        for k in 0..features {
            if rng.random::<f64>() < density {
                let val: f64 = StandardNormal.sample(rng);
                entries.push((k, val));
            }
        }
        let margin: f64 = entries.iter().map(|&(k, v)| w[k] * v).sum();
        let prob = 1.0 / (1.0 + (-margin).exp());
        let label = if rng.random::<f64>() < prob { 1.0 } else { -1.0 };
        ds.push_row(&entries, label).expect("generated row is well formed");
    }
    ds
}

/// Class centers for [`synthetic_multiclass`]: `classes × features`, entries
/// `N(0, separation²)`.
pub fn class_centers(rng: &mut Rng, classes: usize, features: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            (0..features)
                .map(|_| separation * crate::rng::normal(rng))
                .collect()
        })
        .collect()
}

/// Gaussian mixture classification data with balanced random classes:
/// `d = center[y] + N(0, I)`.
pub fn synthetic_multiclass(rng: &mut Rng, centers: &[Vec<f64>], rows: usize) -> SparseDataset {
    let classes = centers.len();
    let features = centers[0].len();
    let mut dense = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let y = rng.random_range(0..classes);
        let row: Vec<f64> = centers[y]
            .iter()
            .map(|c| c + crate::rng::normal(rng))
            .collect();
        dense.push(row);
        labels.push(y as f64);
    }
    let mut ds = SparseDataset::from_dense(&dense, &labels).expect("generated rows are well formed");
    ds.num_features = features;
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn parses_basic_line() {
        let ds = parse_libsvm("1 1:0.5 3:-1.2\n".as_bytes()).unwrap();
        assert_eq!(ds.num_rows(), 1);
        assert_eq!(ds.label(0), 1.0);
        assert_eq!(ds.row(0).indices, &[0, 2]);
        assert_eq!(ds.row(0).values, &[0.5, -1.2]);
        assert_eq!(ds.num_features(), 3);
    }

    #[test]
    fn parses_label_only_line() {
        let ds = parse_libsvm("-1\n".as_bytes()).unwrap();
        assert_eq!(ds.label(0), -1.0);
        assert!(ds.row(0).indices.is_empty());
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let ds = parse_libsvm("# header\n\n+1 2:1 # trailing\n".as_bytes()).unwrap();
        assert_eq!(ds.num_rows(), 1);
        assert_eq!(ds.row(0).indices, &[1]);
    }

    #[test]
    fn rejects_non_ascending_with_line_number() {
        let err = parse_libsvm("1 1:1\n1 3:1 2:1\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_libsvm("1 2:1 2:3\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_malformed_tokens() {
        for bad in ["x 1:1", "1 1-1", "1 a:1", "1 1:b", "1 0:1", "1 1:nan"] {
            assert!(matches!(parse_libsvm(bad.as_bytes()), Err(Error::Parse { line: 1, .. })), "{bad}");
        }
    }

    fn arb_rows() -> impl Strategy<Value = Vec<(i8, Vec<(u8, f64)>)>> {
        prop::collection::vec(
            (
                any::<i8>(),
                prop::collection::btree_map(0u8..60, -1e6f64..1e6, 0..8)
                    .prop_map(|m| m.into_iter().collect::<Vec<_>>()),
            ),
            100,
        )
    }

    proptest! {
        #[test]
        fn libsvm_round_trip(rows in arb_rows()) {
            let mut ds = SparseDataset::empty(60);
            for (label, entries) in &rows {
                let e: Vec<(usize, f64)> = entries.iter().map(|&(k, v)| (k as usize, v)).collect();
                ds.push_row(&e, f64::from(*label)).unwrap();
            }
            let parsed = parse_libsvm(ds.to_libsvm().as_bytes()).unwrap().with_num_features(60).unwrap();
            prop_assert_eq!(parsed, ds);
        }
    }

    #[test]
    fn idx_round_trip() {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 255, 51, 0, 1, 2, 3, 4]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        let (r, c, images) = read_idx_images(img.as_slice()).unwrap();
        assert_eq!((r, c), (2, 2));
        let labels = read_idx_labels(lab.as_slice()).unwrap();
        let ds = idx_to_dataset(&images, &labels).unwrap();
        assert_eq!(ds.row(0).indices, &[1, 2]);
        assert_eq!(ds.row(0).values, &[1.0, 0.2]);
        assert_eq!(ds.labels(), &[7.0, 3.0]);
        assert!(read_idx_labels(img.as_slice()).is_err());
    }

    #[test]
    fn synthetic_binary_labels_are_signs() {
        let mut rng = stream(0, Stream::Problem);
        let ds = synthetic_binary(&mut rng, 200, 22, 0.6);
        assert!(ds.labels().iter().all(|&y| y == 1.0 || y == -1.0));
        assert!(ds.labels().iter().any(|&y| y == 1.0) && ds.labels().iter().any(|&y| y == -1.0));
        assert_eq!(ds.num_features(), 22);
    }
}
