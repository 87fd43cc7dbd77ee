//! Tangent-feature matrices and their on-disk formats.
//!
//! # TFS binary layout (little-endian)
//!
//! ```text
//! b"TFS1"                magic
//! u8                     dtype: 0 = f32, 1 = f64
//! u64                    N (rows)
//! u64                    K (feature dimension)
//! u8                     has_labels: 0 or 1
//! N*K values             row-major, in dtype
//! N u32                  labels, only when has_labels == 1
//! N u64                  example ids
//! ```
//!
//! # CSV layout
//!
//! One row per example. The first column is the example id; an optional
//! `label` column may follow; every remaining column is a feature. A header
//! line is recognized when its first field is `id`, and only a header can
//! declare the `label` column.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TFS_MAGIC: [u8; 4] = *b"TFS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreFormat {
    Tfs,
    Csv,
}

impl StoreFormat {
    /// Guesses the format from a file extension, defaulting to TFS.
    pub fn from_path(path: &Path) -> StoreFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => StoreFormat::Csv,
            _ => StoreFormat::Tfs,
        }
    }
}

/// N x K feature matrix, one row per training example.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    k: usize,
    rows: Vec<f64>,
    ids: Vec<u64>,
    labels: Option<Vec<u32>>,
    dtype: Dtype,
    index: HashMap<u64, usize>,
}

impl PartialEq for FeatureStore {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.ids == other.ids
            && self.labels == other.labels
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureStore {
    /// Builds a store from row-major values.
    pub fn new(k: usize, rows: Vec<f64>, ids: Vec<u64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if k == 0 || ids.is_empty() {
            return Err(Error::EmptyStore);
        }
        let n = ids.len();
        if rows.len() != n * k {
            return Err(Error::DimensionMismatch {
                row: rows.len() / k,
                expected: n * k,
                found: rows.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    row: l.len(),
                    expected: n,
                    found: l.len(),
                });
            }
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / k,
                col: pos % k,
            });
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(FeatureStore {
            k,
            rows,
            ids,
            labels,
            dtype: Dtype::F64,
            index,
        })
    }

    /// Builds a store from row vectors with ids `0..n`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::DimensionMismatch {
                    row: i,
                    expected: k,
                    found: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        Self::new(k, flat, (0..rows.len() as u64).collect(), None)
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Element type the store was loaded from (and is saved as).
    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.rows.chunks_exact(self.k)
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn row_by_id(&self, id: u64) -> Result<&[f64]> {
        Ok(self.row(self.position(id)?))
    }

    /// Row as a query vector; used when queries live in their own store.
    pub fn query(&self, id: u64) -> Result<QueryVector> {
        QueryVector::new(self.row_by_id(id)?.to_vec())
    }

    /// SHA-256 over the canonical f64 TFS encoding.
    pub fn digest(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        self.clone()
            .with_dtype(Dtype::F64)
            .write_tfs(&mut buf)
            .expect("writing to a Vec cannot fail");
        Sha256::digest(&buf).into()
    }

    pub fn write_tfs<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&TFS_MAGIC)?;
        w.write_all(&[self.dtype.tag()])?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        w.write_all(&[self.labels.is_some() as u8])?;
        match self.dtype {
            Dtype::F64 => {
                for v in &self.rows {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for v in &self.rows {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tfs<R: Read>(r: &mut R) -> Result<Self> {
        let mut reader = CountingReader { inner: r, offset: 0 };
        let mut magic = [0u8; 4];
        reader.fill(&mut magic, "magic")?;
        if magic != TFS_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let dtype = match reader.u8("dtype")? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(Error::BadDtype(other)),
        };
        let n = reader.u64("row count")? as usize;
        let k = reader.u64("feature dimension")? as usize;
        let has_labels = match reader.u8("label flag")? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("label flag must be 0 or 1, found {other}"),
                })
            }
        };
        if n == 0 || k == 0 {
            return Err(Error::EmptyStore);
        }
        let total = n.checked_mul(k).ok_or(Error::Truncated {
            offset: reader.offset,
            what: "matrix size overflows",
        })?;
        let mut rows = Vec::with_capacity(total.min(1 << 28));
        for idx in 0..total {
            let v = match dtype {
                Dtype::F64 => {
                    let mut b = [0u8; 8];
                    reader.fill(&mut b, "feature values")?;
                    f64::from_le_bytes(b)
                }
                Dtype::F32 => {
                    let mut b = [0u8; 4];
                    reader.fill(&mut b, "feature values")?;
                    f32::from_le_bytes(b) as f64
                }
            };
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: idx / k,
                    col: idx % k,
                });
            }
            rows.push(v);
        }
        let labels = if has_labels {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                reader.fill(&mut b, "labels")?;
                l.push(u32::from_le_bytes(b));
            }
            Some(l)
        } else {
            None
        };
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(reader.u64("ids")?);
        }
        let mut trailing = [0u8; 1];
        if reader.inner.read(&mut trailing)? != 0 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("trailing bytes after offset {}", reader.offset),
            });
        }
        Ok(Self::new(k, rows, ids, labels)?.with_dtype(dtype))
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "id")?;
        if self.labels.is_some() {
            write!(w, ",label")?;
        }
        for j in 0..self.k {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.n() {
            write!(w, "{}", self.ids[i])?;
            if let Some(l) = &self.labels {
                write!(w, ",{}", l[i])?;
            }
            for v in self.row(i) {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut has_labels = false;
        let mut expected_cols: Option<usize> = None;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        let mut k = 0usize;
        let mut data_row = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = lineno + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if expected_cols.is_none() && ids.is_empty() && fields[0].eq_ignore_ascii_case("id") {
                has_labels = fields.get(1).is_some_and(|f| f.eq_ignore_ascii_case("label"));
                expected_cols = Some(fields.len());
                continue;
            }
            let ncols = *expected_cols.get_or_insert(fields.len());
            if fields.len() != ncols {
                return Err(Error::DimensionMismatch {
                    row: data_row,
                    expected: ncols,
                    found: fields.len(),
                });
            }
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let id: u64 = fields[0]
                .parse()
                .map_err(|e| parse_err(format!("bad id {:?}: {e}", fields[0])))?;
            let mut start = 1;
            if has_labels {
                let l: u32 = fields[1]
                    .parse()
                    .map_err(|e| parse_err(format!("bad label {:?}: {e}", fields[1])))?;
                labels.push(l);
                start = 2;
            }
            k = ncols - start;
            for (col, f) in fields[start..].iter().enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|e| parse_err(format!("bad value {f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row: data_row, col });
                }
                rows.push(v);
            }
            ids.push(id);
            data_row += 1;
        }
        if ids.is_empty() || k == 0 {
            return Err(Error::EmptyStore);
        }
        Self::new(k, rows, ids, has_labels.then_some(labels))
    }

    pub fn load(path: &Path, format: StoreFormat) -> Result<Self> {
        let file = fs::File::open(path)?;
        match format {
            StoreFormat::Tfs => Self::read_tfs(&mut BufReader::new(file)),
            StoreFormat::Csv => Self::read_csv(file),
        }
    }

    pub fn save(&self, path: &Path, format: StoreFormat) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        match format {
            StoreFormat::Tfs => self.write_tfs(&mut w)?,
            StoreFormat::Csv => self.write_csv(&mut w)?,
        }
        w.flush()?;
        Ok(())
    }

    /// Positions of rows whose label equals `label`, or all rows when `None`.
    pub fn candidate_positions(&self, label: Option<u32>) -> Result<Vec<usize>> {
        match label {
            None => Ok((0..self.n()).collect()),
            Some(l) => {
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("label filter requested but the store has no labels".into())
                })?;
                Ok(labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x == l)
                    .map(|(i, _)| i)
                    .collect())
            }
        }
    }
}

/// Loads a store, choosing the format from the extension.
pub fn load_store(path: &Path, format: StoreFormat) -> Result<FeatureStore> {
    FeatureStore::load(path, format)
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated {
                    offset: self.offset,
                    what,
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Feature vector of an attribution target.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(col) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: 0, col });
        }
        Ok(QueryVector(entries))
    }

    /// Parses a comma-separated inline vector.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: 1,
                    msg: format!("bad query value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_squared(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn scaled(&self, factor: f64) -> QueryVector {
        QueryVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn negated(&self) -> QueryVector {
        self.scaled(-1.0)
    }

    pub(crate) fn check_dim(&self, store: &FeatureStore) -> Result<()> {
        if self.dim() != store.k() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: store.k(),
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl AsRef<[f64]> for QueryVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Several query vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMatrix {
    k: usize,
    rows: Vec<QueryVector>,
}

impl QueryMatrix {
    pub fn new(rows: Vec<QueryVector>) -> Result<Self> {
        let k = rows.first().ok_or(Error::EmptyQuerySet)?.dim();
        for (i, r) in rows.iter().enumerate() {
            if r.dim() != k {
                return Err(Error::DimensionMismatch {
                    row: i,
                    expected: k,
                    found: r.dim(),
                });
            }
        }
        Ok(QueryMatrix { k, rows })
    }

    pub fn from_store(store: &FeatureStore) -> Result<Self> {
        Self::new(
            store
                .rows()
                .map(|r| QueryVector::new(r.to_vec()))
                .collect::<Result<_>>()?,
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[QueryVector] {
        &self.rows
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureStore {
        FeatureStore::new(
            3,
            vec![1.0, 2.0, 3.0, -0.5, 0.25, 1e-300, 7.0, 8.0, 9.0],
            vec![10, 20, 30],
            Some(vec![1, 0, 1]),
        )
        .unwrap()
    }

    #[test]
    fn tfs_round_trip_is_bit_identical() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_tfs(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TFS1");
        assert_eq!(buf.len(), 4 + 1 + 8 + 8 + 1 + 9 * 8 + 3 * 4 + 3 * 8);
        let back = FeatureStore::read_tfs(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn f32_values_are_widened() {
        let s = sample().with_dtype(Dtype::F32);
        let mut buf = Vec::new();
        s.write_tfs(&mut buf).unwrap();
        let back = FeatureStore::read_tfs(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dtype(), Dtype::F32);
        assert_eq!(back.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(back.row(1)[2], 0.0);
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        sample().write_tfs(&mut buf).unwrap();
        buf[3] = b'2';
        let err = FeatureStore::read_tfs(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("bad magic"));
    }

    #[test]
    fn truncated_reports_offset() {
        let mut buf = Vec::new();
        sample().write_tfs(&mut buf).unwrap();
        buf.truncate(30);
        match FeatureStore::read_tfs(&mut buf.as_slice()).unwrap_err() {
            Error::Truncated { offset, .. } => assert_eq!(offset, 30),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_tfs_row_is_named() {
        let mut buf = Vec::new();
        sample().write_tfs(&mut buf).unwrap();
        // Row 2, column 1 sits at header (22) + 7 values.
        buf[22 + 7 * 8..22 + 8 * 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            FeatureStore::read_tfs(&mut buf.as_slice()),
            Err(Error::NonFiniteValue { row: 2, col: 1 })
        ));
    }

    #[test]
    fn csv_round_trip_and_labels() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = FeatureStore::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_without_header() {
        let s = FeatureStore::read_csv("5,1.0,2.0\n6,3.0,4.0\n".as_bytes()).unwrap();
        assert_eq!((s.n(), s.k()), (2, 2));
        assert_eq!(s.ids(), &[5, 6]);
        assert!(s.labels().is_none());
    }

    #[test]
    fn ragged_csv_is_dimension_mismatch() {
        let err = FeatureStore::read_csv("id,f0,f1\n1,1.0,2.0\n2,3.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { row: 1, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            FeatureStore::read_csv("1,1.0\n1,2.0\n".as_bytes()),
            Err(Error::DuplicateId(1))
        ));
    }

    #[test]
    fn label_filter() {
        let s = sample();
        assert_eq!(s.candidate_positions(Some(1)).unwrap(), vec![0, 2]);
        assert!(s.candidate_positions(Some(9)).unwrap().is_empty());
        let unlabeled = FeatureStore::from_rows(&[vec![1.0]]).unwrap();
        assert!(unlabeled.candidate_positions(Some(0)).is_err());
    }

    #[test]
    fn inline_query_parsing() {
        let q = QueryVector::parse("1, -2.5,3e-1").unwrap();
        assert_eq!(q.as_slice(), &[1.0, -2.5, 0.3]);
        assert!(QueryVector::parse("1,x").is_err());
        assert!(QueryVector::parse("1,inf").is_err());
    }

    #[test]
    fn digest_ignores_dtype_tag_but_not_values() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.digest(), b.clone().with_dtype(Dtype::F32).digest());
        b.rows[0] = 1.5;
        assert_ne!(a.digest(), b.digest());
    }
}
