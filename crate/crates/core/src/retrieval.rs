//! Exact squared-inner-product search and retrieval metrics.
//!
//! Vector databases usually expose only a vanilla inner-product top-k. A
//! squared inner product is emulated by querying with both `r` and `-r`,
//! taking the union of the two candidate lists, rescoring by `(phi' r)^2`
//! and truncating to `k`. [`FlatIndex`] supports both the direct scan and the
//! emulated path; other backends only need [`SearchBackend`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::store::{dot, FeatureStore, QueryVector};

/// Orders `(id, score)` by score descending, then id ascending.
///
/// `+0.0` and `-0.0` compare equal so that sign-of-zero never decides a rank.
pub fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) | None => a.0.cmp(&b.0),
        Some(o) => o,
    }
}

/// Ids in rank order with their scores.
///
/// Lists built from scores are sorted by [`rank_order`]. Lists built from a
/// greedy selection keep the selection order, which is the rank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    ids: Vec<u64>,
    scores: Vec<f64>,
}

impl RankedList {
    pub fn from_scores(mut scored: Vec<(u64, f64)>) -> Self {
        scored.sort_by(rank_order);
        Self::from_sorted(scored)
    }

    fn from_sorted(scored: Vec<(u64, f64)>) -> Self {
        let (ids, scores) = scored.into_iter().unzip();
        RankedList { ids, scores }
    }

    /// Keeps the given order, e.g. the order of greedy selection.
    pub fn from_selection(ids: Vec<u64>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: ids.len(),
                found: scores.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(RankedList { ids, scores })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncated(&self, k: usize) -> RankedList {
        let k = k.min(self.len());
        RankedList {
            ids: self.ids[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
        }
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id).map(|p| p + 1)
    }
}

fn top_k(mut scored: Vec<(u64, f64)>, k: usize) -> Vec<(u64, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

/// Minimal vanilla inner-product search interface.
pub trait SearchBackend {
    fn len(&self) -> usize;

    fn dim(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-`k` rows by `phi' query` (not squared), skipping masked ids.
    fn top_k_inner_product(&self, query: &[f64], k: usize, masked: &HashSet<u64>) -> Vec<(u64, f64)>;
}

/// Exact flat index over a feature store.
#[derive(Debug, Clone, Copy)]
pub struct FlatIndex<'s> {
    store: &'s FeatureStore,
}

impl<'s> FlatIndex<'s> {
    pub fn build(store: &'s FeatureStore) -> Self {
        FlatIndex { store }
    }

    pub fn store(&self) -> &'s FeatureStore {
        self.store
    }

    /// Direct scan of `(phi' r)^2` over unmasked rows.
    pub fn squared_scan(&self, r: &[f64], k: usize, masked: &HashSet<u64>) -> Vec<(u64, f64)> {
        let scored = self
            .store
            .rows()
            .zip(self.store.ids())
            .filter(|(_, id)| !masked.contains(id))
            .map(|(row, &id)| {
                let ip = dot(row, r);
                (id, ip * ip)
            })
            .collect();
        top_k(scored, k)
    }
}

impl SearchBackend for FlatIndex<'_> {
    fn len(&self) -> usize {
        self.store.n()
    }

    fn dim(&self) -> usize {
        self.store.k()
    }

    fn top_k_inner_product(&self, query: &[f64], k: usize, masked: &HashSet<u64>) -> Vec<(u64, f64)> {
        let scored = self
            .store
            .rows()
            .zip(self.store.ids())
            .filter(|(_, id)| !masked.contains(id))
            .map(|(row, &id)| (id, dot(row, query)))
            .collect();
        top_k(scored, k)
    }
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::InvalidConfig(format!("k = {k} must lie in 1..={len}")));
    }
    Ok(())
}

/// The `k` rows maximizing `(phi' r)^2`, by direct scan.
pub fn topk_squared_ip(index: &FlatIndex<'_>, r: &QueryVector, k: usize) -> Result<RankedList> {
    check_k(index.len(), k)?;
    r.check_dim(index.store)?;
    Ok(RankedList::from_sorted(index.squared_scan(r.as_slice(), k, &HashSet::new())))
}

/// Squared-inner-product top-`k` emulated with two vanilla queries `r`, `-r`.
pub fn topk_squared_ip_two_query<B: SearchBackend + ?Sized>(
    backend: &B,
    r: &[f64],
    k: usize,
    masked: &HashSet<u64>,
) -> Vec<(u64, f64)> {
    let negated: Vec<f64> = r.iter().map(|v| -v).collect();
    let mut merged: BTreeMap<u64, f64> = BTreeMap::new();
    for (id, ip) in backend
        .top_k_inner_product(r, k, masked)
        .into_iter()
        .chain(backend.top_k_inner_product(&negated, k, masked))
    {
        merged.insert(id, ip * ip);
    }
    top_k(merged.into_iter().collect(), k)
}

pub fn topk_squared_ip_emulated<B: SearchBackend + ?Sized>(
    backend: &B,
    r: &QueryVector,
    k: usize,
) -> Result<RankedList> {
    check_k(backend.len(), k)?;
    if r.dim() != backend.dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: backend.dim(),
            found: r.dim(),
        });
    }
    Ok(RankedList::from_sorted(topk_squared_ip_two_query(
        backend,
        r.as_slice(),
        k,
        &HashSet::new(),
    )))
}

/// `|top-k ∩ truth| / |truth|`.
pub fn recall_at_k(rank: &RankedList, truth: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    let hits = rank.ids().iter().take(k).filter(|id| truth.contains(id)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Reciprocal rank of the first relevant id, or 0 when it is not in the top `k`.
pub fn mrr_at_k(rank: &RankedList, truth: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    Ok(rank
        .ids()
        .iter()
        .take(k)
        .position(|id| truth.contains(id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

/// Relevant example ids per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    per_query: BTreeMap<u64, BTreeSet<u64>>,
}

impl GroundTruth {
    pub fn new(per_query: BTreeMap<u64, BTreeSet<u64>>) -> Result<Self> {
        if per_query.values().any(BTreeSet::is_empty) {
            return Err(Error::EmptyTruth);
        }
        Ok(GroundTruth { per_query })
    }

    pub fn queries(&self) -> impl Iterator<Item = (&u64, &BTreeSet<u64>)> {
        self.per_query.iter()
    }

    pub fn get(&self, query: u64) -> Option<&BTreeSet<u64>> {
        self.per_query.get(&query)
    }

    pub fn len(&self) -> usize {
        self.per_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_query.is_empty()
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut per_query: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for (line_no, fields) in csv_records(r)? {
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected query_id,example_id, found {} fields", fields.len()),
                });
            }
            let q = parse_u64(&fields[0], line_no)?;
            let x = parse_u64(&fields[1], line_no)?;
            per_query.entry(q).or_default().insert(x);
        }
        Self::new(per_query)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "query_id,example_id")?;
        for (q, ids) in &self.per_query {
            for x in ids {
                writeln!(w, "{q},{x}")?;
            }
        }
        Ok(())
    }
}

/// Ranked lists keyed by query id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rankings {
    per_query: BTreeMap<u64, RankedList>,
}

impl Rankings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: u64, list: RankedList) {
        self.per_query.insert(query, list);
    }

    pub fn get(&self, query: u64) -> Option<&RankedList> {
        self.per_query.get(&query)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&u64, &RankedList)> {
        self.per_query.iter()
    }

    pub fn len(&self) -> usize {
        self.per_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_query.is_empty()
    }

    /// `query_id,rank,example_id,score`, ranks 1-based.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "query_id,rank,example_id,score")?;
        for (q, list) in &self.per_query {
            for (i, (id, s)) in list.ids().iter().zip(list.scores()).enumerate() {
                writeln!(w, "{q},{},{id},{s:?}", i + 1)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows: BTreeMap<u64, Vec<(usize, u64, f64)>> = BTreeMap::new();
        for (line_no, fields) in csv_records(r)? {
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected query_id,rank,example_id,score, found {} fields", fields.len()),
                });
            }
            let q = parse_u64(&fields[0], line_no)?;
            let rank = parse_u64(&fields[1], line_no)? as usize;
            let id = parse_u64(&fields[2], line_no)?;
            let score: f64 = fields[3].parse().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad score {:?}: {e}", fields[3]),
            })?;
            rows.entry(q).or_default().push((rank, id, score));
        }
        let mut out = Rankings::new();
        for (q, mut entries) in rows {
            entries.sort_by_key(|e| e.0);
            for (expected, e) in entries.iter().enumerate() {
                if e.0 != expected + 1 {
                    return Err(Error::InvalidConfig(format!(
                        "query {q}: ranks must run 1..=n without gaps, found rank {}",
                        e.0
                    )));
                }
            }
            let (ids, scores) = entries.into_iter().map(|(_, id, s)| (id, s)).unzip();
            out.insert(q, RankedList::from_selection(ids, scores)?);
        }
        Ok(out)
    }
}

/// Per-query metric values plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub per_query: Vec<(u64, f64, f64)>,
    pub mean_recall: f64,
    pub mean_mrr: f64,
}

/// Recall@k and MRR@k for every query with ground truth.
pub fn evaluate(rankings: &Rankings, truth: &GroundTruth, k: usize) -> Result<MetricReport> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    let mut per_query = Vec::with_capacity(truth.len());
    for (&q, relevant) in truth.queries() {
        let list = rankings
            .get(q)
            .ok_or_else(|| Error::InvalidConfig(format!("query {q} has ground truth but no ranking")))?;
        per_query.push((q, recall_at_k(list, relevant, k)?, mrr_at_k(list, relevant, k)?));
    }
    for (&q, _) in rankings.queries() {
        if truth.get(q).is_none() {
            return Err(Error::InvalidConfig(format!("query {q} has a ranking but no ground truth")));
        }
    }
    let n = per_query.len() as f64;
    let mean_recall = per_query.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_mrr = per_query.iter().map(|r| r.2).sum::<f64>() / n;
    Ok(MetricReport {
        k,
        per_query,
        mean_recall,
        mean_mrr,
    })
}

fn parse_u64(field: &str, line: usize) -> Result<u64> {
    field.parse().map_err(|e| Error::Parse {
        line,
        msg: format!("bad id {field:?}: {e}"),
    })
}

/// Data lines of a simple CSV, skipping `#` comments and a header whose
/// first field is not numeric.
fn csv_records<R: Read>(r: R) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = t.split(',').map(|f| f.trim().to_string()).collect();
        if first {
            first = false;
            if fields[0].parse::<u64>().is_err() {
                continue;
            }
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}
