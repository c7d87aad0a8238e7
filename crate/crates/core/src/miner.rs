//! Unsupervised same-identity pair mining with a mutual top-k filter.
//!
//! For every query `q` the nearest other image `m` is proposed. The pair is
//! kept only when `q` is among the `k` nearest neighbours of `m`; otherwise
//! the query is paired with itself so every image still yields one pair.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::parallel::{map_range, Parallelism};
use crate::{Error, Result};

/// One mined pair; indices refer to the embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub query_index: usize,
    pub match_index: usize,
    pub is_self_pair: bool,
    /// Distance between the two images (0 for self pairs).
    pub distance: f64,
    /// Nearest neighbour before filtering.
    pub candidate_index: usize,
}

/// Counts describing one mining run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub total_queries: usize,
    pub kept_pairs: usize,
    pub self_pairs: usize,
    pub kept_fraction: f64,
    /// Fraction of kept (non-self) pairs whose labels agree.
    pub precision: Option<f64>,
    /// Fraction of unfiltered top-1 proposals whose labels agree.
    pub raw_top1_precision: Option<f64>,
}

impl MiningReport {
    fn from_pairs(pairs: &[MinedPair]) -> Self {
        let total = pairs.len();
        let self_pairs = pairs.iter().filter(|p| p.is_self_pair).count();
        let kept = total - self_pairs;
        Self {
            total_queries: total,
            kept_pairs: kept,
            self_pairs,
            kept_fraction: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
            precision: None,
            raw_top1_precision: None,
        }
    }

    /// Writes the `key: value` summary.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{self}\n"))?;
        Ok(())
    }
}

impl fmt::Display for MiningReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total_queries: {}", self.total_queries)?;
        writeln!(f, "kept_pairs: {}", self.kept_pairs)?;
        writeln!(f, "self_pairs: {}", self.self_pairs)?;
        write!(f, "kept_fraction: {:.6}", self.kept_fraction)?;
        if let Some(p) = self.raw_top1_precision {
            write!(f, "\nraw_top1_precision: {p:.6}")?;
        }
        match self.precision {
            Some(p) => write!(f, "\nprecision: {p:.6}"),
            None => write!(f, "\nprecision: n/a"),
        }
    }
}

fn unit_rows(embeddings: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let dim = embeddings.first().map(Vec::len).unwrap_or(0);
    embeddings
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != dim {
                return Err(Error::shape(format!("row {i} has dimension {}, expected {dim}", row.len())));
            }
            unit(row).ok_or_else(|| Error::invalid(format!("row {i} is zero or non-finite")))
        })
        .collect()
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    Some(v.iter().map(|&x| x as f64 / norm).collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between the L2-normalized inputs.
pub fn reid_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("dimensions {} and {}", a.len(), b.len())));
    }
    let ua = unit(a).ok_or_else(|| Error::invalid("zero or non-finite vector"))?;
    let ub = unit(b).ok_or_else(|| Error::invalid("zero or non-finite vector"))?;
    Ok(euclid(&ua, &ub))
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `limit` nearest other rows of `i` (all of them when `None`).
fn neighbours(units: &[Vec<f64>], i: usize, limit: Option<usize>) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = units
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, u)| (euclid(&units[i], u), j))
        .collect();
    if let Some(k) = limit {
        if k < d.len() {
            d.select_nth_unstable_by(k, by_distance_then_index);
            d.truncate(k);
        }
    }
    d.sort_by(by_distance_then_index);
    d
}

/// For every row, all other rows by ascending distance (ties by index).
pub fn rank_all(embeddings: &[Vec<f32>], par: Parallelism) -> Result<Vec<Vec<usize>>> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("ranking needs at least two embeddings"));
    }
    let units = unit_rows(embeddings)?;
    Ok(map_range(units.len(), par, |i| {
        neighbours(&units, i, None).into_iter().map(|(_, j)| j).collect()
    }))
}

/// Mines one pair per row with the mutual top-`k` filter.
pub fn mine_pairs(embeddings: &[Vec<f32>], k: usize, par: Parallelism) -> Result<(Vec<MinedPair>, MiningReport)> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("mining needs at least two embeddings"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let units = unit_rows(embeddings)?;
    let top: Vec<Vec<(f64, usize)>> = map_range(units.len(), par, |i| neighbours(&units, i, Some(k)));
    let pairs: Vec<MinedPair> = (0..units.len())
        .map(|q| {
            let (distance, m) = top[q][0];
            let mutual = top[m].iter().any(|&(_, j)| j == q);
            if mutual {
                MinedPair {
                    query_index: q,
                    match_index: m,
                    is_self_pair: false,
                    distance,
                    candidate_index: m,
                }
            } else {
                MinedPair {
                    query_index: q,
                    match_index: q,
                    is_self_pair: true,
                    distance: 0.0,
                    candidate_index: m,
                }
            }
        })
        .collect();
    let report = MiningReport::from_pairs(&pairs);
    Ok((pairs, report))
}

/// Scores mined pairs against ground-truth labels (one per embedding row).
pub fn validate_mining(pairs: &[MinedPair], labels: &[i64]) -> Result<MiningReport> {
    let label = |i: usize| {
        labels
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no label for index {i}")))
    };
    let mut report = MiningReport::from_pairs(pairs);
    let (mut correct, mut kept, mut raw_correct) = (0usize, 0usize, 0usize);
    for p in pairs {
        let q = label(p.query_index)?;
        if label(p.candidate_index)? == q {
            raw_correct += 1;
        }
        if !p.is_self_pair {
            kept += 1;
            if label(p.match_index)? == q {
                correct += 1;
            }
        }
    }
    report.precision = (kept > 0).then(|| correct as f64 / kept as f64);
    report.raw_top1_precision = (!pairs.is_empty()).then(|| raw_correct as f64 / pairs.len() as f64);
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    query_path: String,
    match_path: String,
    is_self_pair: bool,
    distance: f64,
}

/// Writes `query_path,match_path,is_self_pair,distance`; `rows` maps embedding
/// rows to manifest entries.
pub fn write_pairs_csv(path: &Path, pairs: &[MinedPair], manifest: &DatasetManifest, rows: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in pairs {
        let entry = |i: usize| {
            rows.get(i)
                .and_then(|&r| manifest.entries().get(r))
                .map(|e| e.path.clone())
                .ok_or_else(|| Error::invalid(format!("pair index {i} has no manifest entry")))
        };
        w.serialize(PairRow {
            query_path: entry(p.query_index)?,
            match_path: entry(p.match_index)?,
            is_self_pair: p.is_self_pair,
            distance: p.distance,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a pair CSV back into row indices of `rows` (inverse of [`write_pairs_csv`]).
pub fn read_pairs_csv(path: &Path, manifest: &DatasetManifest, rows: &[usize]) -> Result<Vec<MinedPair>> {
    let index: std::collections::HashMap<&str, usize> = rows
        .iter()
        .enumerate()
        .map(|(k, &r)| (manifest.entries()[r].path.as_str(), k))
        .collect();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: PairRow = row?;
        let find = |p: &str| {
            index
                .get(p)
                .copied()
                .ok_or_else(|| Error::data(format!("pair file names unknown image `{p}`")))
        };
        let q = find(&row.query_path)?;
        let m = find(&row.match_path)?;
        if row.is_self_pair != (q == m) {
            return Err(Error::data(format!("inconsistent self-pair flag for `{}`", row.query_path)));
        }
        out.push(MinedPair {
            query_index: q,
            match_index: m,
            is_self_pair: row.is_self_pair,
            distance: row.distance,
            candidate_index: m,
        });
    }
    Ok(out)
}
