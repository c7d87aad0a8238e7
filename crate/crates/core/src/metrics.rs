//! Cross-camera retrieval evaluation: CMC curve and mean average precision.

use std::path::Path;

use candle::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::PersonImage;
use crate::miner::reid_distance;
use crate::nn::{Mode, UdGan};
use crate::parallel::{try_map_range, Parallelism};
use crate::{Error, Result};

/// Longest rank kept in the CMC curve by default.
pub const DEFAULT_MAX_RANK: usize = 50;

/// Per-query outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_index: usize,
    pub ap: f64,
    /// 1-based rank of the first true match.
    pub first_match_rank: usize,
}

/// Result of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[k - 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_valid_queries: usize,
    pub per_query: Vec<QueryRecord>,
}

impl EvalReport {
    /// Rank-k accuracy; ranks past the curve end repeat its last value.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    /// Writes `tag,rank1,rank5,rank10,mAP,num_valid_queries`.
    pub fn write_summary_csv(&self, path: &Path, tag: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(SummaryRow::new(self, tag))?;
        w.flush()?;
        Ok(())
    }

    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.per_query {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub tag: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_valid_queries: usize,
}

impl SummaryRow {
    pub fn new(report: &EvalReport, tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            rank1: report.rank(1),
            rank5: report.rank(5),
            rank10: report.rank(10),
            map: report.map,
            num_valid_queries: report.num_valid_queries,
        }
    }

    pub fn read_csv(path: &Path) -> Result<Vec<Self>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Gallery items usable for a query: everything except same identity on the
/// same camera. Distractors stay in as negatives.
pub fn valid_gallery_mask(query: (i64, u32), gallery: &[(i64, u32)]) -> Vec<bool> {
    gallery.iter().map(|&(id, cam)| !(id == query.0 && cam == query.1)).collect()
}

/// Unmasked gallery indices by ascending distance, ties by index.
pub fn rank_by_distance(distances: &[f64], mask: &[bool]) -> Result<Vec<usize>> {
    if distances.len() != mask.len() {
        return Err(Error::shape(format!("{} distances but {} mask entries", distances.len(), mask.len())));
    }
    let mut order: Vec<usize> = (0..distances.len()).filter(|&i| mask[i]).collect();
    if order.is_empty() {
        return Err(Error::invalid("invalid query: every gallery item is masked"));
    }
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Ranks gallery vectors against one query vector.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>], mask: &[bool]) -> Result<Vec<usize>> {
    let distances = gallery
        .iter()
        .map(|g| reid_distance(query, g))
        .collect::<Result<Vec<_>>>()?;
    rank_by_distance(&distances, mask)
}

/// Fraction of queries with a true match in the first `k` results.
pub fn cmc_at_k(flags: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if flags.is_empty() {
        return Err(Error::invalid("no valid queries"));
    }
    let hits = flags.iter().filter(|f| f.iter().take(k).any(|&x| x)).count();
    Ok(hits as f64 / flags.len() as f64)
}

/// Mean of precision at each true match.
pub fn average_precision(flags: &[bool]) -> Result<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        return Err(Error::invalid("invalid query: no true match"));
    }
    Ok(sum / found as f64)
}

/// Labelled embedding set used for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub embeddings: &'a [Vec<f32>],
    pub identities: &'a [i64],
    pub cameras: &'a [u32],
}

impl Labelled<'_> {
    fn check(&self, what: &str) -> Result<()> {
        let n = self.embeddings.len();
        if n == 0 {
            return Err(Error::invalid(format!("empty {what} set")));
        }
        if self.identities.len() != n || self.cameras.len() != n {
            return Err(Error::shape(format!("{what} labels do not match {n} embeddings")));
        }
        Ok(())
    }
}

/// Evaluates precomputed embeddings.
pub fn evaluate_embeddings(
    query: Labelled<'_>,
    gallery: Labelled<'_>,
    max_rank: usize,
    par: Parallelism,
) -> Result<EvalReport> {
    query.check("query")?;
    gallery.check("gallery")?;
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    let gallery_labels: Vec<(i64, u32)> = gallery.identities.iter().copied().zip(gallery.cameras.iter().copied()).collect();
    let outcomes = try_map_range(query.embeddings.len(), par, |q| -> Result<Option<(QueryRecord, Vec<bool>)>> {
        let id = query.identities[q];
        if id < 0 {
            return Ok(None);
        }
        let mask = valid_gallery_mask((id, query.cameras[q]), &gallery_labels);
        let order = match rank_gallery(&query.embeddings[q], gallery.embeddings, &mask) {
            Ok(o) => o,
            Err(Error::Invalid(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let flags: Vec<bool> = order.iter().map(|&g| gallery.identities[g] == id).collect();
        let Some(first) = flags.iter().position(|&f| f) else {
            return Ok(None);
        };
        let record = QueryRecord {
            query_index: q,
            ap: average_precision(&flags)?,
            first_match_rank: first + 1,
        };
        Ok(Some((record, flags)))
    })?;
    let valid: Vec<(QueryRecord, Vec<bool>)> = outcomes.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::invalid("no valid queries"));
    }
    let n = valid.len() as f64;
    let cmc = (1..=max_rank)
        .map(|k| valid.iter().filter(|(r, _)| r.first_match_rank <= k).count() as f64 / n)
        .collect();
    let map = valid.iter().map(|(r, _)| r.ap).sum::<f64>() / n;
    Ok(EvalReport {
        cmc,
        map,
        num_valid_queries: valid.len(),
        per_query: valid.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Anything that maps an image batch `[N,3,H,W]` to embeddings `[N,d]`.
pub trait Embedder: Sync {
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

impl Embedder for UdGan {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.encode_identity(images, Mode::Eval)
    }
}

/// Embeds images in batches, returning one row per image.
pub fn embed_images(images: &[PersonImage], encoder: &dyn Embedder, batch_size: usize, par: Parallelism) -> Result<Vec<Vec<f32>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let chunks: Vec<&[PersonImage]> = images.chunks(batch_size).collect();
    let rows = try_map_range(chunks.len(), par, |c| -> Result<Vec<Vec<f32>>> {
        let pixels: Vec<&Tensor> = chunks[c].iter().map(|p| &p.pixels).collect();
        let batch = Tensor::stack(&pixels, 0)?;
        let emb = encoder.embed(&batch)?.to_dtype(candle::DType::F32)?;
        Ok(emb.to_vec2::<f32>()?)
    })?;
    Ok(rows.into_iter().flatten().collect())
}

/// Embeds both sets with `encoder` and evaluates them.
pub fn evaluate(
    queries: &[PersonImage],
    gallery: &[PersonImage],
    encoder: &dyn Embedder,
    batch_size: usize,
    par: Parallelism,
) -> Result<EvalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("query and gallery sets must be nonempty"));
    }
    let q = embed_images(queries, encoder, batch_size, par)?;
    let g = embed_images(gallery, encoder, batch_size, par)?;
    let labels = |set: &[PersonImage]| -> (Vec<i64>, Vec<u32>) { set.iter().map(|p| (p.identity, p.camera)).unzip() };
    let (qi, qc) = labels(queries);
    let (gi, gc) = labels(gallery);
    evaluate_embeddings(
        Labelled { embeddings: &q, identities: &qi, cameras: &qc },
        Labelled { embeddings: &g, identities: &gi, cameras: &gc },
        DEFAULT_MAX_RANK,
        par,
    )
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}
