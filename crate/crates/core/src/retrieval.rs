//! Exact cosine ranking, Recall@K and Spearman correlation.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub queries: Array2<f32>,
    pub gallery: Array2<f32>,
    /// Relevant gallery indices per query.
    pub relevance: Vec<Vec<usize>>,
    pub ks: Vec<usize>,
}

impl RetrievalTask {
    pub fn new(queries: Array2<f32>, gallery: Array2<f32>, relevance: Vec<Vec<usize>>, ks: Vec<usize>) -> Result<Self> {
        let (q, g) = (queries.nrows(), gallery.nrows());
        let bad = |m: String| Err(Error::InvalidTask(m));
        if q == 0 || g == 0 {
            return bad("empty query or gallery set".into());
        }
        if queries.ncols() != gallery.ncols() {
            return Err(Error::DimMismatch {
                expected: gallery.ncols(),
                got: queries.ncols(),
            });
        }
        if relevance.len() != q {
            return bad(format!("{} relevance sets for {q} queries", relevance.len()));
        }
        if let Some(i) = relevance.iter().position(|r| r.is_empty() || r.iter().any(|&x| x >= g)) {
            return bad(format!("query {i}: relevance set empty or out of range"));
        }
        if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 || *ks.last().unwrap() > g {
            return bad(format!("ks {ks:?} must be strictly ascending within 1..={g}"));
        }
        Ok(Self {
            queries,
            gallery,
            relevance,
            ks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    /// 1-based rank of the best-ranked relevant item, per query.
    pub first_relevant_rank: Vec<usize>,
}

impl RecallReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

pub fn stack(rows: &[Embedding]) -> Result<Array2<f32>> {
    let d = rows.first().map_or(0, Embedding::dim);
    let mut out = Array2::zeros((rows.len(), d));
    for (i, e) in rows.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: e.dim(),
            });
        }
        out.row_mut(i).assign(&ArrayView1::from(e.as_slice()));
    }
    Ok(out)
}

fn norm(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn gallery_norms(gallery: &Array2<f32>) -> Result<Vec<f64>> {
    gallery
        .rows()
        .into_iter()
        .map(|r| match norm(r) {
            n if n > 0.0 && n.is_finite() => Ok(n),
            _ => Err(Error::ZeroVector),
        })
        .collect()
}

fn rank_with_norms(query: ArrayView1<f32>, gallery: &Array2<f32>, norms: &[f64]) -> Result<Vec<usize>> {
    if query.len() != gallery.ncols() {
        return Err(Error::DimMismatch {
            expected: gallery.ncols(),
            got: query.len(),
        });
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::ZeroVector);
    }
    let scores: Vec<f64> = gallery
        .rows()
        .into_iter()
        .zip(norms)
        .map(|(g, gn)| {
            let d: f64 = g.iter().zip(query.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
            d / (qn * gn)
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.nrows()).collect();
    // stable: equal scores keep ascending index
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Gallery indices by descending cosine to `query`, ties by ascending index.
pub fn rank_gallery(query: &[f32], gallery: &Array2<f32>) -> Result<Vec<usize>> {
    let norms = gallery_norms(gallery)?;
    rank_with_norms(ArrayView1::from(query), gallery, &norms)
}

pub fn recall_at_k(task: &RetrievalTask) -> Result<RecallReport> {
    recall_at_k_with(Execution::default(), task)
}

pub fn recall_at_k_with(exec: Execution, task: &RetrievalTask) -> Result<RecallReport> {
    let norms = gallery_norms(&task.gallery)?;
    let ranks = par::map_range(exec, task.queries.nrows(), |i| {
        let order = rank_with_norms(task.queries.row(i), &task.gallery, &norms)?;
        let rel = &task.relevance[i];
        Ok(order
            .iter()
            .position(|g| rel.contains(g))
            .expect("relevance set is non-empty")
            + 1)
    });
    let first_relevant_rank = ranks
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::at(i, e)))
        .collect::<Result<Vec<usize>>>()?;
    let q = first_relevant_rank.len() as f64;
    let recall = task
        .ks
        .iter()
        .map(|&k| first_relevant_rank.iter().filter(|&&r| r <= k).count() as f64 / q)
        .collect();
    Ok(RecallReport {
        ks: task.ks.clone(),
        recall,
        first_relevant_rank,
    })
}

/// Average ("fractional") ranks, 1-based.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0f64; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientData("spearman needs at least two pairs".into()));
    }
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (rp, rg) = (fractional_ranks(pred), fractional_ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}
