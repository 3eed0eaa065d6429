//! Modality gap between embedding populations and its 2D PCA picture.
//!
//! The gap is the Euclidean distance between the centroids of the
//! L2-normalized rows of two sets, so it lies in `[0, 2]` and ignores row
//! scale. PCA runs on the pooled, mean-centred rows via cyclic Jacobi
//! rotations of the covariance matrix.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues at or below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

pub const SVG_SIZE: usize = 600;
pub const SVG_RADIUS: usize = 2;
pub const PALETTE: [&str; 2] = ["#1f77b4", "#ff7f0e"];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Array2<f32>,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(rows: Array2<f32>, label: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InsufficientData("embedding set has no rows".into()));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            rows,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Mean of the unit-normalized rows.
pub fn normalized_centroid(set: &EmbeddingSet) -> Result<Array1<f64>> {
    let mut c = Array1::<f64>::zeros(set.dim());
    for row in set.rows.rows() {
        let r = row.mapv(f64::from);
        let n = r.dot(&r).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        c.scaled_add(1.0 / n, &r);
    }
    Ok(c / set.rows.nrows() as f64)
}

pub fn modality_gap(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (ca, cb) = (normalized_centroid(a)?, normalized_centroid(b)?);
    Ok((&ca - &cb).mapv(|x| x * x).sum().sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Projected coordinates per input set, `rows x k`.
    pub coords: Vec<Array2<f64>>,
    /// Top-k covariance eigenvalues, descending.
    pub explained_variance: Vec<f64>,
    /// `k x D` principal directions.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues descending and eigenvectors as matching columns.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}

fn pooled(sets: &[EmbeddingSet]) -> Result<Array2<f64>> {
    let d = sets.first().map(EmbeddingSet::dim).unwrap_or(0);
    if let Some(s) = sets.iter().find(|s| s.dim() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: s.dim(),
        });
    }
    let total: usize = sets.iter().map(|s| s.rows.nrows()).sum();
    let mut out = Array2::zeros((total, d));
    let mut at = 0;
    for s in sets {
        let n = s.rows.nrows();
        out.slice_mut(ndarray::s![at..at + n, ..])
            .assign(&s.rows.mapv(f64::from));
        at += n;
    }
    Ok(out)
}

/// Projects the pooled sets onto their top-`k` principal components.
/// Rank-deficient data yields zero trailing variances; see
/// [`pca_project_strict`] to reject it instead.
pub fn pca_project(sets: &[EmbeddingSet], k: usize) -> Result<Pca> {
    pca_impl(sets, k, false)
}

pub fn pca_project_strict(sets: &[EmbeddingSet], k: usize) -> Result<Pca> {
    pca_impl(sets, k, true)
}

fn pca_impl(sets: &[EmbeddingSet], k: usize, strict: bool) -> Result<Pca> {
    let x = pooled(sets)?;
    let (m, d) = x.dim();
    if k == 0 || m < k + 1 || d < k {
        return Err(Error::InsufficientData(format!(
            "PCA with k={k} needs at least {} rows and {k} dims, got {m}x{d}",
            k + 1
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / (m - 1) as f64;
    let (values, vectors) = symmetric_eigen(&cov);
    let top = values[0].max(0.0);
    let rank = values.iter().filter(|&&v| v > RANK_TOL * top && v > 0.0).count();
    if strict && rank < k {
        return Err(Error::DegenerateCovariance { rank, k });
    }
    let mut components = Array2::zeros((k, d));
    for c in 0..k {
        let mut col = vectors.column(c).to_owned();
        let lead = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        if col[lead] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.row_mut(c).assign(&col);
    }
    let explained_variance = values[..k]
        .iter()
        .enumerate()
        .map(|(i, &v)| if i < rank { v } else { 0.0 })
        .collect();
    let mut coords = Vec::with_capacity(sets.len());
    for s in sets {
        let rows = s.rows.mapv(f64::from) - &mean;
        coords.push(rows.dot(&components.t()));
    }
    Ok(Pca {
        coords,
        explained_variance,
        components,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub label_a: String,
    pub label_b: String,
    /// How rows are treated before the centroid is taken.
    pub normalization: String,
    pub gap: f64,
    pub centroid_a: Vec<f64>,
    pub centroid_b: Vec<f64>,
    pub pca_coords_a: Vec<[f64; 2]>,
    pub pca_coords_b: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
}

pub fn gap_report(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<GapReport> {
    let gap = modality_gap(a, b)?;
    let pca = pca_project(&[a.clone(), b.clone()], 2)?;
    let pts = |m: &Array2<f64>| m.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    Ok(GapReport {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        normalization: "l2-rows-then-mean".into(),
        gap,
        centroid_a: normalized_centroid(a)?.to_vec(),
        centroid_b: normalized_centroid(b)?.to_vec(),
        pca_coords_a: pts(&pca.coords[0]),
        pca_coords_b: pts(&pca.coords[1]),
        explained_variance: [pca.explained_variance[0], pca.explained_variance[1]],
    })
}

impl GapReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes") + "\n"
    }

    /// Scatter plot of both point clouds on a shared scale.
    pub fn to_svg(&self) -> String {
        let all = self.pca_coords_a.iter().chain(&self.pca_coords_b);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in all {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let span = (0..2).map(|i| hi[i] - lo[i]).fold(0.0f64, f64::max).max(1e-12);
        let margin = 20.0;
        let usable = SVG_SIZE as f64 - 2.0 * margin;
        let place = |p: &[f64; 2]| {
            let x = margin + (p[0] - lo[0]) / span * usable;
            let y = SVG_SIZE as f64 - margin - (p[1] - lo[1]) / span * usable;
            (x, y)
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
        );
        let _ = writeln!(s, r#"<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#);
        for (pts, (color, label)) in [&self.pca_coords_a, &self.pca_coords_b]
            .into_iter()
            .zip(PALETTE.iter().zip([&self.label_a, &self.label_b]))
        {
            let _ = writeln!(s, r#"<g fill="{color}"><title>{}</title>"#, xml_escape(label));
            for p in pts {
                let (x, y) = place(p);
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{SVG_RADIUS}"/>"#);
            }
            let _ = writeln!(s, "</g>");
        }
        let _ = writeln!(
            s,
            r#"<text x="10" y="16" font-size="12" font-family="monospace">gap={:.4} {} vs {}</text>"#,
            self.gap,
            xml_escape(&self.label_a),
            xml_escape(&self.label_b)
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
