//! Small causal transformer producing last-token embeddings.
//!
//! Text tokens are looked up in a byte embedding table; image patches go
//! through a frozen linear projector into the same width. Blocks are pre-norm
//! (attention then a 4x GELU feed-forward), positions are learned, and the
//! embedding is the final-norm output at the last position.
//!
//! The token table and projector are frozen; only [`Weights`] is trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{acc_at_b, acc_rows, axpy, dot, matmul, matmul_bias, transpose};
use crate::par::{self, Execution};
use crate::prompting::{MultimodalSequence, Segment};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectorMode {
    Random(u64),
    /// Glyph patches of the synthetic world's characters land exactly on the
    /// token embeddings of those characters.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub patch_features: usize,
    pub projector: ProjectorMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            vocab: 256,
            max_seq: 256,
            patch_features: 64,
            projector: ProjectorMode::Oracle,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.patch_features == 0 {
            return bad("dim, layers, heads and patch_features must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.max_seq < 2 {
            return bad("max_seq must be at least 2".into());
        }
        if self.vocab != 256 {
            return bad(format!("vocab must be 256 (byte tokens), got {}", self.vocab));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }
}

/// Fixed-width f32 vector taken from the last position.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w_qkv: Vec<f32>,
    pub b_qkv: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_fc: Vec<f32>,
    pub b_fc: Vec<f32>,
    pub w_proj: Vec<f32>,
    pub b_proj: Vec<f32>,
}

impl Block {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, f) = (cfg.dim, cfg.ffn_dim());
        Self {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: vec![0.0; d * 3 * d],
            b_qkv: vec![0.0; 3 * d],
            w_o: vec![0.0; d * d],
            b_o: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_fc: vec![0.0; d * f],
            b_fc: vec![0.0; f],
            w_proj: vec![0.0; f * d],
            b_proj: vec![0.0; d],
        }
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub pos_emb: Vec<f32>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
}

impl Weights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            pos_emb: vec![0.0; cfg.max_seq * cfg.dim],
            blocks: (0..cfg.layers).map(|_| Block::zeros(cfg)).collect(),
            lnf_g: vec![0.0; cfg.dim],
            lnf_b: vec![0.0; cfg.dim],
        }
    }

    /// Tensor names and shapes, in the order of [`Weights::tensors`].
    pub fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (cfg.dim, cfg.ffn_dim());
        let mut out = vec![("pos_emb".to_string(), vec![cfg.max_seq, d])];
        for l in 0..cfg.layers {
            for (name, shape) in [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("w_qkv", vec![d, 3 * d]),
                ("b_qkv", vec![3 * d]),
                ("w_o", vec![d, d]),
                ("b_o", vec![d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w_fc", vec![d, f]),
                ("b_fc", vec![f]),
                ("w_proj", vec![f, d]),
                ("b_proj", vec![d]),
            ] {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("lnf_g".into(), vec![d]));
        out.push(("lnf_b".into(), vec![d]));
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b, &b.w_fc, &b.b_fc,
                &b.w_proj, &b.b_proj,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b]);
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    /// `vocab x dim`, frozen.
    pub tok_emb: Vec<f32>,
    /// `patch_features x dim`, frozen.
    pub projector: Vec<f32>,
    pub weights: Weights,
    pub seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<EncoderState> {
    config.validate()?;
    let (d, f) = (config.dim, config.ffn_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok_emb = gaussian(&mut rng, config.vocab * d);
    let pos_emb = gaussian(&mut rng, config.max_seq * d);
    let blocks = (0..config.layers)
        .map(|_| Block {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: gaussian(&mut rng, d * 3 * d),
            b_qkv: vec![0.0; 3 * d],
            w_o: gaussian(&mut rng, d * d),
            b_o: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w_fc: gaussian(&mut rng, d * f),
            b_fc: vec![0.0; f],
            w_proj: gaussian(&mut rng, f * d),
            b_proj: vec![0.0; d],
        })
        .collect();
    let projector = match config.projector {
        ProjectorMode::Random(s) => {
            let mut prng = ChaCha8Rng::seed_from_u64(s);
            gaussian(&mut prng, config.patch_features * d)
        }
        ProjectorMode::Oracle => oracle_projector(&config, &tok_emb)?,
    };
    Ok(EncoderState {
        config,
        tok_emb,
        projector,
        weights: Weights {
            pos_emb,
            blocks,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
        },
        seed,
    })
}

/// Minimum-norm linear map sending each oracle glyph patch onto the token
/// embedding of its character: `P = X^T (X X^T)^-1 E`.
fn oracle_projector(config: &EncoderConfig, tok_emb: &[f32]) -> Result<Vec<f32>> {
    let f = config.patch_features;
    let side = (f as f64).sqrt().round() as usize;
    if side * side != f {
        return Err(Error::InvalidConfig(format!(
            "oracle projector needs square patches, patch_features = {f}"
        )));
    }
    let chars = crate::synth::oracle_charset();
    let m = chars.len();
    if m > f {
        return Err(Error::InvalidConfig(format!(
            "{m} oracle glyphs do not fit {f} patch features"
        )));
    }
    let x: Vec<Vec<f64>> = chars
        .iter()
        .map(|&c| {
            crate::render::glyph_cell(c as char, side)
                .pixels
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect()
        })
        .collect();
    let d = config.dim;
    let mut gram = vec![vec![0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            gram[i][j] = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
        }
    }
    let rhs: Vec<Vec<f64>> = chars
        .iter()
        .map(|&c| {
            tok_emb[c as usize * d..(c as usize + 1) * d]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let coeff =
        solve(gram, rhs).ok_or_else(|| Error::InvalidConfig("oracle glyph patches are linearly dependent".into()))?;
    let mut p = vec![0f32; f * d];
    for r in 0..f {
        for c in 0..d {
            p[r * d + c] = (0..m).map(|i| x[i][r] * coeff[i][c]).sum::<f64>() as f32;
        }
    }
    Ok(p)
}

/// Gauss-Jordan with partial pivoting; `a` is `m x m`, `b` is `m x k`.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let m = a.len();
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..m {
            if row == col {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..m {
                a[row][k] -= factor * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= factor * b[col][k];
            }
        }
    }
    for row in 0..m {
        let p = a[row][row];
        for v in &mut b[row] {
            *v /= p;
        }
    }
    Some(b)
}

struct LayerCache {
    /// First row whose outputs are computed.
    start: usize,
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    a: Vec<f32>,
    qkv: Vec<f32>,
    /// Attention probabilities per computed row and head, `T` wide.
    probs: Vec<f32>,
    y: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    c: Vec<f32>,
    u: Vec<f32>,
    /// `tanh` term of the GELU at each `u`.
    t: Vec<f32>,
    h: Vec<f32>,
}

/// Per-block transposes of `w_qkv`, `w_o`, `w_fc`, `w_proj`.
pub struct TransposedWeights {
    blocks: Vec<[Vec<f32>; 4]>,
}

/// Activations retained for the backward pass of one sequence.
pub struct ForwardCache {
    len: usize,
    layers: Vec<LayerCache>,
    xhat_f: Vec<f32>,
    rstd_f: f32,
}

#[inline(always)]
fn layer_norm(x: &[f32], d: usize, g: &[f32], b: &[f32], xhat: &mut [f32], rstd: &mut [f32], out: &mut [f32]) {
    for (((xr, hr), or), rs) in x
        .chunks_exact(d)
        .zip(xhat.chunks_exact_mut(d))
        .zip(out.chunks_exact_mut(d))
        .zip(rstd.iter_mut())
    {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        *rs = r;
        for j in 0..d {
            hr[j] = (xr[j] - mean) * r;
            or[j] = hr[j] * g[j] + b[j];
        }
    }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
#[inline(always)]
fn layer_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    g: &[f32],
    d: usize,
    dg: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let mut dxhat = vec![0f32; d];
    for (((dyr, hr), r), dxr) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut mean_dxhat = 0f32;
        let mut mean_dxhat_xhat = 0f32;
        for j in 0..d {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * hr[j];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_xhat /= d as f32;
        for j in 0..d {
            dxr[j] += r * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

#[inline(always)]
fn gelu_tanh(u: f32) -> f32 {
    // tanh(z) = 1 - 2 / (exp(2z) + 1); saturates cleanly at both ends
    let z = GELU_C * (u + 0.044715 * u * u * u);
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Derivative of the GELU at `u`, given `t = gelu_tanh(u)`.
#[inline(always)]
fn gelu_grad(u: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

impl EncoderState {
    fn check(&self, seq: &MultimodalSequence) -> Result<usize> {
        let len = seq.token_count();
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if len > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq,
            });
        }
        if let Some(f) = seq.patch_features() {
            if f != self.config.patch_features {
                return Err(Error::DimMismatch {
                    expected: self.config.patch_features,
                    got: f,
                });
            }
        }
        for s in seq.segments() {
            if let Segment::Text(t) = s {
                if let Some(&bad) = t.iter().find(|&&t| t as usize >= self.config.vocab) {
                    return Err(Error::InvalidConfig(format!("token id {bad} outside vocabulary")));
                }
            }
        }
        Ok(len)
    }

    /// Input rows: token or projected patch vectors plus positions.
    #[inline(always)]
    fn input_rows(&self, seq: &MultimodalSequence, len: usize) -> Vec<f32> {
        let d = self.config.dim;
        let mut x = vec![0f32; len * d];
        let mut t = 0;
        for s in seq.segments() {
            match s {
                Segment::Text(tokens) => {
                    for &tok in tokens {
                        let tok = tok as usize;
                        x[t * d..(t + 1) * d].copy_from_slice(&self.tok_emb[tok * d..(tok + 1) * d]);
                        t += 1;
                    }
                }
                Segment::Image(p) => {
                    let f = self.config.patch_features;
                    for row in p.rows() {
                        let out = &mut x[t * d..(t + 1) * d];
                        for (k, &v) in row.iter().enumerate() {
                            axpy(v, &self.projector[k * d..(k + 1) * d], out);
                        }
                        debug_assert_eq!(row.len(), f);
                        t += 1;
                    }
                }
            }
        }
        for (xr, pr) in x.chunks_exact_mut(d).zip(self.weights.pos_emb.chunks_exact(d)) {
            for (a, b) in xr.iter_mut().zip(pr) {
                *a += b;
            }
        }
        x
    }

    /// Runs one block on `x` (`len x d`), computing outputs for rows
    /// `start..len` only. Keys and values always cover every row.
    #[inline(always)]
    fn block_forward(&self, l: usize, x: &[f32], len: usize, start: usize) -> (Vec<f32>, LayerCache) {
        let cfg = &self.config;
        let (d, fd, nh, hd) = (cfg.dim, cfg.ffn_dim(), cfg.heads, cfg.head_dim());
        let blk = &self.weights.blocks[l];
        let rows = len - start;

        let mut xhat1 = vec![0f32; len * d];
        let mut rstd1 = vec![0f32; len];
        let mut a = vec![0f32; len * d];
        layer_norm(x, d, &blk.ln1_g, &blk.ln1_b, &mut xhat1, &mut rstd1, &mut a);
        let mut qkv = vec![0f32; len * 3 * d];
        matmul_bias(&a, d, &blk.w_qkv, 3 * d, &blk.b_qkv, &mut qkv);

        let scale = 1.0 / (hd as f32).sqrt();
        let mut probs = vec![0f32; rows * nh * len];
        let mut y = vec![0f32; rows * d];
        for i in start..len {
            let r = i - start;
            for h in 0..nh {
                let q = &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
                let p = &mut probs[(r * nh + h) * len..(r * nh + h + 1) * len];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd];
                    p[j] = dot(q, k) * scale;
                    max = max.max(p[j]);
                }
                let mut sum = 0f32;
                for pj in &mut p[..=i] {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                let yh = &mut y[r * d + h * hd..r * d + (h + 1) * hd];
                for j in 0..=i {
                    p[j] *= inv;
                    let v = &qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
                    axpy(p[j], v, yh);
                }
            }
        }

        let mut x_mid = vec![0f32; rows * d];
        matmul_bias(&y, d, &blk.w_o, d, &blk.b_o, &mut x_mid);
        for (m, xi) in x_mid.iter_mut().zip(&x[start * d..]) {
            *m += xi;
        }

        let mut xhat2 = vec![0f32; rows * d];
        let mut rstd2 = vec![0f32; rows];
        let mut c = vec![0f32; rows * d];
        layer_norm(&x_mid, d, &blk.ln2_g, &blk.ln2_b, &mut xhat2, &mut rstd2, &mut c);
        let mut u = vec![0f32; rows * fd];
        matmul_bias(&c, d, &blk.w_fc, fd, &blk.b_fc, &mut u);
        let t: Vec<f32> = u.iter().map(|&v| gelu_tanh(v)).collect();
        let h: Vec<f32> = u.iter().zip(&t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let mut out = vec![0f32; rows * d];
        matmul_bias(&h, fd, &blk.w_proj, d, &blk.b_proj, &mut out);
        for (o, m) in out.iter_mut().zip(&x_mid) {
            *o += m;
        }

        let cache = LayerCache {
            start,
            xhat1,
            rstd1,
            a,
            qkv,
            probs,
            y,
            xhat2,
            rstd2,
            c,
            u,
            t,
            h,
        };
        (out, cache)
    }

    fn run(&self, seq: &MultimodalSequence, keep: bool) -> Result<(Vec<f32>, Option<ForwardCache>)> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.run_avx2(seq, keep) };
        }
        self.run_impl(seq, keep)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn run_avx2(&self, seq: &MultimodalSequence, keep: bool) -> Result<(Vec<f32>, Option<ForwardCache>)> {
        self.run_impl(seq, keep)
    }

    #[inline(always)]
    fn run_impl(&self, seq: &MultimodalSequence, keep: bool) -> Result<(Vec<f32>, Option<ForwardCache>)> {
        let len = self.check(seq)?;
        let d = self.config.dim;
        let mut x = self.input_rows(seq, len);
        let mut caches = Vec::new();
        let last = self.config.layers - 1;
        for l in 0..self.config.layers {
            let start = if l == last { len - 1 } else { 0 };
            let (out, cache) = self.block_forward(l, &x, len, start);
            if keep {
                caches.push(cache);
            }
            x = out;
        }
        // x now holds the last row only
        let mut xhat = vec![0f32; d];
        let mut rstd = [0f32];
        let mut e = vec![0f32; d];
        layer_norm(
            &x,
            d,
            &self.weights.lnf_g,
            &self.weights.lnf_b,
            &mut xhat,
            &mut rstd,
            &mut e,
        );
        let cache = keep.then(|| ForwardCache {
            len,
            layers: caches,
            xhat_f: xhat,
            rstd_f: rstd[0],
        });
        Ok((e, cache))
    }

    pub fn encode(&self, seq: &MultimodalSequence) -> Result<Embedding> {
        Ok(Embedding(self.run(seq, false)?.0))
    }

    pub fn encode_batch(&self, seqs: &[MultimodalSequence]) -> Result<Vec<Embedding>> {
        self.encode_batch_with(Execution::default(), seqs)
    }

    pub fn encode_batch_with(&self, exec: Execution, seqs: &[MultimodalSequence]) -> Result<Vec<Embedding>> {
        par::map(exec, seqs, |_, s| self.encode(s))
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::at(i, e)))
            .collect()
    }

    /// Embedding plus the activations needed by [`EncoderState::backward`].
    pub fn forward(&self, seq: &MultimodalSequence) -> Result<(Embedding, ForwardCache)> {
        let (e, cache) = self.run(seq, true)?;
        Ok((Embedding(e), cache.expect("cache requested")))
    }

    /// Final-norm hidden states for every position (`len x dim`, row-major).
    pub fn hidden_states(&self, seq: &MultimodalSequence) -> Result<Vec<f32>> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.hidden_states_avx2(seq) };
        }
        self.hidden_states_impl(seq)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn hidden_states_avx2(&self, seq: &MultimodalSequence) -> Result<Vec<f32>> {
        self.hidden_states_impl(seq)
    }

    #[inline(always)]
    fn hidden_states_impl(&self, seq: &MultimodalSequence) -> Result<Vec<f32>> {
        let len = self.check(seq)?;
        let d = self.config.dim;
        let mut x = self.input_rows(seq, len);
        for l in 0..self.config.layers {
            x = self.block_forward(l, &x, len, 0).0;
        }
        let mut xhat = vec![0f32; len * d];
        let mut rstd = vec![0f32; len];
        let mut out = vec![0f32; len * d];
        layer_norm(
            &x,
            d,
            &self.weights.lnf_g,
            &self.weights.lnf_b,
            &mut xhat,
            &mut rstd,
            &mut out,
        );
        Ok(out)
    }

    /// Accumulates into `grads` the gradient of `dot(d_embedding, embedding)`
    /// with respect to the trainable weights.
    pub fn backward(&self, cache: &ForwardCache, d_embedding: &[f32], grads: &mut Weights) {
        self.backward_with(&self.transposed_weights(), cache, d_embedding, grads);
    }

    /// Transposed weight matrices used by the backward pass. Building them
    /// once and reusing them across a batch avoids redoing the work per
    /// sequence.
    pub fn transposed_weights(&self) -> TransposedWeights {
        let (d, fd) = (self.config.dim, self.config.ffn_dim());
        TransposedWeights {
            blocks: self
                .weights
                .blocks
                .iter()
                .map(|b| {
                    [
                        transpose(&b.w_qkv, d, 3 * d),
                        transpose(&b.w_o, d, d),
                        transpose(&b.w_fc, d, fd),
                        transpose(&b.w_proj, fd, d),
                    ]
                })
                .collect(),
        }
    }

    /// [`EncoderState::backward`] with precomputed transposes, which must
    /// come from the current weights.
    pub fn backward_with(
        &self,
        wt: &TransposedWeights,
        cache: &ForwardCache,
        d_embedding: &[f32],
        grads: &mut Weights,
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.backward_avx2(wt, cache, d_embedding, grads) };
        }
        self.backward_impl(wt, cache, d_embedding, grads)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx2(
        &self,
        wt: &TransposedWeights,
        cache: &ForwardCache,
        d_embedding: &[f32],
        grads: &mut Weights,
    ) {
        self.backward_impl(wt, cache, d_embedding, grads)
    }

    #[inline(always)]
    fn backward_impl(&self, wt: &TransposedWeights, cache: &ForwardCache, d_embedding: &[f32], grads: &mut Weights) {
        let cfg = &self.config;
        let (d, fd, nh, hd) = (cfg.dim, cfg.ffn_dim(), cfg.heads, cfg.head_dim());
        let len = cache.len;

        let mut dx = vec![0f32; d];
        layer_norm_backward(
            d_embedding,
            &cache.xhat_f,
            &[cache.rstd_f],
            &self.weights.lnf_g,
            d,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
            &mut dx,
        );

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let blk = &self.weights.blocks[l];
            let [wt_qkv, wt_o, wt_fc, wt_proj] = &wt.blocks[l];
            let g = &mut grads.blocks[l];
            let start = lc.start;
            let rows = len - start;

            // feed-forward
            let mut dx_mid = dx.clone();
            acc_at_b(&lc.h, fd, &dx, d, &mut g.w_proj);
            acc_rows(&dx, d, &mut g.b_proj);
            let mut du = vec![0f32; rows * fd];
            matmul(&dx, d, wt_proj, fd, &mut du);
            for ((v, &u), &t) in du.iter_mut().zip(&lc.u).zip(&lc.t) {
                *v *= gelu_grad(u, t);
            }
            acc_at_b(&lc.c, d, &du, fd, &mut g.w_fc);
            acc_rows(&du, fd, &mut g.b_fc);
            let mut dc = vec![0f32; rows * d];
            matmul(&du, fd, wt_fc, d, &mut dc);
            layer_norm_backward(
                &dc,
                &lc.xhat2,
                &lc.rstd2,
                &blk.ln2_g,
                d,
                &mut g.ln2_g,
                &mut g.ln2_b,
                &mut dx_mid,
            );

            // attention
            let mut dx_in = vec![0f32; len * d];
            dx_in[start * d..].copy_from_slice(&dx_mid);
            acc_at_b(&lc.y, d, &dx_mid, d, &mut g.w_o);
            acc_rows(&dx_mid, d, &mut g.b_o);
            let mut dy = vec![0f32; rows * d];
            matmul(&dx_mid, d, wt_o, d, &mut dy);

            let scale = 1.0 / (hd as f32).sqrt();
            let mut dqkv = vec![0f32; len * 3 * d];
            let mut dp = vec![0f32; len];
            for i in start..len {
                let r = i - start;
                for h in 0..nh {
                    let p = &lc.probs[(r * nh + h) * len..(r * nh + h + 1) * len];
                    let dyh = &dy[r * d + h * hd..r * d + (h + 1) * hd];
                    let mut weighted = 0f32;
                    for j in 0..=i {
                        let vo = j * 3 * d + 2 * d + h * hd;
                        dp[j] = dot(dyh, &lc.qkv[vo..vo + hd]);
                        weighted += p[j] * dp[j];
                        axpy(p[j], dyh, &mut dqkv[vo..vo + hd]);
                    }
                    let qo = i * 3 * d + h * hd;
                    let q = &lc.qkv[qo..qo + hd];
                    let mut dq = vec![0f32; hd];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = j * 3 * d + d + h * hd;
                        axpy(ds, &lc.qkv[ko..ko + hd], &mut dq);
                        axpy(ds, q, &mut dqkv[ko..ko + hd]);
                    }
                    for (a, b) in dqkv[qo..qo + hd].iter_mut().zip(&dq) {
                        *a += b;
                    }
                }
            }
            acc_at_b(&lc.a, d, &dqkv, 3 * d, &mut g.w_qkv);
            acc_rows(&dqkv, 3 * d, &mut g.b_qkv);
            let mut da = vec![0f32; len * d];
            matmul(&dqkv, 3 * d, wt_qkv, d, &mut da);
            layer_norm_backward(
                &da,
                &lc.xhat1,
                &lc.rstd1,
                &blk.ln1_g,
                d,
                &mut g.ln1_g,
                &mut g.ln1_b,
                &mut dx_in,
            );
            dx = dx_in;
        }

        for (gp, v) in grads.pos_emb[..len * d].iter_mut().zip(&dx) {
            *gp += v;
        }
    }
}
