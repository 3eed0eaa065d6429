//! Contrastive training with in-batch and hard negatives.
//!
//! For anchors `h_i`, positives `p_j` and hard negatives `n_j` the per-anchor
//! loss is
//!
//! ```text
//! -log( exp(cos(h_i, p_i)/tau) / sum_j [exp(cos(h_i, p_j)/tau) + exp(cos(h_i, n_j)/tau)] )
//! ```
//!
//! with `j` over the whole batch (own positive and negative included), and
//! the batch loss is the mean over anchors.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, ForwardCache, Weights};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::prompting::{render_prompt, ByteTokenizer, GridPatcher, MultimodalSequence, PromptCatalog};
use crate::render::ImageBuffer;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

impl Triplet {
    pub fn new(anchor: impl Into<String>, positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let t = Self {
            anchor: anchor.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        if t.anchor.is_empty() || t.positive.is_empty() || t.negative.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(t)
    }
}

/// Image anchor with caption positive and hard-negative caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextTriplet {
    pub image: ImageBuffer,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Array2<f64>,
}

impl TripletBatch {
    pub fn new(anchors: Array2<f64>, positives: Array2<f64>, negatives: Array2<f64>) -> Result<Self> {
        let (n, d) = anchors.dim();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        for m in [&positives, &negatives] {
            if m.nrows() != n {
                return Err(Error::LengthMismatch(n, m.nrows()));
            }
            if m.ncols() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: m.ncols(),
                });
            }
        }
        if [&anchors, &positives, &negatives]
            .iter()
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            anchors,
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            batch_size: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Template used for text inputs.
    pub prompt: String,
    /// Template used for image anchors in multimodal training.
    pub image_prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            prompt: "text_oneword".into(),
            image_prompt: "image_oneword".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.loss.validate()
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut sum = 0.0;
        for (i, l) in self.losses.iter().enumerate() {
            sum += l;
            if i >= w {
                sum -= self.losses[i - w];
            }
            out.push(sum / (i + 1).min(w) as f64);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, l);
        }
        s
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    cosine64(
        &a.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        &b.iter().map(|&x| x as f64).collect::<Vec<_>>(),
    )
}

fn cosine64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Unit rows and their original norms.
fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        if !n.is_finite() {
            return Err(Error::NonFinite);
        }
        row /= n;
        norms.push(n);
    }
    Ok((unit, norms))
}

struct Scored {
    unit_h: Array2<f64>,
    unit_p: Array2<f64>,
    unit_n: Array2<f64>,
    norms: [Vec<f64>; 3],
    /// `N x 2N`: cosines to positives then negatives.
    cos: Array2<f64>,
    /// Row-wise softmax of `cos / tau`.
    prob: Array2<f64>,
    loss: f64,
}

fn score(batch: &TripletBatch, cfg: &LossConfig) -> Result<Scored> {
    cfg.validate()?;
    let n = batch.len();
    let (unit_h, nh) = normalize_rows(&batch.anchors)?;
    let (unit_p, np) = normalize_rows(&batch.positives)?;
    let (unit_n, nn) = normalize_rows(&batch.negatives)?;
    let mut cos = Array2::zeros((n, 2 * n));
    cos.slice_mut(ndarray::s![.., ..n]).assign(&unit_h.dot(&unit_p.t()));
    cos.slice_mut(ndarray::s![.., n..]).assign(&unit_h.dot(&unit_n.t()));
    if cos.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite);
    }
    let mut prob = Array2::zeros((n, 2 * n));
    let mut loss = 0.0;
    for i in 0..n {
        let logits = cos.row(i).mapv(|c| c / cfg.tau);
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[i];
        for j in 0..2 * n {
            prob[[i, j]] = (logits[j] - lse).exp();
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(Scored {
        unit_h,
        unit_p,
        unit_n,
        norms: [nh, np, nn],
        cos,
        prob,
        loss,
    })
}

pub fn info_nce_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(score(batch, cfg)?.loss)
}

/// Loss and its gradients with respect to anchors, positives and negatives.
pub fn info_nce_loss_and_grad(batch: &TripletBatch, cfg: &LossConfig) -> Result<(f64, [Array2<f64>; 3])> {
    let s = score(batch, cfg)?;
    let n = batch.len();
    let d = batch.anchors.ncols();
    let mut dh = Array2::zeros((n, d));
    let mut dp = Array2::zeros((n, d));
    let mut dn = Array2::zeros((n, d));
    let inv = 1.0 / (n as f64 * cfg.tau);
    // d cos(a, b) / da = (b_unit - cos * a_unit) / |a|
    let dcos = |a: ArrayView1<f64>, b: ArrayView1<f64>, c: f64, na: f64| (&b - &(&a * c)) / na;
    for i in 0..n {
        let hi = s.unit_h.row(i);
        for j in 0..2 * n {
            let g = (s.prob[[i, j]] - if j == i { 1.0 } else { 0.0 }) * inv;
            if g == 0.0 {
                continue;
            }
            let c = s.cos[[i, j]];
            let (other, norm_o, target) = if j < n {
                (s.unit_p.row(j), s.norms[1][j], &mut dp)
            } else {
                (s.unit_n.row(j - n), s.norms[2][j - n], &mut dn)
            };
            let row = j % n;
            dh.row_mut(i).scaled_add(g, &dcos(hi, other, c, s.norms[0][i]));
            target.row_mut(row).scaled_add(g, &dcos(other, hi, c, norm_o));
        }
    }
    Ok((s.loss, [dh, dp, dn]))
}

pub fn info_nce_grad(batch: &TripletBatch, cfg: &LossConfig) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let (_, [dh, dp, dn]) = info_nce_loss_and_grad(batch, cfg)?;
    Ok((dh, dp, dn))
}

struct AdamW {
    m: Weights,
    v: Weights,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(like: &Weights) -> Self {
        let mut m = like.clone();
        for t in m.tensors_mut() {
            t.fill(0.0);
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut Weights, grads: &Weights, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + weight_decay * p[i] as f64;
                p[i] -= (lr * update) as f32;
            }
        }
    }
}

/// Unique-sequence gradient accumulation chunk; fixed so that the summation
/// order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// Trains on pre-rendered sequences; `triplets` index into `seqs`.
fn train_sequences(
    mut encoder: EncoderState,
    seqs: &[MultimodalSequence],
    triplets: &[[usize; 3]],
    cfg: &TrainConfig,
    exec: Execution,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<(EncoderState, LossCurve)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.loss.batch_size.min(triplets.len());
    let mut opt = AdamW::new(&encoder.weights);
    let mut curve = LossCurve::default();
    let d = encoder.config.dim;

    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(triplets[order[cursor]]);
            cursor += 1;
        }
        // embed each distinct sequence once
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut unique = Vec::new();
        for t in &picked {
            for &s in t {
                slot.entry(s).or_insert_with(|| {
                    unique.push(s);
                    unique.len() - 1
                });
            }
        }
        let enc = &encoder;
        let forwards: Vec<(Vec<f32>, ForwardCache)> =
            par::map(exec, &unique, |_, &s| enc.forward(&seqs[s]).map(|(e, c)| (e.0, c)))
                .into_iter()
                .enumerate()
                .map(|(i, r)| r.map_err(|e| Error::at(unique[i], e)))
                .collect::<Result<_>>()?;

        let gather = |k: usize| Array2::from_shape_fn((batch, d), |(i, j)| forwards[slot[&picked[i][k]]].0[j] as f64);
        let tb = TripletBatch::new(gather(0), gather(1), gather(2))?;
        let (loss, grads) = info_nce_loss_and_grad(&tb, &cfg.loss)?;
        curve.losses.push(loss);
        observer(curve.losses.len(), loss);

        let mut d_emb = vec![vec![0f32; d]; unique.len()];
        for (k, g) in grads.iter().enumerate() {
            for (i, row) in g.rows().into_iter().enumerate() {
                let target = &mut d_emb[slot[&picked[i][k]]];
                for (t, v) in target.iter_mut().zip(row) {
                    *t += *v as f32;
                }
            }
        }

        let chunks: Vec<usize> = (0..unique.len()).step_by(GRAD_CHUNK).collect();
        let wt = enc.transposed_weights();
        let partial = par::map(exec, &chunks, |_, &start| {
            let mut g = Weights::zeros(&enc.config);
            for u in start..(start + GRAD_CHUNK).min(unique.len()) {
                enc.backward_with(&wt, &forwards[u].1, &d_emb[u], &mut g);
            }
            g
        });
        let mut total = Weights::zeros(&encoder.config);
        for g in &partial {
            total.add_assign(g);
        }
        opt.step(&mut encoder.weights, &total, cfg.learning_rate, cfg.weight_decay);
        if !encoder.weights.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    Ok((encoder, curve))
}

/// First-seen order of distinct strings.
#[derive(Default)]
struct Interner<'a> {
    index: HashMap<&'a str, usize>,
    items: Vec<&'a str>,
}

impl<'a> Interner<'a> {
    fn id(&mut self, s: &'a str) -> usize {
        let next = self.items.len();
        let id = *self.index.entry(s).or_insert(next);
        if id == next {
            self.items.push(s);
        }
        id
    }
}

fn text_sequences(
    texts: &[&str],
    catalog: &PromptCatalog,
    prompt: &str,
    patch_size: usize,
) -> Result<Vec<MultimodalSequence>> {
    let template = catalog.get(prompt)?;
    if !template.has_text() || template.has_image() {
        return Err(Error::InvalidConfig(format!(
            "training prompt `{prompt}` must contain <text> and no <image>"
        )));
    }
    let patcher = GridPatcher { patch_size };
    texts
        .iter()
        .map(|t| render_prompt(template, Some(t), None, &ByteTokenizer, &patcher))
        .collect()
}

fn patch_side(encoder: &EncoderState) -> usize {
    (encoder.config.patch_features as f64).sqrt().round() as usize
}

/// Text-only contrastive training: every input goes through the text
/// prompt, no image reaches the encoder.
pub fn train(
    encoder: EncoderState,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    catalog: &PromptCatalog,
) -> Result<(EncoderState, LossCurve)> {
    train_with(Execution::default(), encoder, triplets, cfg, catalog)
}

pub fn train_with(
    exec: Execution,
    encoder: EncoderState,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    catalog: &PromptCatalog,
) -> Result<(EncoderState, LossCurve)> {
    train_observed(exec, encoder, triplets, cfg, catalog, &mut |_, _| {})
}

/// [`train_with`] that reports `(step, loss)` after every step.
pub fn train_observed(
    exec: Execution,
    encoder: EncoderState,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    catalog: &PromptCatalog,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<(EncoderState, LossCurve)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut texts = Interner::default();
    let idx: Vec<[usize; 3]> = triplets
        .iter()
        .map(|t| [texts.id(&t.anchor), texts.id(&t.positive), texts.id(&t.negative)])
        .collect();
    let texts = texts.items;
    let seqs = text_sequences(&texts, catalog, &cfg.prompt, patch_side(&encoder))?;
    train_sequences(encoder, &seqs, &idx, cfg, exec, observer)
}

/// Image-anchored training: anchors through `cfg.image_prompt`, captions
/// through `cfg.prompt`. The projector stays frozen.
pub fn train_multimodal(
    encoder: EncoderState,
    examples: &[ImageTextTriplet],
    cfg: &TrainConfig,
    catalog: &PromptCatalog,
) -> Result<(EncoderState, LossCurve)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let image_t = catalog.get(&cfg.image_prompt)?;
    if !image_t.has_image() || image_t.has_text() {
        return Err(Error::InvalidConfig(format!(
            "image prompt `{}` must contain <image> and no <text>",
            cfg.image_prompt
        )));
    }
    let patcher = GridPatcher {
        patch_size: patch_side(&encoder),
    };
    let mut seqs = Vec::new();
    let mut images: Vec<&ImageBuffer> = Vec::new();
    let mut image_ids = Vec::new();
    for ex in examples {
        let id = match images.iter().position(|i| *i == &ex.image) {
            Some(i) => i,
            None => {
                images.push(&ex.image);
                seqs.push(render_prompt(image_t, None, Some(&ex.image), &ByteTokenizer, &patcher)?);
                images.len() - 1
            }
        };
        image_ids.push(id);
    }
    let offset = seqs.len();
    let mut texts = Interner::default();
    let idx: Vec<[usize; 3]> = examples
        .iter()
        .zip(&image_ids)
        .map(|(ex, &img)| [img, offset + texts.id(&ex.positive), offset + texts.id(&ex.negative)])
        .collect();
    let texts = texts.items;
    seqs.extend(text_sequences(&texts, catalog, &cfg.prompt, patcher.patch_size)?);
    train_sequences(encoder, &seqs, &idx, cfg, Execution::default(), &mut |_, _| {})
}
