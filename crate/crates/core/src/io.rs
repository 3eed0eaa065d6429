//! Persistence: embedding dumps, checkpoints, run configs, triplet files and
//! retrieval manifests.
//!
//! All binary formats are little-endian. Writers go through a temporary file
//! in the destination directory followed by a rename, so readers never see a
//! half-written file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Deserialize;

use crate::encoder::{EncoderConfig, EncoderState, ProjectorMode, Weights};
use crate::error::{Error, Result};
use crate::render::RenderSpec;
use crate::trainer::{LossConfig, TrainConfig, Triplet};

pub const DUMP_MAGIC: [u8; 4] = *b"E5VE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"E5VC";
pub const FORMAT_VERSION: u32 = 1;
pub const DUMP_HEADER_LEN: usize = 20;

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Sequential little-endian reader that reports short input as truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::TruncatedFile(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.at,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::TruncatedFile(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32("version")? {
            FORMAT_VERSION => Ok(()),
            v => Err(Error::VersionUnsupported(v)),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::InconsistentInput(format!("{what} {v} does not fit in memory")))
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

// ---------------------------------------------------------------------------
// embedding dumps

/// Rows of embeddings with one unique string id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub rows: Array2<f32>,
    pub ids: Vec<String>,
}

impl EmbeddingDump {
    pub fn new(rows: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        if rows.nrows() != ids.len() {
            return Err(Error::InconsistentInput(format!(
                "{} rows but {} ids",
                rows.nrows(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InconsistentInput(format!("duplicate id `{dup}`")));
        }
        Ok(Self { rows, ids })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Id to row index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (count, dim) = self.rows.dim();
        let blob: usize = self.ids.iter().map(String::len).sum();
        let mut out = Vec::with_capacity(DUMP_HEADER_LEN + count * dim * 4 + 8 * (count + 1) + blob);
        out.extend_from_slice(&DUMP_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        match self.rows.as_slice() {
            Some(s) => push_f32s(&mut out, s),
            None => push_f32s(&mut out, &self.rows.iter().copied().collect::<Vec<_>>()),
        }
        let mut offset = 0u64;
        out.extend_from_slice(&offset.to_le_bytes());
        for id in &self.ids {
            offset += id.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        c.magic(DUMP_MAGIC)?;
        c.version()?;
        let dim = c.u32("dim")? as usize;
        let count = to_usize(c.u64("count")?, "count")?;
        let payload = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::InconsistentInput(format!("{count} x {dim} overflows")))?;
        // check the whole fixed-size part before allocating anything
        let table = count
            .checked_add(1)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::InconsistentInput(format!("count {count} overflows")))?;
        if c.remaining() < payload + table {
            return Err(Error::TruncatedFile(format!(
                "header promises {count} x {dim} rows plus id table ({} bytes), {} present",
                payload + table,
                c.remaining()
            )));
        }
        let data = c.f32s(count * dim, "rows")?;
        let mut offsets = Vec::with_capacity(count + 1);
        for _ in 0..=count {
            offsets.push(to_usize(c.u64("id offsets")?, "id offset")?);
        }
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InconsistentInput("id offsets are not ascending from 0".into()));
        }
        let blob_len = offsets[count];
        let blob = c.take(blob_len, "id blob")?;
        if c.remaining() != 0 {
            return Err(Error::InconsistentInput(format!("{} trailing bytes", c.remaining())));
        }
        let ids = offsets
            .windows(2)
            .map(|w| {
                std::str::from_utf8(&blob[w[0]..w[1]])
                    .map(str::to_owned)
                    .map_err(|_| Error::InconsistentInput("id is not valid UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = Array2::from_shape_vec((count, dim), data).expect("length checked");
        Self::new(rows, ids)
    }
}

pub fn write_dump(path: &Path, rows: &Array2<f32>, ids: &[String]) -> Result<()> {
    let dump = EmbeddingDump::new(rows.clone(), ids.to_vec())?;
    write_atomic(path, &dump.to_bytes())
}

pub fn read_dump(path: &Path) -> Result<EmbeddingDump> {
    EmbeddingDump::from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// checkpoints

/// Set in the checkpoint header: embeddings are read after the final norm.
const POOL_AFTER_FINAL_NORM: u8 = 1;

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(state: &EncoderState) -> Vec<u8> {
    let cfg = &state.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.dim,
        cfg.layers,
        cfg.heads,
        cfg.vocab,
        cfg.max_seq,
        cfg.patch_features,
    ] {
        push_u32(&mut out, v);
    }
    let (kind, pseed) = match cfg.projector {
        ProjectorMode::Random(s) => (0u8, s),
        ProjectorMode::Oracle => (1u8, 0),
    };
    out.push(kind);
    out.extend_from_slice(&pseed.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.push(POOL_AFTER_FINAL_NORM);

    let mut params: Vec<(String, Vec<usize>, &[f32])> = vec![
        ("tok_emb".into(), vec![cfg.vocab, cfg.dim], &state.tok_emb),
        ("projector".into(), vec![cfg.patch_features, cfg.dim], &state.projector),
    ];
    for ((name, shape), t) in Weights::layout(cfg).into_iter().zip(state.weights.tensors()) {
        params.push((name, shape, t));
    }
    push_u32(&mut out, params.len());
    for (name, shape, data) in params {
        push_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, shape.len());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        push_f32s(&mut out, data);
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<EncoderState> {
    let mut c = Cursor::new(buf);
    c.magic(CHECKPOINT_MAGIC)?;
    c.version()?;
    let mut dims = [0usize; 6];
    for (d, what) in dims
        .iter_mut()
        .zip(["dim", "layers", "heads", "vocab", "max_seq", "patch_features"])
    {
        *d = c.u32(what)? as usize;
    }
    let kind = c.u8("projector kind")?;
    let pseed = c.u64("projector seed")?;
    let projector = match kind {
        0 => ProjectorMode::Random(pseed),
        1 => ProjectorMode::Oracle,
        k => return Err(Error::InconsistentInput(format!("unknown projector kind {k}"))),
    };
    let seed = c.u64("seed")?;
    if c.u8("pooling flag")? != POOL_AFTER_FINAL_NORM {
        return Err(Error::InconsistentInput(
            "checkpoint pools before the final norm".into(),
        ));
    }
    let config = EncoderConfig {
        dim: dims[0],
        layers: dims[1],
        heads: dims[2],
        vocab: dims[3],
        max_seq: dims[4],
        patch_features: dims[5],
        projector,
    };
    config.validate()?;

    let n = c.u32("parameter count")? as usize;
    let mut blobs: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..n {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::InconsistentInput("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(to_usize(c.u64("shape")?, "shape")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::InconsistentInput(format!("`{name}` shape overflows")))?;
        if numel.saturating_mul(4) > c.remaining() {
            return Err(Error::TruncatedFile(format!("parameter `{name}`")));
        }
        let data = c.f32s(numel, &name)?;
        if blobs.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::InconsistentInput(format!("parameter `{name}` repeated")));
        }
    }
    if c.remaining() != 0 {
        return Err(Error::InconsistentInput(format!("{} trailing bytes", c.remaining())));
    }

    let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
        match blobs.remove(name) {
            Some((s, data)) if s == shape => Ok(data),
            Some((s, _)) => Err(Error::InconsistentInput(format!(
                "`{name}` has shape {s:?}, expected {shape:?}"
            ))),
            None => Err(Error::InconsistentInput(format!("parameter `{name}` missing"))),
        }
    };
    let tok_emb = take("tok_emb", vec![config.vocab, config.dim])?;
    let projector = take("projector", vec![config.patch_features, config.dim])?;
    let mut weights = Weights::zeros(&config);
    for ((name, shape), t) in Weights::layout(&config).into_iter().zip(weights.tensors_mut()) {
        *t = take(&name, shape)?;
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::InconsistentInput(format!("unexpected parameter `{extra}`")));
    }
    Ok(EncoderState {
        config,
        tok_emb,
        projector,
        weights,
        seed,
    })
}

pub fn write_checkpoint(path: &Path, state: &EncoderState) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(state))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderState> {
    checkpoint_from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// run configs

/// Every tunable of a run in one flat `key=value` document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub render: RenderSpec,
}

impl RunConfig {
    /// `key=value` lines in a fixed order. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_document(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let r = &self.render;
        let projector = match e.projector {
            ProjectorMode::Oracle => "oracle".to_string(),
            ProjectorMode::Random(s) => format!("random:{s}"),
        };
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.vocab", e.vocab.to_string()),
            ("encoder.max_seq", e.max_seq.to_string()),
            ("encoder.patch_features", e.patch_features.to_string()),
            ("encoder.projector", projector),
            ("train.steps", t.steps.to_string()),
            ("train.learning_rate", format!("{:?}", t.learning_rate)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.seed", t.seed.to_string()),
            ("train.prompt", t.prompt.clone()),
            ("train.image_prompt", t.image_prompt.clone()),
            ("loss.tau", format!("{:?}", t.loss.tau)),
            ("loss.batch_size", t.loss.batch_size.to_string()),
            ("render.image_width", r.image_width.to_string()),
            ("render.image_height", r.image_height.to_string()),
            ("render.font_size", r.font_size.to_string()),
            ("render.pad_left", r.pad_left.to_string()),
            ("render.glyph_width", r.glyph_width.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses a document produced by [`RunConfig::to_document`]. Missing keys
    /// keep their defaults; blank lines and `#` comments are ignored.
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let Some((key, value)) = line.split_once('=') else {
                errors.push(err(format!("expected key=value, got `{line}`")));
                continue;
            };
            if let Err(m) = cfg.set(key.trim(), value.trim()) {
                errors.push(err(m));
            }
        }
        match errors.len() {
            0 => Ok(cfg),
            1 => Err(errors.pop().unwrap()),
            _ => Err(Error::Many(errors)),
        }
    }

    /// Sets one field from its document key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        let (e, t, r) = (&mut self.encoder, &mut self.train, &mut self.render);
        match key {
            "seed" => self.seed = num(key, value)?,
            "encoder.dim" => e.dim = num(key, value)?,
            "encoder.layers" => e.layers = num(key, value)?,
            "encoder.heads" => e.heads = num(key, value)?,
            "encoder.vocab" => e.vocab = num(key, value)?,
            "encoder.max_seq" => e.max_seq = num(key, value)?,
            "encoder.patch_features" => e.patch_features = num(key, value)?,
            "encoder.projector" => {
                e.projector = match value.split_once(':') {
                    None if value == "oracle" => ProjectorMode::Oracle,
                    Some(("random", s)) => ProjectorMode::Random(num(key, s)?),
                    _ => return Err(format!("bad projector `{value}` (oracle | random:SEED)")),
                }
            }
            "train.steps" => t.steps = num(key, value)?,
            "train.learning_rate" => t.learning_rate = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "train.prompt" => t.prompt = value.to_string(),
            "train.image_prompt" => t.image_prompt = value.to_string(),
            "loss.tau" => {
                t.loss = LossConfig {
                    tau: num(key, value)?,
                    ..t.loss
                }
            }
            "loss.batch_size" => t.loss.batch_size = num(key, value)?,
            "render.image_width" => r.image_width = num(key, value)?,
            "render.image_height" => r.image_height = num(key, value)?,
            "render.font_size" => r.font_size = num(key, value)?,
            "render.pad_left" => r.pad_left = num(key, value)?,
            "render.glyph_width" => r.glyph_width = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.render.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// triplets

/// Tab-separated `anchor<TAB>positive<TAB>negative` lines. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_triplets(src: &str, origin: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let res = match cols.as_slice() {
            [a, p, n] => Triplet::new(*a, *p, *n).map_err(|e| e.to_string()),
            _ => Err(format!("expected 3 tab-separated fields, got {}", cols.len())),
        };
        match res {
            Ok(t) => out.push(t),
            Err(message) => errors.push(Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            }),
        }
    }
    match errors.len() {
        0 => Ok(out),
        1 => Err(errors.pop().unwrap()),
        _ => Err(Error::Many(errors)),
    }
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&src, &path.display().to_string())
}

pub fn triplets_to_tsv(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.anchor, t.positive, t.negative))
        .collect()
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
    Pair,
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    dataset: String,
    role: Role,
    id: String,
    #[serde(default)]
    modality: Option<Modality>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    render: bool,
    #[serde(default)]
    dump_id: Option<String>,
    #[serde(default)]
    relevant: Vec<String>,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    text_b: Option<String>,
    #[serde(default)]
    dump_id_b: Option<String>,
    #[serde(default)]
    gold: Option<f64>,
}

/// Where an image comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// PGM file, resolved against the manifest's directory.
    File(PathBuf),
    /// Caption drawn with the text renderer.
    Rendered(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Media {
    Text(String),
    Image(ImageSource),
    Composed { image: ImageSource, text: String },
}

impl Media {
    pub fn modality(&self) -> Modality {
        match self {
            Media::Text(_) => Modality::Text,
            Media::Image(_) => Modality::Image,
            Media::Composed { .. } => Modality::Composed,
        }
    }
}

/// A query, gallery item or pair side: inline media, a dump row, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub id: String,
    pub media: Option<Media>,
    pub dump_id: Option<String>,
    /// Template override; `None` uses the default for the modality.
    pub prompt: Option<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSpec {
    pub dataset: String,
    pub queries: Vec<ManifestItem>,
    pub gallery: Vec<ManifestItem>,
    /// Gallery indices relevant to each query.
    pub relevance: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub a: ManifestItem,
    pub b: ManifestItem,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsSpec {
    pub dataset: String,
    pub pairs: Vec<StsPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestTask {
    Retrieval(RetrievalSpec),
    Sts(StsSpec),
}

impl ManifestTask {
    pub fn dataset(&self) -> &str {
        match self {
            ManifestTask::Retrieval(r) => &r.dataset,
            ManifestTask::Sts(s) => &s.dataset,
        }
    }
}

fn media_of(rec: &Record, base: &Path) -> std::result::Result<Option<Media>, String> {
    let image = |rec: &Record| -> std::result::Result<Option<ImageSource>, String> {
        match (&rec.image, rec.render, &rec.text) {
            (Some(p), false, _) => Ok(Some(ImageSource::File(base.join(p)))),
            (None, true, Some(t)) => Ok(Some(ImageSource::Rendered(t.clone()))),
            (Some(_), true, _) => Err("`render` draws `text`; do not also give `image`".into()),
            (None, true, None) => Err("`render` needs `text`".into()),
            (None, false, _) => Ok(None),
        }
    };
    let modality = rec.modality.unwrap_or(Modality::Text);
    Ok(match modality {
        Modality::Text => rec.text.clone().map(Media::Text),
        Modality::Image => image(rec)?.map(Media::Image),
        Modality::Composed => match (&rec.image, &rec.text) {
            (Some(p), Some(t)) => Some(Media::Composed {
                image: ImageSource::File(base.join(p)),
                text: t.clone(),
            }),
            (None, None) => None,
            _ => return Err("composed records need both `image` and `text`".into()),
        },
    })
}

/// Parses a JSON-lines manifest. Records are grouped by `dataset` in order of
/// first appearance; a dataset holds either query/gallery records or pair
/// records. All problems are reported together, each with its line number.
pub fn parse_manifest(src: &str, origin: &str, base: &Path) -> Result<Vec<ManifestTask>> {
    struct Group {
        queries: Vec<(ManifestItem, Vec<String>)>,
        gallery: Vec<ManifestItem>,
        pairs: Vec<StsPair>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Group> = HashMap::new();
    let mut errors = Vec::new();
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => {
                errors.push(perr(line, e.to_string()));
                continue;
            }
        };
        let media = match media_of(&rec, base) {
            Ok(m) => m,
            Err(m) => {
                errors.push(perr(line, m));
                continue;
            }
        };
        if media.is_none() && rec.dump_id.is_none() {
            errors.push(Error::MissingPayload(format!("{} (line {line})", rec.id)));
            continue;
        }
        let item = ManifestItem {
            id: rec.id.clone(),
            media,
            dump_id: rec.dump_id.clone(),
            prompt: rec.prompt.clone(),
            line,
        };
        let group = groups.entry(rec.dataset.clone()).or_insert_with(|| {
            order.push(rec.dataset.clone());
            Group {
                queries: Vec::new(),
                gallery: Vec::new(),
                pairs: Vec::new(),
            }
        });
        match rec.role {
            Role::Query => group.queries.push((item, rec.relevant.clone())),
            Role::Gallery => group.gallery.push(item),
            Role::Pair => {
                let Some(gold) = rec.gold else {
                    errors.push(perr(line, "pair record needs `gold`".into()));
                    continue;
                };
                if rec.text_b.is_none() && rec.dump_id_b.is_none() {
                    errors.push(Error::MissingPayload(format!("{}/b (line {line})", rec.id)));
                    continue;
                }
                let b = ManifestItem {
                    id: format!("{}/b", rec.id),
                    media: rec.text_b.clone().map(Media::Text),
                    dump_id: rec.dump_id_b.clone(),
                    prompt: rec.prompt.clone(),
                    line,
                };
                group.pairs.push(StsPair { a: item, b, gold });
            }
        }
    }

    let mut tasks = Vec::new();
    for name in order {
        let g = groups.remove(&name).expect("grouped");
        let is_retrieval = !g.queries.is_empty() || !g.gallery.is_empty();
        if is_retrieval && !g.pairs.is_empty() {
            let line = g.pairs[0].a.line;
            errors.push(perr(
                line,
                format!("dataset `{name}` mixes pair records with query/gallery records"),
            ));
            continue;
        }
        if !is_retrieval {
            tasks.push(ManifestTask::Sts(StsSpec {
                dataset: name,
                pairs: g.pairs,
            }));
            continue;
        }
        let mut index = HashMap::new();
        for (gi, item) in g.gallery.iter().enumerate() {
            if index.insert(item.id.as_str(), gi).is_some() {
                errors.push(perr(item.line, format!("duplicate gallery id `{}`", item.id)));
            }
        }
        let mut relevance = Vec::with_capacity(g.queries.len());
        let mut ok = true;
        for (q, rel) in &g.queries {
            if rel.is_empty() {
                errors.push(perr(q.line, format!("query `{}` lists no relevant ids", q.id)));
                ok = false;
                continue;
            }
            let mut idx = Vec::with_capacity(rel.len());
            for r in rel {
                match index.get(r.as_str()) {
                    Some(&gi) => idx.push(gi),
                    None => {
                        errors.push(perr(
                            q.line,
                            format!("relevant id `{r}` is not in the gallery of `{name}`"),
                        ));
                        ok = false;
                    }
                }
            }
            relevance.push(idx);
        }
        if ok {
            tasks.push(ManifestTask::Retrieval(RetrievalSpec {
                dataset: name,
                queries: g.queries.into_iter().map(|(q, _)| q).collect(),
                gallery: g.gallery,
                relevance,
            }));
        }
    }
    match errors.len() {
        0 => Ok(tasks),
        1 => Err(errors.pop().unwrap()),
        _ => Err(Error::Many(errors)),
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestTask>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&src, &path.display().to_string(), base)
}
