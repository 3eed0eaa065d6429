//! End-to-end evaluation over manifests: embed (or look up dump rows), rank,
//! score.
//!
//! Each item is embedded from its dump row when a dump is supplied and the
//! item names one; otherwise it is rendered through its prompt and encoded.
//! Default prompts per modality are `text_oneword`, `image_oneword` and
//! `cirr_composed`; a record's `prompt` field overrides them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::io::{load_manifest, EmbeddingDump, ImageSource, ManifestItem, ManifestTask, Media, Modality};
use crate::par::Execution;
use crate::prompting::{render_prompt, ByteTokenizer, GridPatcher, MultimodalSequence, PromptCatalog};
use crate::render::{render_text, ImageBuffer, RenderSpec};
use crate::retrieval::{recall_at_k_with, spearman, stack, RecallReport, RetrievalTask};
use crate::trainer::cosine;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Everything needed to turn manifest items into embeddings.
pub struct EvalContext<'a> {
    pub encoder: Option<&'a EncoderState>,
    pub catalog: &'a PromptCatalog,
    pub dump: Option<&'a EmbeddingDump>,
    /// Used for captions that a manifest asks to render as images.
    pub render: RenderSpec,
    /// Requested K values; those above a gallery's size are dropped.
    pub ks: Vec<usize>,
    pub exec: Execution,
}

impl<'a> EvalContext<'a> {
    pub fn new(catalog: &'a PromptCatalog) -> Self {
        Self {
            encoder: None,
            catalog,
            dump: None,
            render: RenderSpec::default(),
            ks: DEFAULT_KS.to_vec(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TextImage,
    Composed,
    ImageImage,
    TextText,
    Sts,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::TextImage => "text-image",
            Family::Composed => "composed",
            Family::ImageImage => "image-image",
            Family::TextText => "text-text",
            Family::Sts => "sts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DatasetResult {
    Recall(RecallReport),
    Spearman(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub family: Family,
    pub result: DatasetResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ReportBundle {
    pub datasets: Vec<DatasetReport>,
}

impl ReportBundle {
    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// `dataset,metric,k,value` rows; Spearman rows leave `k` empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,metric,k,value\n");
        for d in &self.datasets {
            match &d.result {
                DatasetResult::Recall(r) => {
                    for (k, v) in r.ks.iter().zip(&r.recall) {
                        let _ = writeln!(s, "{},recall,{k},{v}", csv_field(&d.dataset));
                    }
                }
                DatasetResult::Spearman(v) => {
                    let _ = writeln!(s, "{},spearman,,{v}", csv_field(&d.dataset));
                }
            }
        }
        s
    }

    /// Aligned table with values scaled to percent.
    pub fn to_table(&self) -> String {
        let width = self.datasets.iter().map(|d| d.dataset.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:<11}  {}\n", "dataset", "family", "metrics");
        for d in &self.datasets {
            let metrics = match &d.result {
                DatasetResult::Recall(r) => {
                    r.ks.iter()
                        .zip(&r.recall)
                        .map(|(k, v)| format!("R@{k} {:6.2}", 100.0 * v))
                        .collect::<Vec<_>>()
                        .join("  ")
                }
                DatasetResult::Spearman(v) => format!("Spearman {:6.2}", 100.0 * v),
            };
            let _ = writeln!(s, "{:<width$}  {:<11}  {metrics}", d.dataset, d.family.as_str());
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn default_prompt(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text_oneword",
        Modality::Image => "image_oneword",
        Modality::Composed => "cirr_composed",
    }
}

fn load_image(src: &ImageSource, spec: &RenderSpec) -> Result<ImageBuffer> {
    match src {
        ImageSource::File(p) => ImageBuffer::read_pgm(p),
        ImageSource::Rendered(caption) => render_text(caption, spec),
    }
}

fn modality_of(item: &ManifestItem) -> Option<Modality> {
    item.media.as_ref().map(Media::modality)
}

fn family(queries: &[ManifestItem], gallery: &[ManifestItem]) -> Family {
    let all = |items: &[ManifestItem], m: Modality| items.iter().all(|i| modality_of(i) == Some(m));
    if queries.iter().any(|q| modality_of(q) == Some(Modality::Composed)) {
        Family::Composed
    } else if all(queries, Modality::Image) && all(gallery, Modality::Image) {
        Family::ImageImage
    } else if all(queries, Modality::Text) && all(gallery, Modality::Text) {
        Family::TextText
    } else {
        Family::TextImage
    }
}

impl EvalContext<'_> {
    fn sequence(&self, item: &ManifestItem, media: &Media, patch_size: usize) -> Result<MultimodalSequence> {
        let name = item.prompt.as_deref().unwrap_or(default_prompt(media.modality()));
        let template = self.catalog.get(name)?;
        let patcher = GridPatcher { patch_size };
        match media {
            Media::Text(t) => render_prompt(template, Some(t), None, &ByteTokenizer, &patcher),
            Media::Image(src) => {
                let img = load_image(src, &self.render)?;
                render_prompt(template, None, Some(&img), &ByteTokenizer, &patcher)
            }
            Media::Composed { image, text } => {
                let img = load_image(image, &self.render)?;
                render_prompt(template, Some(text), Some(&img), &ByteTokenizer, &patcher)
            }
        }
    }

    /// One embedding row per item, in order.
    pub fn embed_items(&self, items: &[ManifestItem]) -> Result<Array2<f32>> {
        let index = self.dump.map(EmbeddingDump::index);
        enum Plan<'s> {
            Dump(usize),
            Encode(&'s ManifestItem, &'s Media),
        }
        let mut plans = Vec::with_capacity(items.len());
        for item in items {
            let plan = match (&index, &item.dump_id, &item.media, self.encoder) {
                (Some(ix), Some(did), _, _) => match ix.get(did.as_str()) {
                    Some(&row) => Plan::Dump(row),
                    None => return Err(Error::MissingPayload(did.clone())),
                },
                (Some(ix), None, _, _) if ix.contains_key(item.id.as_str()) => Plan::Dump(ix[item.id.as_str()]),
                (_, _, Some(media), Some(_)) => Plan::Encode(item, media),
                _ => return Err(Error::MissingPayload(item.id.clone())),
            };
            plans.push(plan);
        }

        let mut to_encode = Vec::new();
        if let Some(enc) = self.encoder {
            let side = (enc.config.patch_features as f64).sqrt().round() as usize;
            for p in &plans {
                if let Plan::Encode(item, media) = p {
                    let seq = self.sequence(item, media, side).map_err(|e| {
                        Error::InconsistentInput(format!("item `{}` (line {}): {e}", item.id, item.line))
                    })?;
                    to_encode.push(seq);
                }
            }
        }
        let encoded = match self.encoder {
            Some(enc) if !to_encode.is_empty() => enc.encode_batch_with(self.exec, &to_encode)?,
            _ => Vec::new(),
        };
        let encoded = stack(&encoded)?;

        let dim = match (self.dump, plans.first()) {
            (Some(d), Some(Plan::Dump(_))) => d.dim(),
            _ if encoded.nrows() > 0 => encoded.ncols(),
            (Some(d), _) => d.dim(),
            _ => 0,
        };
        let mut out = Array2::zeros((items.len(), dim));
        let mut next = 0;
        for (i, p) in plans.iter().enumerate() {
            let row = match p {
                Plan::Dump(r) => self.dump.expect("dump plan").rows.row(*r),
                Plan::Encode(..) => {
                    next += 1;
                    encoded.row(next - 1)
                }
            };
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            out.row_mut(i).assign(&row);
        }
        Ok(out)
    }

    pub fn eval_task(&self, task: &ManifestTask) -> Result<DatasetReport> {
        match task {
            ManifestTask::Retrieval(spec) => {
                let q = self.embed_items(&spec.queries)?;
                let g = self.embed_items(&spec.gallery)?;
                let size = g.nrows();
                let ks: Vec<usize> = self.ks.iter().copied().filter(|&k| k >= 1 && k <= size).collect();
                let task = RetrievalTask::new(q, g, spec.relevance.clone(), ks)?;
                Ok(DatasetReport {
                    dataset: spec.dataset.clone(),
                    family: family(&spec.queries, &spec.gallery),
                    result: DatasetResult::Recall(recall_at_k_with(self.exec, &task)?),
                })
            }
            ManifestTask::Sts(spec) => {
                let a: Vec<ManifestItem> = spec.pairs.iter().map(|p| p.a.clone()).collect();
                let b: Vec<ManifestItem> = spec.pairs.iter().map(|p| p.b.clone()).collect();
                let (ea, eb) = (self.embed_items(&a)?, self.embed_items(&b)?);
                let pred = ea
                    .rows()
                    .into_iter()
                    .zip(eb.rows())
                    .map(|(x, y)| cosine(&x.to_vec(), &y.to_vec()))
                    .collect::<Result<Vec<f64>>>()?;
                let gold: Vec<f64> = spec.pairs.iter().map(|p| p.gold).collect();
                Ok(DatasetReport {
                    dataset: spec.dataset.clone(),
                    family: Family::Sts,
                    result: DatasetResult::Spearman(spearman(&pred, &gold)?),
                })
            }
        }
    }
}

/// Evaluates every task. Failures are collected per dataset rather than
/// stopping at the first one.
pub fn eval_suite(ctx: &EvalContext, tasks: &[ManifestTask]) -> Result<ReportBundle> {
    let mut bundle = ReportBundle::default();
    let mut errors = Vec::new();
    for t in tasks {
        match ctx.eval_task(t) {
            Ok(r) => bundle.datasets.push(r),
            Err(e) => errors.push(Error::InDataset {
                dataset: t.dataset().to_string(),
                source: Box::new(e),
            }),
        }
    }
    finish(bundle, errors)
}

/// Loads and evaluates several manifest files; load errors carry the path.
pub fn eval_manifests(ctx: &EvalContext, paths: &[PathBuf]) -> Result<ReportBundle> {
    let mut tasks = Vec::new();
    let mut errors = Vec::new();
    for p in paths {
        match load_manifest(p) {
            Ok(t) => tasks.extend(t),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return finish(ReportBundle::default(), errors);
    }
    eval_suite(ctx, &tasks)
}

fn finish(bundle: ReportBundle, mut errors: Vec<Error>) -> Result<ReportBundle> {
    match errors.len() {
        0 => Ok(bundle),
        1 => Err(errors.pop().unwrap()),
        _ => Err(Error::Many(errors)),
    }
}

pub fn write_report(path: &Path, bundle: &ReportBundle) -> Result<()> {
    crate::io::write_atomic(path, bundle.to_csv().as_bytes())
}
