//! Universal multimodal embeddings from a prompt-driven causal encoder.
//!
//! Text, images and interleaved inputs are rendered through prompt templates
//! into one token stream, encoded by a small causal transformer, and pooled at
//! the last token. The crate covers contrastive training on text triplets,
//! modality-gap analysis, retrieval and STS evaluation, and the text-to-image
//! rendering used for image-image benchmarks.

pub mod encoder;
pub mod error;
pub mod gap;
pub mod io;
pub mod kernels;
pub mod par;
pub mod prompting;
pub mod render;
pub mod retrieval;
pub mod suite;
pub mod synth;
pub mod trainer;

pub use encoder::{init_encoder, Embedding, EncoderConfig, EncoderState, ProjectorMode};
pub use error::{Error, Result};
pub use gap::{modality_gap, pca_project, EmbeddingSet, GapReport};
pub use io::{load_manifest, read_dump, write_dump, EmbeddingDump, RunConfig};
pub use prompting::{catalog_default, render_prompt, PromptCatalog, PromptMode, PromptTemplate};
pub use render::{render_text, wrap_lines, ImageBuffer, RenderSpec};
pub use retrieval::{rank_gallery, recall_at_k, spearman, RecallReport, RetrievalTask};
pub use suite::{eval_suite, EvalContext, ReportBundle};
pub use trainer::{info_nce_grad, info_nce_loss, train, LossConfig, TrainConfig, Triplet, TripletBatch};
