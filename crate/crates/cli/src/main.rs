//! `e5vkit` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Progress and
//! the resolved run configuration go to stderr; reports go to stdout unless a
//! path is given.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use e5vkit::gap::{gap_report, EmbeddingSet};
use e5vkit::io::{
    load_manifest, read_checkpoint, read_dump, read_triplets, write_atomic, write_checkpoint, write_dump, ManifestItem,
    ManifestTask, Modality,
};
use e5vkit::par::{self, Execution};
use e5vkit::prompting::PromptMode;
use e5vkit::suite::{eval_suite, DatasetReport, DatasetResult, EvalContext, Family, ReportBundle};
use e5vkit::synth::{crossmodal_task_for_mode, embed_world, export_world, generate_world, WorldConfig};
use e5vkit::trainer::train_observed;
use e5vkit::{catalog_default, init_encoder, recall_at_k, render_text, Error, RunConfig};

#[derive(Parser)]
#[command(
    name = "e5vkit",
    version,
    about = "Prompt-unified embeddings: train, embed, evaluate, analyse"
)]
struct Cli {
    /// Worker threads (defaults to E5VKIT_THREADS, then all cores).
    #[arg(long, global = true, env = "E5VKIT_THREADS")]
    threads: Option<usize>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive training on text triplets.
    Train(TrainArgs),
    /// Embed every manifest item with a checkpoint and write a dump.
    Embed(EmbedArgs),
    /// Score manifests from a dump and/or a checkpoint.
    Eval(EvalArgs),
    /// Modality gap and PCA picture of two dumps.
    Gap(GapArgs),
    /// Draw text onto a white canvas as PGM.
    Render(RenderArgs),
    /// Write the synthetic world: triplets, images and manifest.
    Synth(SynthArgs),
    /// Compare representation modes on the synthetic world.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Tab-separated anchor, positive, negative lines.
    #[arg(long)]
    triplets: PathBuf,
    /// Checkpoint path; the run config is written next to it as `.runconfig`.
    #[arg(long)]
    out: PathBuf,
    /// Per-step losses as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL manifest whose items are embedded, keyed by dump_id or id.
    #[arg(long)]
    manifest: PathBuf,
    /// Template applied to every item instead of the per-modality default.
    #[arg(long)]
    prompt: Option<String>,
    /// Keep only items of this modality.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// Embedding dump to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Text,
    Image,
    Composed,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => Modality::Text,
            ModalityArg::Image => Modality::Image,
            ModalityArg::Composed => Modality::Composed,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL manifests (repeat the flag for several).
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Precomputed embeddings, looked up by dump_id or id.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Encoder for items missing from the dump.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Recall cut-offs; values above a gallery's size are skipped.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// CSV report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long)]
    dump_a: PathBuf,
    #[arg(long)]
    dump_b: PathBuf,
    /// PCA scatter of both sets.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// JSON-lines report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    text: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Last,
    Prompt,
    Oneword,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Last => PromptMode::Last,
            ModeArg::Prompt => PromptMode::Prompt,
            ModeArg::Oneword => PromptMode::OneWord,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    /// Modes to evaluate (comma-separated or repeated).
    #[arg(long, value_delimiter = ',', default_value = "last,prompt,oneword")]
    mode: Vec<ModeArg>,
    /// Reuse a trained checkpoint instead of training.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Also save the trained encoder.
    #[arg(long)]
    save_ckpt: Option<PathBuf>,
    /// CSV report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    eprintln!("# resolved run config");
    eprint!("{}", cfg.to_document());
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        par::set_threads(n);
    }
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Embed(a) => cmd_embed(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Gap(a) => cmd_gap(a),
        Command::Render(a) => cmd_render(&cfg, a),
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn progress(total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step == total {
            eprintln!("step {step}/{total} loss {loss:.4}");
        }
    }
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs) -> Outcome {
    let triplets = read_triplets(&a.triplets)?;
    eprintln!("loaded {} triplets from {}", triplets.len(), a.triplets.display());
    let catalog = catalog_default();
    let encoder = init_encoder(cfg.encoder, cfg.seed)?;
    let (trained, curve) = train_observed(
        Execution::default(),
        encoder,
        &triplets,
        &cfg.train,
        &catalog,
        &mut progress(cfg.train.steps),
    )?;
    write_checkpoint(&a.out, &trained)?;
    write_atomic(&a.out.with_extension("runconfig"), cfg.to_document().as_bytes())?;
    if let Some(p) = &a.loss_csv {
        write_atomic(p, curve.to_csv().as_bytes())?;
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Every distinct item of the tasks, keyed by its dump id (or id).
fn manifest_items(tasks: &[ManifestTask]) -> Result<Vec<(String, ManifestItem)>, Failure> {
    let mut out: Vec<(String, ManifestItem)> = Vec::new();
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut push = |item: &ManifestItem| -> Result<(), Failure> {
        let key = item.dump_id.clone().unwrap_or_else(|| item.id.clone());
        match seen.get(&key) {
            Some(&i) => {
                let prev: &ManifestItem = &out[i].1;
                if prev.media != item.media || prev.prompt != item.prompt {
                    return Err(Failure::Data(Error::InconsistentInput(format!(
                        "id `{key}` names different payloads on lines {} and {}",
                        prev.line, item.line
                    ))));
                }
            }
            None => {
                seen.insert(key.clone(), out.len());
                out.push((key, item.clone()));
            }
        }
        Ok(())
    };
    for t in tasks {
        match t {
            ManifestTask::Retrieval(r) => r.queries.iter().chain(&r.gallery).try_for_each(&mut push)?,
            ManifestTask::Sts(s) => s.pairs.iter().try_for_each(|p| {
                push(&p.a)?;
                push(&p.b)
            })?,
        }
    }
    Ok(out)
}

fn cmd_embed(cfg: &RunConfig, a: EmbedArgs) -> Outcome {
    let encoder = read_checkpoint(&a.ckpt)?;
    let catalog = catalog_default();
    if let Some(p) = &a.prompt {
        catalog.get(p)?;
    }
    let tasks = load_manifest(&a.manifest)?;
    let mut items = manifest_items(&tasks)?;
    if let Some(m) = a.modality {
        let want = Modality::from(m);
        items.retain(|(_, it)| it.media.as_ref().is_some_and(|md| md.modality() == want));
    }
    if let Some(p) = &a.prompt {
        for (_, it) in &mut items {
            it.prompt = Some(p.clone());
        }
    }
    let ctx = EvalContext {
        encoder: Some(&encoder),
        render: cfg.render,
        ..EvalContext::new(&catalog)
    };
    let plain: Vec<ManifestItem> = items
        .iter()
        .map(|(_, it)| ManifestItem {
            dump_id: None,
            ..it.clone()
        })
        .collect();
    eprintln!("embedding {} items", plain.len());
    let rows = if plain.is_empty() {
        Array2::zeros((0, encoder.config.dim))
    } else {
        ctx.embed_items(&plain)?
    };
    let ids: Vec<String> = items.into_iter().map(|(k, _)| k).collect();
    write_dump(&a.out, &rows, &ids)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Outcome {
    if a.ks.contains(&0) {
        return Err(Failure::Usage("--ks values must be at least 1".into()));
    }
    let mut ks = a.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let catalog = catalog_default();
    let dump = a.dump.as_deref().map(read_dump).transpose()?;
    let encoder = a.ckpt.as_deref().map(read_checkpoint).transpose()?;
    let mut tasks = Vec::new();
    let mut errors = Vec::new();
    for m in &a.manifest {
        match load_manifest(m) {
            Ok(t) => tasks.extend(t),
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => {}
        1 => return Err(errors.pop().unwrap().into()),
        _ => return Err(Error::Many(errors).into()),
    }
    eprintln!("evaluating {} datasets", tasks.len());
    let ctx = EvalContext {
        encoder: encoder.as_ref(),
        dump: dump.as_ref(),
        render: cfg.render,
        ks,
        ..EvalContext::new(&catalog)
    };
    let bundle = eval_suite(&ctx, &tasks)?;
    eprint!("{}", bundle.to_table());
    write_or_print(a.report.as_deref(), &bundle.to_csv())
}

fn cmd_gap(a: GapArgs) -> Outcome {
    let da = read_dump(&a.dump_a)?;
    let db = read_dump(&a.dump_b)?;
    let label = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let sa = EmbeddingSet::new(da.rows, label(&a.dump_a))?;
    let sb = EmbeddingSet::new(db.rows, label(&a.dump_b))?;
    let report = gap_report(&sa, &sb)?;
    eprintln!("gap {:.6}", report.gap);
    if let Some(p) = &a.svg {
        write_atomic(p, report.to_svg().as_bytes())?;
    }
    write_or_print(a.report.as_deref(), &report.to_json_line())
}

fn cmd_render(cfg: &RunConfig, a: RenderArgs) -> Outcome {
    let img = render_text(&a.text, &cfg.render)?;
    img.write_pgm(&a.out)?;
    eprintln!("wrote {}x{} {}", img.width, img.height, a.out.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Outcome {
    let world = generate_world(&WorldConfig {
        seed: cfg.seed,
        ..WorldConfig::default()
    })?;
    export_world(&world, &a.out)?;
    eprintln!(
        "wrote {} classes, {} sentences, {} triplets to {}",
        world.classes.len(),
        world.samples.len(),
        world.triplets.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: AblateArgs) -> Outcome {
    let catalog = catalog_default();
    let world = generate_world(&WorldConfig {
        seed: cfg.seed,
        ..WorldConfig::default()
    })?;
    let encoder = match &a.ckpt {
        Some(p) => read_checkpoint(p)?,
        None => {
            eprintln!(
                "training on {} text triplets with `{}`",
                world.triplets.len(),
                cfg.train.prompt
            );
            let enc = init_encoder(cfg.encoder, cfg.seed)?;
            train_observed(
                Execution::default(),
                enc,
                &world.triplets,
                &cfg.train,
                &catalog,
                &mut progress(cfg.train.steps),
            )?
            .0
        }
    };
    if let Some(p) = &a.save_ckpt {
        write_checkpoint(p, &encoder)?;
    }
    let mut bundle = ReportBundle::default();
    let mut gaps = String::new();
    for m in &a.mode {
        let mode = PromptMode::from(*m);
        let task = crossmodal_task_for_mode(&world, &encoder, &catalog, mode)?;
        let recall = recall_at_k(&task)?;
        let (q, g) = embed_world(&world, &encoder, &catalog, mode)?;
        let gap = e5vkit::modality_gap(&EmbeddingSet::new(q, "text")?, &EmbeddingSet::new(g, "image")?)?;
        let name = format!("synth-{}", mode.as_str());
        gaps.push_str(&format!("{name},gap,,{gap}\n"));
        eprintln!("{name}: R@1 {:.3} gap {gap:.4}", recall.recall[0]);
        bundle.datasets.push(DatasetReport {
            dataset: name,
            family: Family::TextImage,
            result: DatasetResult::Recall(recall),
        });
    }
    let csv = bundle.to_csv() + &gaps;
    write_or_print(a.report.as_deref(), &csv)
}
