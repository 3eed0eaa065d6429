//! Deterministic synthetic multimodal world.
//!
//! Each class is a unique combination of attribute words. Its "image" is the
//! attribute phrase rendered with the bitmap font into glyph cells that line
//! up exactly with the encoder's 8x8 patches; its sentences wrap the phrase in
//! fixed templates. Triplets pair two sentences of a class against a sentence
//! of a class sharing an attribute.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::io;
use crate::prompting::{render_prompt, ByteTokenizer, GridPatcher, PromptCatalog, PromptMode};
use crate::render::{render_text, ImageBuffer, RenderSpec};
use crate::retrieval::RetrievalTask;
use crate::trainer::Triplet;

pub const LEXICON: [&str; 32] = [
    "red", "blue", "green", "black", "white", "pink", "gold", "gray", "tiny", "huge", "old", "young", "happy",
    "sleepy", "fast", "slow", "cat", "dog", "fox", "owl", "bear", "fish", "frog", "duck", "horse", "sheep", "goat",
    "mouse", "lion", "tiger", "crab", "snake",
];

// the phrase opens, closes and sits inside sentences, and once stands alone
const TEMPLATES: [&str; 10] = [
    "{}",
    "a {}",
    "{} is here",
    "i saw a {}",
    "{} sleeps now",
    "look at that {}",
    "the {} is here",
    "a photo of a {}",
    "{} seen again",
    "see the {} run",
];

const EXTRAS: [&str; 6] = ["today", "again", "outside", "at night", "in the rain", "once more"];

/// Patch side of the synthetic images; equals the glyph cell.
pub const CELL: usize = 8;

/// Characters whose glyph patches the oracle projector maps onto tokens.
pub fn oracle_charset() -> Vec<u8> {
    let set: BTreeSet<u8> = LEXICON.iter().flat_map(|w| w.bytes()).chain(*b" ").collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub sentences_per_class: usize,
    pub attributes_per_class: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            sentences_per_class: 10,
            attributes_per_class: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub attributes: Vec<String>,
    pub image: ImageBuffer,
}

impl ClassInfo {
    pub fn phrase(&self) -> String {
        self.attributes.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSample {
    pub class_id: usize,
    pub sentence: String,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<WorldSample>,
    pub triplets: Vec<Triplet>,
    /// Class of each triplet's (anchor, negative).
    pub triplet_classes: Vec<(usize, usize)>,
}

/// Single-line render spec with no margins whose glyph cells coincide with
/// `CELL` patches: glyph `k` of `phrase` fills patch `k`.
pub fn phrase_render_spec(phrase: &str) -> RenderSpec {
    RenderSpec {
        image_width: phrase.chars().count().max(1) * CELL,
        image_height: CELL,
        font_size: CELL,
        pad_left: 0,
        glyph_width: CELL,
    }
}

fn sentence(template_index: usize, phrase: &str) -> String {
    let base = TEMPLATES[template_index % TEMPLATES.len()].replace("{}", phrase);
    match template_index / TEMPLATES.len() {
        0 => base,
        n => format!("{base} {}", EXTRAS[(n - 1) % EXTRAS.len()]),
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    let (m, k) = (cfg.num_classes, cfg.attributes_per_class);
    if m < 2 || cfg.sentences_per_class == 0 || k == 0 || k > 4 {
        return Err(Error::InvalidConfig(format!(
            "world needs >= 2 classes, >= 1 sentence and 1..=4 attributes (got {m}, {}, {k})",
            cfg.sentences_per_class
        )));
    }
    let combos = (0..k).fold(1f64, |acc, i| acc * (LEXICON.len() - i) as f64 / (i + 1) as f64);
    if (m as f64) > combos {
        return Err(Error::InvalidConfig(format!(
            "only {combos} attribute combinations for {m} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let draw_classes = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let mut idx: Vec<usize> = (0..LEXICON.len()).collect();
            idx.shuffle(rng);
            let mut pick = idx[..k].to_vec();
            let key = {
                let mut s = pick.clone();
                s.sort_unstable();
                s
            };
            if seen.insert(key) {
                pick.truncate(k);
                out.push(pick);
            }
        }
        out
    };
    let shares = |a: &[usize], b: &[usize]| a.iter().any(|x| b.contains(x));
    let mut attrs = draw_classes(&mut rng);
    // prefer worlds where every class has a hard-negative partner
    for _ in 0..1000 {
        let ok = (0..m).all(|i| (0..m).any(|j| j != i && shares(&attrs[i], &attrs[j])));
        if ok || k == 1 {
            break;
        }
        attrs = draw_classes(&mut rng);
    }

    let classes: Vec<ClassInfo> = attrs
        .iter()
        .map(|a| {
            let attributes: Vec<String> = a.iter().map(|&i| LEXICON[i].to_string()).collect();
            let phrase = attributes.join(" ");
            let image = render_text(&phrase, &phrase_render_spec(&phrase))?;
            Ok(ClassInfo { attributes, image })
        })
        .collect::<Result<_>>()?;

    let n = cfg.sentences_per_class;
    let mut samples = Vec::with_capacity(m * n);
    for (c, info) in classes.iter().enumerate() {
        let phrase = info.phrase();
        for t in 0..n {
            samples.push(WorldSample {
                class_id: c,
                sentence: sentence(t, &phrase),
                image: info.image.clone(),
            });
        }
    }

    let mut triplets = Vec::with_capacity(m * n);
    let mut triplet_classes = Vec::with_capacity(m * n);
    for c in 0..m {
        let partners: Vec<usize> = (0..m).filter(|&j| j != c && shares(&attrs[c], &attrs[j])).collect();
        let others: Vec<usize> = (0..m).filter(|&j| j != c).collect();
        for i in 0..n {
            let anchor = &samples[c * n + i].sentence;
            let j = if n > 1 {
                (i + 1 + rng.random_range(0..n - 1)) % n
            } else {
                i
            };
            let positive = &samples[c * n + j].sentence;
            let neg_class = *partners
                .choose(&mut rng)
                .unwrap_or_else(|| others.choose(&mut rng).expect("m >= 2"));
            let negative = &samples[neg_class * n + rng.random_range(0..n)].sentence;
            triplets.push(Triplet::new(anchor.clone(), positive.clone(), negative.clone())?);
            triplet_classes.push((c, neg_class));
        }
    }

    Ok(World {
        config: *cfg,
        classes,
        samples,
        triplets,
        triplet_classes,
    })
}

/// Sentences as queries against one image per class.
pub fn crossmodal_task(world: &World, encoder: &EncoderState, catalog: &PromptCatalog) -> Result<RetrievalTask> {
    crossmodal_task_for_mode(world, encoder, catalog, PromptMode::OneWord)
}

pub fn crossmodal_task_for_mode(
    world: &World,
    encoder: &EncoderState,
    catalog: &PromptCatalog,
    mode: PromptMode,
) -> Result<RetrievalTask> {
    let (queries, gallery) = embed_world(world, encoder, catalog, mode)?;
    let relevance = world.samples.iter().map(|s| vec![s.class_id]).collect();
    let g = gallery.nrows();
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= g).collect();
    RetrievalTask::new(queries, gallery, relevance, if ks.is_empty() { vec![1] } else { ks })
}

/// (sentence embeddings, per-class image embeddings) under a mode's templates.
pub fn embed_world(
    world: &World,
    encoder: &EncoderState,
    catalog: &PromptCatalog,
    mode: PromptMode,
) -> Result<(ndarray::Array2<f32>, ndarray::Array2<f32>)> {
    let (text_name, image_name) = PromptCatalog::mode_pair(mode);
    let text_t = catalog.get(text_name)?;
    let image_t = catalog.get(image_name)?;
    let patcher = GridPatcher { patch_size: CELL };
    let text_seqs = world
        .samples
        .iter()
        .map(|s| render_prompt(text_t, Some(&s.sentence), None, &ByteTokenizer, &patcher))
        .collect::<Result<Vec<_>>>()?;
    let image_seqs = world
        .classes
        .iter()
        .map(|c| render_prompt(image_t, None, Some(&c.image), &ByteTokenizer, &patcher))
        .collect::<Result<Vec<_>>>()?;
    let q = encoder.encode_batch(&text_seqs)?;
    let g = encoder.encode_batch(&image_seqs)?;
    Ok((crate::retrieval::stack(&q)?, crate::retrieval::stack(&g)?))
}

/// Writes `triplets.tsv`, one PGM per class under `images/`, and a
/// `manifest.jsonl` holding the sentence-to-image retrieval task.
pub fn export_world(world: &World, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    io::write_atomic(
        &dir.join("triplets.tsv"),
        io::triplets_to_tsv(&world.triplets).as_bytes(),
    )?;
    let mut manifest = String::new();
    let mut line = |v: serde_json::Value| {
        manifest.push_str(&v.to_string());
        manifest.push('\n');
    };
    for (c, info) in world.classes.iter().enumerate() {
        let rel = format!("images/class{c:02}.pgm");
        info.image.write_pgm(&dir.join(&rel))?;
        line(
            json!({"dataset": "synth-text-image", "role": "gallery", "id": format!("class{c:02}"),
            "modality": "image", "image": rel}),
        );
    }
    for (i, s) in world.samples.iter().enumerate() {
        line(
            json!({"dataset": "synth-text-image", "role": "query", "id": format!("s{i:03}"),
            "modality": "text", "text": s.sentence, "relevant": [format!("class{:02}", s.class_id)]}),
        );
    }
    io::write_atomic(&dir.join("manifest.jsonl"), manifest.as_bytes())
}
