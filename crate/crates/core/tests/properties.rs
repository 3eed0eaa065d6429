//! Property tests for the invariants each module promises.

use e5vkit::gap::{modality_gap, pca_project, EmbeddingSet};
use e5vkit::io::EmbeddingDump;
use e5vkit::prompting::{
    catalog_default, render_prompt, ByteTokenizer, GridPatcher, MultimodalSequence, PromptMode, PromptTemplate,
    Segment, Tokenizer,
};
use e5vkit::render::{render_text, wrap_lines, RenderSpec};
use e5vkit::retrieval::{rank_gallery, recall_at_k, spearman, RetrievalTask};
use e5vkit::synth::{generate_world, WorldConfig};
use e5vkit::trainer::{info_nce_loss, train, LossConfig, TrainConfig, Triplet, TripletBatch};
use e5vkit::{init_encoder, EncoderConfig, ProjectorMode};
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

fn matrix(rows: impl Into<proptest::sample::SizeRange> + Clone, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, cols), rows).prop_map(move |r| {
        let n = r.len();
        Array2::from_shape_vec((n, cols), r.concat()).unwrap()
    })
}

/// Rows bounded away from zero so cosines are defined.
fn nonzero_rows(m: Array2<f64>) -> Array2<f64> {
    let mut m = m;
    for mut r in m.rows_mut() {
        r[0] += if r[0] >= 0.0 { 0.5 } else { -0.5 };
    }
    m
}

fn batch_strategy() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(n, d)| {
        (matrix(n, d), matrix(n, d), matrix(n, d))
            .prop_map(|(a, b, c)| (nonzero_rows(a), nonzero_rows(b), nonzero_rows(c)))
    })
}

fn loss(h: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>, tau: f64) -> f64 {
    let cfg = LossConfig {
        tau,
        batch_size: h.nrows(),
    };
    info_nce_loss(&TripletBatch::new(h.clone(), p.clone(), n.clone()).unwrap(), &cfg).unwrap()
}

fn f32_set(m: &Array2<f64>, label: &str) -> EmbeddingSet {
    EmbeddingSet::new(m.mapv(|x| x as f32), label).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_positive_row_scale((h, p, n) in batch_strategy(), c in 0.01..100.0f64, row in 0usize..6, tau in 0.05..1.0f64) {
        let mut scaled = h.clone();
        let r = row % h.nrows();
        scaled.row_mut(r).mapv_inplace(|x| x * c);
        let (a, b) = (loss(&h, &p, &n, tau), loss(&scaled, &p, &n, tau));
        prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn loss_is_positive((h, p, n) in batch_strategy(), tau in 0.05..1.0f64) {
        prop_assert!(loss(&h, &p, &n, tau) > 0.0);
    }

    #[test]
    fn loss_ignores_consistent_row_permutation((h, p, n) in batch_strategy(), seed in any::<u64>()) {
        let rows = h.nrows();
        let mut perm: Vec<usize> = (0..rows).collect();
        let mut s = seed;
        for i in (1..rows).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffle = |m: &Array2<f64>| m.select(Axis(0), &perm);
        let (a, b) = (loss(&h, &p, &n, 0.05), loss(&shuffle(&h), &shuffle(&p), &shuffle(&n), 0.05));
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn gap_is_symmetric(a in matrix(1..12, 5), b in matrix(1..12, 5)) {
        let (a, b) = (f32_set(&nonzero_rows(a), "a"), f32_set(&nonzero_rows(b), "b"));
        prop_assert_eq!(modality_gap(&a, &b).unwrap(), modality_gap(&b, &a).unwrap());
    }

    #[test]
    fn gap_ignores_row_scale(a in matrix(1..12, 5), b in matrix(1..12, 5), scales in prop::collection::vec(0.1..10.0f64, 12)) {
        let (a, b) = (nonzero_rows(a), nonzero_rows(b));
        let mut scaled = a.clone();
        for (i, mut r) in scaled.rows_mut().into_iter().enumerate() {
            r.mapv_inplace(|x| x * scales[i]);
        }
        let g1 = modality_gap(&f32_set(&a, "a"), &f32_set(&b, "b")).unwrap();
        let g2 = modality_gap(&f32_set(&scaled, "a"), &f32_set(&b, "b")).unwrap();
        // f32 storage of the rescaled rows bounds the agreement
        prop_assert!((g1 - g2).abs() <= 1e-6, "{g1} vs {g2}");
    }

    #[test]
    fn gap_ignores_exact_row_scale(a in matrix(1..12, 5), b in matrix(1..12, 5), exps in prop::collection::vec(-20i32..20, 12)) {
        let (a, b) = (nonzero_rows(a), nonzero_rows(b));
        let mut scaled = a.clone();
        for (i, mut r) in scaled.rows_mut().into_iter().enumerate() {
            r.mapv_inplace(|x| x * 2f64.powi(exps[i]));
        }
        let g1 = modality_gap(&f32_set(&a, "a"), &f32_set(&b, "b")).unwrap();
        let g2 = modality_gap(&f32_set(&scaled, "a"), &f32_set(&b, "b")).unwrap();
        prop_assert!((g1 - g2).abs() <= 1e-9, "{g1} vs {g2}");
    }

    #[test]
    fn pca_ignores_translation(a in matrix(3..10, 4), b in matrix(3..10, 4), shift in prop::collection::vec(-5.0..5.0f64, 4)) {
        let shift = Array1::from(shift);
        let sets = [f32_set(&a, "a"), f32_set(&b, "b")];
        let moved = [f32_set(&(&a + &shift), "a"), f32_set(&(&b + &shift), "b")];
        let (p, q) = (pca_project(&sets, 2).unwrap(), pca_project(&moved, 2).unwrap());
        for c in 0..2 {
            // eigenvectors are defined up to sign; align on the components
            let sign = p.components.row(c).dot(&q.components.row(c)).signum();
            for (x, y) in p.coords.iter().zip(&q.coords) {
                for (u, v) in x.column(c).iter().zip(y.column(c).iter()) {
                    prop_assert!((u - sign * v).abs() <= 1e-4 * (1.0 + u.abs()), "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn pca_variance_is_top_eigenvalues(a in matrix(3..10, 4), b in matrix(3..10, 4)) {
        let sets = [f32_set(&a, "a"), f32_set(&b, "b")];
        let pca = pca_project(&sets, 2).unwrap();
        let all: Vec<Array2<f64>> = pca.coords.clone();
        let pooled = ndarray::concatenate(Axis(0), &[all[0].view(), all[1].view()]).unwrap();
        let m = pooled.nrows() as f64;
        for c in 0..2 {
            let col = pooled.column(c);
            let mean = col.sum() / m;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let ev = pca.explained_variance[c];
            prop_assert!((var - ev).abs() <= 1e-6 * ev.max(1e-12) + 1e-9, "{var} vs {ev}");
        }
        prop_assert!(pca.explained_variance[0] >= pca.explained_variance[1]);
    }

    #[test]
    fn recall_is_monotone_and_complete(q in matrix(1..8, 4), g in matrix(2..12, 4), rel in prop::collection::vec(0usize..100, 8)) {
        let (q, g) = (nonzero_rows(q), nonzero_rows(g));
        let ng = g.nrows();
        let relevance = (0..q.nrows()).map(|i| vec![rel[i] % ng]).collect();
        let ks: Vec<usize> = (1..=ng).collect();
        let task = RetrievalTask::new(q.mapv(|x| x as f32), g.mapv(|x| x as f32), relevance, ks).unwrap();
        let r = recall_at_k(&task).unwrap().recall;
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.last().unwrap(), 1.0);
    }

    #[test]
    fn rank_is_permutation_and_scale_free(q in prop::collection::vec(-3.0..3.0f32, 4), g in matrix(1..20, 4), c in 0.01..100.0f32) {
        let q: Vec<f32> = q.iter().enumerate().map(|(i, &x)| if i == 0 { x + 0.5 } else { x }).collect();
        let g = nonzero_rows(g).mapv(|x| x as f32);
        let order = rank_gallery(&q, &g).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..g.nrows()).collect::<Vec<_>>());
        // power-of-two scales are exact in f32, so the scores are unchanged
        let pow2 = 2f32.powi(c.log2().round() as i32);
        prop_assert_eq!(rank_gallery(&q, &g.mapv(|x| x * pow2)).unwrap(), order);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xy in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let rho = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let ty: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        prop_assert!((rho - spearman(&tx, &ty).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn dump_round_trips(rows in 0usize..40, dim in 1usize..9, bits in prop::collection::vec(any::<u32>(), 360)) {
        let data = Array2::from_shape_fn((rows, dim), |(i, j)| f32::from_bits(bits[(i * dim + j) % bits.len()]));
        let ids: Vec<String> = (0..rows).map(|i| format!("r{i}")).collect();
        let dump = EmbeddingDump::new(data.clone(), ids.clone()).unwrap();
        let back = EmbeddingDump::from_bytes(&dump.to_bytes()).unwrap();
        prop_assert_eq!(back.ids, ids);
        prop_assert!(back.rows.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_dump_header_is_rejected(byte in 0usize..20, flip in 1u8..=255) {
        let dump = EmbeddingDump::new(Array2::from_elem((3, 2), 1.5), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let mut bytes = dump.to_bytes();
        bytes[byte] ^= flip;
        prop_assert!(EmbeddingDump::from_bytes(&bytes).is_err());
    }

    #[test]
    fn wrap_preserves_words_and_width(words in prop::collection::vec("[a-z]{1,45}", 1..60), sep in "[ \t\n]{1,3}") {
        let text = words.join(&sep);
        let spec = RenderSpec::default();
        let lines = wrap_lines(&text, &spec).unwrap();
        let joined = lines.iter().map(|l| l.trim_end()).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(joined, words.join(" "));
        for l in &lines {
            let body = l.trim_end();
            prop_assert!(body.chars().count() * spec.glyph_width <= spec.max_text_width() || !body.contains(' '));
        }
    }

    #[test]
    fn render_is_pure(text in "[ -~]{1,80}") {
        prop_assume!(!text.trim().is_empty());
        let spec = RenderSpec::default();
        prop_assert_eq!(render_text(&text, &spec).unwrap(), render_text(&text, &spec).unwrap());
    }

    #[test]
    fn distinct_texts_give_distinct_sequences(a in "[ -~]{1,40}", b in "[ -~]{1,40}") {
        prop_assume!(a != b);
        let catalog = catalog_default();
        let patcher = GridPatcher { patch_size: 8 };
        for t in catalog.entries().iter().filter(|t| t.has_text() && !t.has_image()) {
            let sa = render_prompt(t, Some(&a), None, &ByteTokenizer, &patcher).unwrap();
            let sb = render_prompt(t, Some(&b), None, &ByteTokenizer, &patcher).unwrap();
            prop_assert_ne!(sa, sb);
        }
    }

    #[test]
    fn oneword_sequences_end_with_suffix(text in "[ -~]{1,40}") {
        let catalog = catalog_default();
        let patcher = GridPatcher { patch_size: 8 };
        let suffix = ByteTokenizer.encode("one word:");
        let image = e5vkit::render::ImageBuffer::filled(16, 8, 255);
        // FashionIQ prompts end "in one word based on its style:"
        let literal = |t: &&PromptTemplate| !t.name().starts_with("fashioniq_");
        for t in catalog.entries().iter().filter(|t| t.mode() == PromptMode::OneWord).filter(literal) {
            let seq = render_prompt(t, t.has_text().then_some(text.as_str()), t.has_image().then_some(&image), &ByteTokenizer, &patcher).unwrap();
            let Some(Segment::Text(last)) = seq.segments().last() else { panic!("{} ends without text", t.name()) };
            let trimmed: Vec<u32> = {
                let mut v = last.clone();
                while v.last().is_some_and(|&c| (c as u8).is_ascii_whitespace()) {
                    v.pop();
                }
                v
            };
            prop_assert!(trimmed.ends_with(&suffix), "{}", t.name());
        }
    }

    #[test]
    fn template_rejects_repeated_placeholders(prefix in "[a-z ]{0,10}") {
        let body = format!("{prefix}<text> <text> in one word:");
        prop_assert!(PromptTemplate::new("dup", body, PromptMode::OneWord).is_err());
    }
}

fn token_seq(tokens: &[u32]) -> MultimodalSequence {
    MultimodalSequence::text(tokens.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_is_causal_and_pools_last_row(tokens in prop::collection::vec(0u32..256, 2..40), cut in 1usize..40, seed in 0u64..1000) {
        let enc = init_encoder(EncoderConfig::default(), seed).unwrap();
        let d = enc.config.dim;
        let full = enc.hidden_states(&token_seq(&tokens)).unwrap();
        let cut = cut.min(tokens.len());
        let prefix = enc.hidden_states(&token_seq(&tokens[..cut])).unwrap();
        prop_assert_eq!(&full[..cut * d], &prefix[..]);
        let emb = enc.encode(&token_seq(&tokens)).unwrap();
        prop_assert_eq!(emb.as_slice(), &full[(tokens.len() - 1) * d..]);
    }

    #[test]
    fn batching_matches_single_encodes(lens in prop::collection::vec(1usize..30, 1..6)) {
        let enc = init_encoder(EncoderConfig::default(), 4).unwrap();
        let seqs: Vec<MultimodalSequence> = lens.iter().enumerate().map(|(i, &n)| {
            token_seq(&(0..n).map(|t| ((t * 31 + i * 7) % 256) as u32).collect::<Vec<_>>())
        }).collect();
        let batch = enc.encode_batch(&seqs).unwrap();
        for (s, e) in seqs.iter().zip(&batch) {
            prop_assert_eq!(&enc.encode(s).unwrap(), e);
        }
    }
}

#[test]
fn training_leaves_frozen_tables_untouched() {
    for projector in [ProjectorMode::Oracle, ProjectorMode::Random(5)] {
        let enc = init_encoder(
            EncoderConfig {
                projector,
                ..EncoderConfig::default()
            },
            1,
        )
        .unwrap();
        let triplets = vec![
            Triplet::new("a red fox", "the red fox", "a blue owl").unwrap(),
            Triplet::new("a blue owl", "the blue owl", "a red fox").unwrap(),
        ];
        let cfg = TrainConfig {
            steps: 3,
            loss: LossConfig {
                tau: 0.05,
                batch_size: 2,
            },
            ..TrainConfig::default()
        };
        let (trained, _) = train(enc.clone(), &triplets, &cfg, &catalog_default()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trained.projector), bits(&enc.projector));
        assert_eq!(bits(&trained.tok_emb), bits(&enc.tok_emb));
        assert_ne!(trained.weights, enc.weights);
        assert!(trained.weights.is_finite());
    }
}

#[test]
fn world_is_deterministic_and_classes_differ() {
    let cfg = WorldConfig::default();
    let (a, b) = (generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
    assert_eq!(a, b);
    for (i, x) in a.classes.iter().enumerate() {
        for y in &a.classes[i + 1..] {
            assert_ne!(x.attributes, y.attributes);
        }
    }
    for s in &a.samples {
        for (c, other) in a.classes.iter().enumerate() {
            if c != s.class_id {
                assert!(!s
                    .sentence
                    .split(' ')
                    .collect::<Vec<_>>()
                    .windows(other.attributes.len())
                    .any(|w| w == other.attributes.as_slice()));
            }
        }
    }
}

#[test]
fn catalog_serialization_is_stable() {
    let a = catalog_default().serialize();
    assert_eq!(a, catalog_default().serialize());
    assert_eq!(e5vkit::prompting::PromptCatalog::parse(&a).unwrap().serialize(), a);
}
