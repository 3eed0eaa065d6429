//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed; the
//! process exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use e5vkit::gap::{modality_gap, pca_project, EmbeddingSet};
use e5vkit::io::{load_manifest, read_dump, write_dump};
use e5vkit::prompting::{catalog_default, PromptMode};
use e5vkit::render::{render_text, text_start_y, wrap_lines, RenderSpec, BLACK};
use e5vkit::retrieval::{recall_at_k, spearman, RetrievalTask};
use e5vkit::suite::{eval_suite, DatasetResult, EvalContext};
use e5vkit::synth::{crossmodal_task_for_mode, embed_world, generate_world, WorldConfig};
use e5vkit::trainer::{info_nce_grad, info_nce_loss, train, LossConfig, TrainConfig, TripletBatch};
use e5vkit::{init_encoder, EncoderConfig};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform_loss() -> Check {
    let mut worst = 0f64;
    for n in [1usize, 2, 8, 64] {
        // identical rows: every similarity equals 1
        let rows = Array2::from_elem((n, 4), 0.5);
        let batch = TripletBatch::new(rows.clone(), rows.clone(), rows).map_err(|e| e.to_string())?;
        let cfg = LossConfig {
            tau: 0.05,
            batch_size: n,
        };
        let loss = info_nce_loss(&batch, &cfg).map_err(|e| e.to_string())?;
        let err = (loss - (2.0 * n as f64).ln()).abs();
        ensure(err <= 1e-9, || format!("N={n}: loss {loss} vs ln(2N), error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max |loss - ln 2N| = {worst:e}"))
}

/// Elements whose analytic and numeric values are both below this are
/// compared absolutely: relative error is meaningless at round-off scale.
const FD_FLOOR: f64 = 1e-5;

fn gradient_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst = 0f64;
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = if case % 2 == 0 { 0.05 } else { 1.0 };
        let cfg = LossConfig { tau, batch_size: n };
        let mats = [
            normal_matrix(&mut rng, n, d),
            normal_matrix(&mut rng, n, d),
            normal_matrix(&mut rng, n, d),
        ];
        let batch = TripletBatch::new(mats[0].clone(), mats[1].clone(), mats[2].clone()).map_err(|e| e.to_string())?;
        let (gh, gp, gn) = info_nce_grad(&batch, &cfg).map_err(|e| e.to_string())?;
        for (which, grad) in [gh, gp, gn].iter().enumerate() {
            for i in 0..n {
                for j in 0..d {
                    let eval = |delta: f64| {
                        let mut m = mats.clone();
                        m[which][[i, j]] += delta;
                        let [a, b, c] = m;
                        info_nce_loss(&TripletBatch::new(a, b, c).unwrap(), &cfg).unwrap()
                    };
                    // fourth-order central stencil: truncation O(h^4) at a step
                    // large enough to keep round-off near 1e-11
                    let numeric = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
                    let analytic = grad[[i, j]];
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                    ensure(rel <= 1e-4, || {
                        format!("case {case} (N={n} D={d} tau={tau}) input {which} [{i},{j}]: {analytic} vs {numeric}")
                    })?;
                    worst = worst.max(rel);
                }
            }
        }
    }
    Ok(format!("max relative error {worst:e}"))
}

/// Rank of every gallery item for one query by direct comparison of
/// normalised dot products, ties broken towards the lower index.
fn oracle_recall(task: &RetrievalTask) -> Vec<f64> {
    let unit = |r: ndarray::ArrayView1<f32>| {
        let v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let gallery: Vec<Vec<f64>> = task.gallery.rows().into_iter().map(unit).collect();
    let mut hits = vec![0usize; task.ks.len()];
    for (qi, q) in task.queries.rows().into_iter().enumerate() {
        let q = unit(q);
        let s: Vec<f64> = gallery
            .iter()
            .map(|g| g.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let best = task.relevance[qi]
            .iter()
            .map(|&g| (0..s.len()).filter(|&h| s[h] > s[g] || (s[h] == s[g] && h < g)).count())
            .min()
            .unwrap();
        for (slot, &k) in task.ks.iter().enumerate() {
            if best < k {
                hits[slot] += 1;
            }
        }
    }
    hits.into_iter()
        .map(|h| h as f64 / task.queries.nrows() as f64)
        .collect()
}

/// Pearson correlation of average ranks, ranks counted pairwise.
fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = |r: &[f64]| r.iter().sum::<f64>() / n;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_rho = 0f64;
    let mut ties = 0;
    for case in 0..200 {
        let d = rng.random_range(2..=12);
        let nq = rng.random_range(1..=20);
        let ng = rng.random_range(2..=30);
        let mut gallery = normal_matrix(&mut rng, ng, d).mapv(|x| x as f32);
        // duplicated gallery rows exercise the tie-break
        for _ in 0..rng.random_range(0..=3) {
            let (a, b) = (rng.random_range(0..ng), rng.random_range(0..ng));
            let row = gallery.row(a).to_owned();
            gallery.row_mut(b).assign(&row);
            ties += 1;
        }
        let queries = normal_matrix(&mut rng, nq, d).mapv(|x| x as f32);
        let relevance = (0..nq)
            .map(|_| {
                let mut r: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..ng)).collect();
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= ng).collect();
        let task = RetrievalTask::new(queries, gallery, relevance, ks).map_err(|e| e.to_string())?;
        let got = recall_at_k(&task).map_err(|e| e.to_string())?.recall;
        let want = oracle_recall(&task);
        ensure(got == want, || {
            format!("case {case}: recall {got:?} vs oracle {want:?}")
        })?;

        let n = rng.random_range(2..=40);
        // coarse values produce ties in both arguments
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-2.0..2.0f64).round()).collect();
        match spearman(&x, &y) {
            Ok(rho) => {
                let want = oracle_spearman(&x, &y);
                let err = (rho - want).abs();
                ensure(err <= 1e-9, || format!("case {case}: spearman {rho} vs oracle {want}"))?;
                worst_rho = worst_rho.max(err);
            }
            Err(_) => {
                let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
                ensure(constant(&x) || constant(&y), || {
                    format!("case {case}: spearman rejected varying input")
                })?;
            }
        }
    }
    Ok(format!(
        "recall exact on 200 cases ({ties} forced ties), max spearman error {worst_rho:e}"
    ))
}

/// Reference values of the default training run.
const PINNED_ONEWORD_R1: f64 = 0.56;
const PINNED_ONEWORD_GAP: f64 = 0.2436;
const PINNED_LAST_GAP: f64 = 0.3715;
const PIN_TOL: f64 = 5e-3;

struct Transfer {
    untrained_r1: f64,
    trained_r1: f64,
    gaps: Option<(f64, f64)>,
    train_time: Duration,
    encoder: e5vkit::EncoderState,
}

fn train_reference() -> Result<Transfer, String> {
    let catalog = catalog_default();
    let world = generate_world(&WorldConfig::default()).map_err(|e| e.to_string())?;
    let encoder = init_encoder(EncoderConfig::default(), 0).map_err(|e| e.to_string())?;
    let r1 = |enc: &e5vkit::EncoderState| -> Result<f64, String> {
        let task = crossmodal_task_for_mode(&world, enc, &catalog, PromptMode::OneWord).map_err(|e| e.to_string())?;
        Ok(recall_at_k(&task).map_err(|e| e.to_string())?.recall[0])
    };
    let untrained_r1 = r1(&encoder)?;
    let start = Instant::now();
    let (trained, _) = train(encoder, &world.triplets, &TrainConfig::default(), &catalog).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    Ok(Transfer {
        untrained_r1,
        trained_r1: r1(&trained)?,
        gaps: None,
        train_time,
        encoder: trained,
    })
}

fn transfer(t: &Transfer) -> Check {
    let chance = 1.0 / WorldConfig::default().num_classes as f64;
    ensure(t.untrained_r1 <= 0.25, || {
        format!("untrained R@1 {} above the untrained band", t.untrained_r1)
    })?;
    ensure(t.trained_r1 >= 5.0 * chance, || {
        format!("trained R@1 {} below 5x chance", t.trained_r1)
    })?;
    ensure((t.trained_r1 - PINNED_ONEWORD_R1).abs() <= PIN_TOL, || {
        format!("trained R@1 {} drifted from pinned {PINNED_ONEWORD_R1}", t.trained_r1)
    })?;
    ensure(t.train_time < Duration::from_secs(300), || {
        format!("training took {:?}", t.train_time)
    })?;
    Ok(format!(
        "R@1 {:.3} -> {:.3} (chance {chance:.2}), training {:.1?}",
        t.untrained_r1, t.trained_r1, t.train_time
    ))
}

fn gap_direction(t: &mut Transfer) -> Check {
    let catalog = catalog_default();
    let world = generate_world(&WorldConfig::default()).map_err(|e| e.to_string())?;
    let gap = |mode| -> Result<f64, String> {
        let (q, g) = embed_world(&world, &t.encoder, &catalog, mode).map_err(|e| e.to_string())?;
        let a = EmbeddingSet::new(q, "text").map_err(|e| e.to_string())?;
        let b = EmbeddingSet::new(g, "image").map_err(|e| e.to_string())?;
        modality_gap(&a, &b).map_err(|e| e.to_string())
    };
    let (oneword, last) = (gap(PromptMode::OneWord)?, gap(PromptMode::Last)?);
    t.gaps = Some((oneword, last));
    ensure(oneword < last, || {
        format!("OneWord gap {oneword} not below Last gap {last}")
    })?;
    ensure(
        (oneword - PINNED_ONEWORD_GAP).abs() <= PIN_TOL && (last - PINNED_LAST_GAP).abs() <= PIN_TOL,
        || format!("gaps {oneword} / {last} drifted from pinned {PINNED_ONEWORD_GAP} / {PINNED_LAST_GAP}"),
    )?;
    Ok(format!("gap OneWord {oneword:.4} < Last {last:.4}"))
}

fn pca_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for case in 0..50 {
        let d = rng.random_range(3..=10);
        let (ma, mb) = (rng.random_range(3..=20), rng.random_range(3..=20));
        // anisotropic clouds keep the leading eigenvalues apart
        let scale: Vec<f64> = (0..d).map(|j| 1.0 + 2.0 * (d - j) as f64).collect();
        let mut cloud = |m| {
            let mut x = normal_matrix(&mut rng, m, d);
            for mut r in x.rows_mut() {
                r.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
            }
            x.mapv(|v| v as f32)
        };
        let sets = [
            EmbeddingSet::new(cloud(ma), "a").unwrap(),
            EmbeddingSet::new(cloud(mb), "b").unwrap(),
        ];
        let pca = pca_project(&sets, 2).map_err(|e| e.to_string())?;

        let all: Vec<f64> = sets.iter().flat_map(|s| s.rows.iter().map(|&v| v as f64)).collect();
        let m = ma + mb;
        let x = DMatrix::from_row_slice(m, d, &all);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (m - 1) as f64;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        ensure(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]), || {
            format!("case {case}: variances increase")
        })?;
        for c in 0..2 {
            let col = eig.eigenvectors.column(order[c]);
            let ours = pca.components.row(c);
            let dotp: f64 = ours.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let sign = dotp.signum();
            let comp_err = ours
                .iter()
                .zip(col.iter())
                .map(|(a, b)| (a - sign * b).abs())
                .fold(0.0, f64::max);
            let var_err = (pca.explained_variance[c] - eig.eigenvalues[order[c]]).abs();
            let want_coords = &centered * col;
            let got: Vec<f64> = pca.coords.iter().flat_map(|cs| cs.column(c).to_vec()).collect();
            let coord_err = got
                .iter()
                .zip(want_coords.iter())
                .map(|(a, b)| (a - sign * b).abs())
                .fold(0.0, f64::max);
            let err = comp_err.max(var_err).max(coord_err);
            ensure(err <= 1e-6, || format!("case {case} component {c}: deviation {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("max deviation from dense eigensolver {worst:e}"))
}

/// SHA-256 of every rendered image in the 50-case corpus, concatenated.
const PINNED_RENDER_DIGEST: &str = "a547c042ee0cdfff09ad7f1c54a36fc11fb3371a5b58c0b7abd21f9ec11adfb3";

fn render_corpus() -> Vec<String> {
    const WORDS: [&str; 12] = [
        "a", "dog", "runs", "across", "the", "wide", "green", "field", "while", "children", "laugh", "loudly",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut corpus: Vec<String> = (0..46)
        .map(|_| {
            let n = rng.random_range(1..=40);
            (0..n)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    corpus.push("supercalifragilisticexpialidociousandthensomemorelettersbeyondthelimit".into());
    corpus.push("short line".into());
    corpus.push("ünïcödé and ascii mixed".into());
    corpus.push("  leading and   repeated   spaces ".into());
    corpus
}

fn render_determinism() -> Check {
    let spec = RenderSpec::default();
    let limit = 760;
    let corpus = render_corpus();
    let mut digest = Sha256::new();
    for (i, text) in corpus.iter().enumerate() {
        let a = render_text(text, &spec).map_err(|e| e.to_string())?;
        let b = render_text(text, &spec).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {i}: two renders differ"))?;
        digest.update(&a.pixels);
        for line in wrap_lines(text, &spec).map_err(|e| e.to_string())? {
            let body = line.trim_end();
            let width = body.chars().count() * spec.glyph_width;
            let single_word = !body.contains(' ');
            ensure(width <= limit || single_word, || {
                format!("case {i}: line `{body}` is {width} px")
            })?;
        }
    }
    let hex: String = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
    ensure(hex == PINNED_RENDER_DIGEST, || {
        format!("render digest {hex} differs from pinned")
    })?;

    let start = text_start_y(1, &spec);
    ensure(start == 180, || format!("single-line start {start}, expected 180"))?;
    let img = render_text("hello", &spec).map_err(|e| e.to_string())?;
    let ink_rows: Vec<usize> = (0..img.height)
        .filter(|&y| (0..img.width).any(|x| img.get(x, y) == BLACK))
        .collect();
    let (top, bottom) = (ink_rows[0], *ink_rows.last().unwrap());
    ensure(top >= 180 && bottom < 220, || {
        format!("single-line ink spans rows {top}..={bottom}")
    })?;
    Ok(format!(
        "{} cases byte-identical, digest pinned, first line at y=180",
        corpus.len()
    ))
}

fn dump_roundtrip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut largest = Duration::ZERO;
    for (case, &(rows, dim)) in [(0usize, 3usize), (1, 1), (17, 5), (1000, 64), (100_000, 64)]
        .iter()
        .enumerate()
    {
        let data = Array2::from_shape_fn((rows, dim), |_| f32::from_bits(rng.random::<u32>() & 0xff7f_ffff));
        let ids: Vec<String> = (0..rows).map(|i| format!("item-{i}-{}", rng.random::<u16>())).collect();
        let path = dir.path().join(format!("d{case}.e5v"));
        let start = Instant::now();
        write_dump(&path, &data, &ids).map_err(|e| e.to_string())?;
        let back = read_dump(&path).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        largest = largest.max(took);
        let same_bits =
            back.rows.shape() == data.shape() && back.rows.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits && back.ids == ids, || {
            format!("{rows}x{dim} dump differs after round trip")
        })?;
        ensure(took < Duration::from_secs(10), || {
            format!("{rows}x{dim} round trip took {took:?}")
        })?;
    }
    Ok(format!("bitwise identical, 100000x64 in {largest:.2?}"))
}

/// Hand-checkable excerpt: four captions against six images in the plane.
///
/// | query | vector    | relevant | order by cosine (ties by index) | rank |
/// |-------|-----------|----------|---------------------------------|------|
/// | q0    | (2, 0.1)  | g0       | g0 ...                          | 1    |
/// | q1    | (0.1, 1)  | g5       | g1 .995, g4 .774, g5 .633       | 3    |
/// | q2    | (-1, -1)  | g2       | g2 = g3 .707                    | 1    |
/// | q3    | (1, -1)   | g1       | g0 = g3 .707, g4 0, g1 = g2     | 4    |
///
/// R@1 = 2/4, R@5 = 4/4; k = 10 exceeds the six images and is dropped.
fn metric_reproduction() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vectors: [(&str, [f32; 2]); 10] = [
        ("img/g0", [1.0, 0.0]),
        ("img/g1", [0.0, 1.0]),
        ("img/g2", [-1.0, 0.0]),
        ("img/g3", [0.0, -1.0]),
        ("img/g4", [1.0, 1.0]),
        ("img/g5", [-1.0, 1.0]),
        ("cap/q0", [2.0, 0.1]),
        ("cap/q1", [0.1, 1.0]),
        ("cap/q2", [-1.0, -1.0]),
        ("cap/q3", [1.0, -1.0]),
    ];
    let rows = Array2::from_shape_fn((10, 2), |(i, j)| vectors[i].1[j]);
    let ids: Vec<String> = vectors.iter().map(|(id, _)| id.to_string()).collect();
    let dump_path = dir.path().join("excerpt.e5v");
    write_dump(&dump_path, &rows, &ids).map_err(|e| e.to_string())?;

    let mut manifest = String::new();
    for g in 0..6 {
        manifest.push_str(&format!(
            "{{\"dataset\":\"flickr30k-excerpt\",\"role\":\"gallery\",\"id\":\"g{g}\",\"modality\":\"image\",\"dump_id\":\"img/g{g}\"}}\n"
        ));
    }
    for (q, rel) in ["g0", "g5", "g2", "g1"].iter().enumerate() {
        manifest.push_str(&format!(
            "{{\"dataset\":\"flickr30k-excerpt\",\"role\":\"query\",\"id\":\"q{q}\",\"dump_id\":\"cap/q{q}\",\"relevant\":[\"{rel}\"]}}\n"
        ));
    }
    let manifest_path = dir.path().join("excerpt.jsonl");
    std::fs::write(&manifest_path, manifest).map_err(|e| e.to_string())?;

    let dump = read_dump(&dump_path).map_err(|e| e.to_string())?;
    let tasks = load_manifest(&manifest_path).map_err(|e| e.to_string())?;
    let catalog = catalog_default();
    let ctx = EvalContext {
        dump: Some(&dump),
        ks: vec![1, 5, 10],
        ..EvalContext::new(&catalog)
    };
    let bundle = eval_suite(&ctx, &tasks).map_err(|e| e.to_string())?;
    let DatasetResult::Recall(report) = &bundle.datasets[0].result else {
        return Err("expected a recall result".into());
    };
    ensure(report.first_relevant_rank == vec![1, 3, 1, 4], || {
        format!("ranks {:?}", report.first_relevant_rank)
    })?;
    ensure(report.ks == vec![1, 5] && report.recall == vec![0.5, 1.0], || {
        format!("recall {:?} at {:?}", report.recall, report.ks)
    })?;
    let csv = "dataset,metric,k,value\nflickr30k-excerpt,recall,1,0.5\nflickr30k-excerpt,recall,5,1\n";
    ensure(bundle.to_csv() == csv, || format!("report csv:\n{}", bundle.to_csv()))?;
    Ok("10-item excerpt: ranks [1, 3, 1, 4], R@1 0.5, R@5 1.0".into())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, outcome: Check| {
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {why} [{took:.2?}]");
            }
        }
    };
    let limits = [1u64, 30, 30, 300, 60, 10, 5, 10, 10];
    let timed = |n: usize, f: &mut dyn FnMut() -> Check| -> (Instant, Check) {
        let start = Instant::now();
        let out = f().and_then(|detail| {
            let took = start.elapsed();
            ensure(took < Duration::from_secs(limits[n - 1]), || {
                format!("{detail}; took {took:.2?}")
            })?;
            Ok(detail)
        });
        (start, out)
    };

    let (s, r) = timed(1, &mut uniform_loss);
    report(1, "uniform batch loss", s, r);
    let (s, r) = timed(2, &mut gradient_fidelity);
    report(2, "gradient vs finite differences", s, r);
    let (s, r) = timed(3, &mut metric_oracles);
    report(3, "retrieval metric oracles", s, r);

    let start = Instant::now();
    match train_reference() {
        Ok(mut t) => {
            let out = transfer(&t).and_then(|detail| {
                let took = start.elapsed();
                ensure(took < Duration::from_secs(300), || format!("{detail}; took {took:.2?}"))?;
                Ok(detail)
            });
            report(4, "text-only training transfers to images", start, out);
            let (s, r) = timed(5, &mut || gap_direction(&mut t));
            report(5, "modality gap direction", s, r);
        }
        Err(why) => {
            report(4, "text-only training transfers to images", start, Err(why.clone()));
            report(
                5,
                "modality gap direction",
                Instant::now(),
                Err(format!("no trained encoder: {why}")),
            );
        }
    }

    let (s, r) = timed(6, &mut pca_oracle);
    report(6, "PCA vs dense eigensolver", s, r);
    let (s, r) = timed(7, &mut render_determinism);
    report(7, "render determinism and wrap", s, r);
    let (s, r) = timed(8, &mut dump_roundtrip);
    report(8, "dump round trip", s, r);
    let (s, r) = timed(9, &mut metric_reproduction);
    report(9, "metric layer reproduces a dump", s, r);

    if failed == 0 {
        println!("acceptance: all 9 criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria FAIL");
        ExitCode::FAILURE
    }
}
