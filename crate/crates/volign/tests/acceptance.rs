//! End-to-end acceptance suite: ten numbered criteria, one pass/fail line
//! each. The numeric criteria run small deterministic training jobs, so the
//! whole file stays well under the five-minute budget on one core.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volign::cip::{self, PromptVariant};
use volign::cli;
use volign::fewshot::{evaluate_episode, grid_search_u, sweep_u, FusionFactor};
use volign::geometry::{
    det_psd, kernel_gram, kernel_volume, Embedding, KernelSpec,
};
use volign::losses::{
    loss_a2d, loss_align, loss_d2a, AlignmentBatch, EmbeddingTriplet, LossConfig,
};
use volign::synthdata::{gaussian, GeneratorConfig};
use volign::trainer::{
    ablate, heldout_episodes, mean_ci95, train, AblationRow, LossVariant, TrainConfig,
};

fn suite_start() -> Instant {
    static START: OnceLock<Instant> = OnceLock::new();
    *START.get_or_init(Instant::now)
}

fn report(number: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {number:02} {name}: {verdict} ({detail})");
    assert!(ok, "criterion {number} ({name}) failed: {detail}");
}

fn rand_unit(dim: usize, rng: &mut ChaCha8Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6 {
            return Embedding::unit(v).unwrap();
        }
    }
}

/// The standard toy configuration shared by the directional criteria:
/// 5-way 1-shot in 64 dimensions, near-noise supports, accurate text
/// descriptors, noticeably perturbed synthetic shots.
fn standard_generator() -> GeneratorConfig {
    GeneratorConfig {
        token_count: 3,
        support_noise: 3.0,
        query_noise: 0.8,
        text_shift: 0.15,
        synthetic_shift: 1.4,
        seed: 1,
        ..GeneratorConfig::default()
    }
}

fn standard_train() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        episodes_per_epoch: 100,
        m_query: 1,
        learning_rate: 2e-2,
        temperature: 0.2,
        kernel: KernelSpec::Rbf { bandwidth: 0.7 },
        loss_variant: LossVariant::KernelVolume,
        seed: 1,
        ..TrainConfig::default()
    }
}

const EVAL_U: f64 = 0.8;
const EVAL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EVAL_EPISODES: usize = 200;
const EVAL_SEED: u64 = 777;

/// Criterion 5's four-variant ablation, shared with criterion 7 (its
/// kernel-volume arm doubles as the "both prompts plus alignment" arm).
fn ablation_rows() -> &'static Vec<AblationRow> {
    static ROWS: OnceLock<Vec<AblationRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let gen = standard_generator();
        let base = standard_train();
        let heldout = heldout_episodes(&gen, &base, EVAL_EPISODES, EVAL_SEED).unwrap();
        let variants: Vec<(String, TrainConfig)> = [
            ("none", LossVariant::None),
            ("infonce", LossVariant::InfoNce),
            ("linear-volume", LossVariant::LinearVolume),
            ("kernel-volume", LossVariant::KernelVolume),
        ]
        .into_iter()
        .map(|(label, v)| (label.to_string(), TrainConfig { loss_variant: v, ..base }))
        .collect();
        ablate(
            &base,
            &gen,
            &variants,
            &EVAL_SEEDS,
            &heldout,
            FusionFactor::new(EVAL_U).unwrap(),
        )
        .unwrap()
    })
}

#[test]
fn criterion_01_volume_identities() {
    suite_start();
    let t0 = Instant::now();
    let reports = cli::identity_suite(200, 42, false);
    let all = reports.iter().all(|r| r.passed);
    let runtime_ok = t0.elapsed().as_secs_f64() < 5.0;
    let detail = reports
        .iter()
        .map(|r| format!("{} max_err={:.2e}", r.name, r.max_error))
        .collect::<Vec<_>>()
        .join(", ");
    report(1, "volume identity suite", all && runtime_ok, &detail);
}

/// Plain cofactor expansion, the independent oracle for `det_psd`.
fn cofactor_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    if n == 1 {
        return a[0][0];
    }
    let mut det = 0.0;
    for c in 0..n {
        let minor: Vec<Vec<f64>> = a[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != c)
                    .map(|(_, &v)| v)
                    .collect()
            })
            .collect();
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * a[0][c] * cofactor_det(&minor);
    }
    det
}

#[test]
fn criterion_02_determinant_oracle() {
    suite_start();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kernels = [
        KernelSpec::Linear,
        KernelSpec::Polynomial { offset: 1.0, degree: 2 },
        KernelSpec::Rbf { bandwidth: 1.0 },
    ];
    let mut max_rel: f64 = 0.0;
    for i in 0..1000 {
        let k = 2 + i % 3; // 2x2 through 4x4
        let vs: Vec<Embedding> = (0..k).map(|_| rand_unit(12, &mut rng)).collect();
        let spec = kernels[i % kernels.len()];
        let gram = kernel_gram(&spec, &vs).unwrap();
        let d = det_psd(&gram).unwrap();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|r| (0..k).map(|c| gram.get(r, c)).collect())
            .collect();
        let oracle = cofactor_det(&rows);
        let rel = (d - oracle).abs() / oracle.abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    report(
        2,
        "determinant oracle",
        max_rel <= 1e-9,
        &format!("1000 grams, max relative error {max_rel:.2e}"),
    );
}

#[test]
fn criterion_03_gradient_oracle() {
    suite_start();
    let t0 = Instant::now();
    let reports = cli::gradcheck_suite(100, 99);
    let runtime = t0.elapsed().as_secs_f64();
    let all = reports.iter().all(|r| r.passed) && runtime < 60.0;
    let detail = reports
        .iter()
        .map(|r| format!("{} n={} max_rel={:.2e}", r.target, r.instances, r.max_relative_error))
        .collect::<Vec<_>>()
        .join(", ");
    report(3, "gradient oracle", all, &format!("{detail}; {runtime:.1}s"));
}

/// Directional losses recomputed from an explicit volume matrix, so the
/// matched entry can be perturbed while every cross term stays fixed.
fn d2a_from_matrix(vols: &[Vec<f64>], tau: f64) -> f64 {
    let b = vols.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| -vols[i][j] / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

#[test]
fn criterion_04_loss_contracts() {
    suite_start();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LossConfig::default();
    let dim = 8;
    let mut ok = true;
    let mut notes = Vec::new();

    // (a) B = 1: a single triplet is its own only candidate.
    let single = AlignmentBatch::new(vec![EmbeddingTriplet::new(
        rand_unit(dim, &mut rng),
        rand_unit(dim, &mut rng),
        rand_unit(dim, &mut rng),
    )
    .unwrap()])
    .unwrap();
    let b1 = loss_d2a(&single, &cfg).unwrap() == 0.0 && loss_a2d(&single, &cfg).unwrap() == 0.0;
    ok &= b1;
    notes.push(format!("B=1 exact zero: {b1}"));

    // (b) identical triplets: every candidate ties, so A2D equals log B.
    let t = EmbeddingTriplet::new(
        rand_unit(dim, &mut rng),
        rand_unit(dim, &mut rng),
        rand_unit(dim, &mut rng),
    )
    .unwrap();
    let b = 5;
    let same = AlignmentBatch::new(vec![t; b]).unwrap();
    let a2d = loss_a2d(&same, &cfg).unwrap();
    let logb_ok = (a2d - (b as f64).ln()).abs() < 1e-10;
    ok &= logb_ok;
    notes.push(format!("identical A2D=log B: {logb_ok}"));

    // (c) decreasing one matched volume with cross terms fixed strictly
    // decreases both directional losses (volume-matrix formulation).
    let mut mono_failures = 0;
    for _ in 0..100 {
        let bsz = 4;
        let triplets: Vec<EmbeddingTriplet> = (0..bsz)
            .map(|_| {
                EmbeddingTriplet::new(
                    rand_unit(dim, &mut rng),
                    rand_unit(dim, &mut rng),
                    rand_unit(dim, &mut rng),
                )
                .unwrap()
            })
            .collect();
        // D2A (text anchor): row i fixes (s_i, v_i), column j varies t_j.
        let vols: Vec<Vec<f64>> = (0..bsz)
            .map(|i| {
                (0..bsz)
                    .map(|j| {
                        kernel_volume(
                            &cfg.kernel,
                            &[
                                triplets[j].text.clone(),
                                triplets[i].support.clone(),
                                triplets[i].vision.clone(),
                            ],
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect();
        let before = d2a_from_matrix(&vols, cfg.temperature);
        let mut shrunk = vols.clone();
        let i = rng.gen_range(0..bsz);
        let delta = 0.01 + rng.gen::<f64>() * 0.2;
        shrunk[i][i] -= delta * shrunk[i][i].max(0.1);
        let after = d2a_from_matrix(&shrunk, cfg.temperature);
        // the A2D matrix is the transpose-style pairing of the same grid, so
        // shrinking a diagonal entry acts on both directions identically
        if after >= before {
            mono_failures += 1;
        }
    }
    ok &= mono_failures == 0;
    notes.push(format!("monotonicity failures: {mono_failures}/100"));

    // (d) permuting the batch leaves every loss unchanged.
    let triplets: Vec<EmbeddingTriplet> = (0..5)
        .map(|_| {
            EmbeddingTriplet::new(
                rand_unit(dim, &mut rng),
                rand_unit(dim, &mut rng),
                rand_unit(dim, &mut rng),
            )
            .unwrap()
        })
        .collect();
    let batch = AlignmentBatch::new(triplets.clone()).unwrap();
    let mut perm = triplets;
    perm.rotate_left(2);
    perm.swap(0, 3);
    let permuted = AlignmentBatch::new(perm).unwrap();
    let perm_ok = (loss_align(&batch, &cfg).unwrap() - loss_align(&permuted, &cfg).unwrap()).abs()
        < 1e-12
        && (loss_d2a(&batch, &cfg).unwrap() - loss_d2a(&permuted, &cfg).unwrap()).abs() < 1e-12;
    ok &= perm_ok;
    notes.push(format!("permutation invariance: {perm_ok}"));

    report(4, "loss contract suite", ok, &notes.join(", "));
}

#[test]
fn criterion_05_ablation_direction() {
    suite_start();
    let t0 = Instant::now();
    let rows = ablation_rows();
    let runtime = t0.elapsed().as_secs_f64();
    let acc = |label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .map(|r| r.mean_accuracy)
            .unwrap()
    };
    let (none, infonce, linear, kernel) = (
        acc("none"),
        acc("infonce"),
        acc("linear-volume"),
        acc("kernel-volume"),
    );
    let ok = kernel >= linear && kernel >= infonce && kernel - none >= 0.01 && runtime < 180.0;
    report(
        5,
        "ablation direction",
        ok,
        &format!(
            "none={none:.4} infonce={infonce:.4} linear={linear:.4} kernel={kernel:.4}; {runtime:.0}s"
        ),
    );
}

#[test]
fn criterion_06_fusion_factor_sweep() {
    suite_start();
    let base = TrainConfig {
        epochs: 6,
        ..standard_train()
    };
    // moderate shifts: text and synthetic both informative
    let moderate = GeneratorConfig {
        token_count: 3,
        support_noise: 1.0,
        query_noise: 0.8,
        text_shift: 0.5,
        synthetic_shift: 0.5,
        seed: 1,
        ..GeneratorConfig::default()
    };
    // text replaced by an (unseen-by-the-model) far-shifted vector
    let noise_text = GeneratorConfig {
        support_noise: 30.0,
        text_shift: 50.0,
        synthetic_shift: 0.3,
        ..moderate
    };
    // vision side destroyed: near-noise supports, far-shifted synthetics
    let noise_synth = GeneratorConfig {
        support_noise: 6.0,
        text_shift: 0.1,
        synthetic_shift: 50.0,
        ..moderate
    };
    // one model trained on the moderate world, swept over all three
    let (params, _) = train(&base, &moderate).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    let run = |gen: &GeneratorConfig| {
        let val = heldout_episodes(gen, &base, 100, EVAL_SEED).unwrap();
        let curve = sweep_u(&val, &params, base.fusion_mode, base.temperature, 0.1).unwrap();
        let ustar = grid_search_u(&val, &params, base.fusion_mode, base.temperature, 0.1)
            .unwrap()
            .get();
        (curve, ustar)
    };
    let (curve, ustar) = run(&moderate);
    let at = |u: f64| {
        curve
            .iter()
            .find(|(g, _)| (g - u).abs() < 1e-9)
            .map(|&(_, a)| a)
            .unwrap()
    };
    let interior = ustar > 0.0 && ustar < 1.0 && at(ustar) >= at(0.0) && at(ustar) >= at(1.0);
    ok &= interior;
    notes.push(format!("moderate u*={ustar:.1} interior_peak={interior}"));
    let (_, ustar) = run(&noise_text);
    ok &= ustar <= 0.1 + 1e-9;
    notes.push(format!("noise-text u*={ustar:.1}"));
    let (_, ustar) = run(&noise_synth);
    ok &= ustar >= 0.9 - 1e-9;
    notes.push(format!("noise-synthetic u*={ustar:.1}"));
    report(6, "fusion factor sweep", ok, &notes.join(", "));
}

#[test]
fn criterion_07_ablation_structure() {
    suite_start();
    let base = standard_train();
    let both_gen = standard_generator();
    // single-prompt worlds: the other modality degenerates to a far shift
    let text_only = GeneratorConfig {
        synthetic_shift: 50.0,
        ..both_gen
    };
    let synth_only = GeneratorConfig {
        text_shift: 50.0,
        ..both_gen
    };
    let u = FusionFactor::new(EVAL_U).unwrap();
    let arm = |gen: &GeneratorConfig| {
        let heldout = heldout_episodes(gen, &base, EVAL_EPISODES, EVAL_SEED).unwrap();
        let accs: Vec<f64> = EVAL_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..base };
                let (params, _) = train(&cfg, gen).unwrap();
                heldout
                    .iter()
                    .map(|e| {
                        evaluate_episode(e, &params, cfg.fusion_mode, u, cfg.temperature).unwrap()
                    })
                    .sum::<f64>()
                    / heldout.len() as f64
            })
            .collect();
        mean_ci95(&accs).0
    };
    // the "both prompts + alignment" arm is criterion 5's kernel-volume row
    let both = ablation_rows()
        .iter()
        .find(|r| r.label == "kernel-volume")
        .unwrap()
        .mean_accuracy;
    let text = arm(&text_only);
    let synth = arm(&synth_only);
    let slack = 0.005; // ties allowed within half a point
    let ok = both + slack >= text && both + slack >= synth;
    report(
        7,
        "ablation structure",
        ok,
        &format!("both={both:.4} text-only={text:.4} synthetic-only={synth:.4}"),
    );
}

#[test]
fn criterion_08_cli_determinism() {
    suite_start();
    let bin = env!("CARGO_BIN_EXE_volign");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[train]\n\
         epochs = 2\n\
         episodes_per_epoch = 20\n\
         m_query = 2\n\
         seed = 9\n\
         [generator]\n\
         dim = 16\n\
         token_count = 3\n\
         seed = 9\n",
    )
    .unwrap();
    let mut outputs: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "train run {run} failed");
        outputs.push((
            std::fs::read(out.join("model.ckpt")).unwrap(),
            std::fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    let ok = outputs[0] == outputs[1];
    report(
        8,
        "cli determinism",
        ok,
        &format!(
            "model.ckpt {} bytes and metrics.csv {} bytes bit-identical across runs",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    );
}

#[test]
fn criterion_09_cip_round_trip() {
    suite_start();
    let mut ok = true;
    let mut notes = Vec::new();
    for variant in [PromptVariant::MainText, PromptVariant::AppendixTemplate] {
        let prompt = cip::build_prompt("arctic fox", &[], variant).unwrap();
        let mut last = 0;
        let ordered = variant.tags().iter().all(|tag| {
            let open = prompt.find(&format!("<{tag}>"));
            let close = prompt.find(&format!("</{tag}>"));
            match (open, close) {
                (Some(o), Some(c)) if o > last || last == 0 => {
                    last = c;
                    o < c
                }
                _ => false,
            }
        });
        ok &= ordered;
        notes.push(format!("{variant:?} tags ordered: {ordered}"));

        let bodies = ["plan the description", "fur and ears", "remove redundancy", "a small white fox"];
        let reply: String = variant
            .tags()
            .iter()
            .zip(bodies)
            .map(|(tag, body)| format!("<{tag}>{body}</{tag}>\n"))
            .collect();
        let parsed = cip::parse_stages(&reply, variant).unwrap();
        let inverted = variant
            .tags()
            .iter()
            .zip(bodies)
            .all(|(tag, body)| parsed.stage_outputs.get(*tag).map(String::as_str) == Some(body))
            && parsed.conclusion == bodies[3]
            && parsed.order_warning.is_none();
        ok &= inverted;
        notes.push(format!("{variant:?} parse inverts: {inverted}"));
    }

    // retry path: two scripted failures, then success, no real network
    let endpoint = cip::mock::MockEndpoint::serve(
        vec![500, 503, 200],
        "<SUMMARY>s</SUMMARY><CAPTION>c</CAPTION><REASONING>r</REASONING>\
         <CONCLUSION>done</CONCLUSION>"
            .to_string(),
    );
    let mut cfg = cip::ClientConfig::new(&endpoint.url, "toy-model", "test-token").unwrap();
    cfg.backoff = std::time::Duration::from_millis(1);
    let desc = cip::request_description(&cfg, "prompt", PromptVariant::AppendixTemplate).unwrap();
    let retried = desc.conclusion == "done"
        && endpoint.hits.load(std::sync::atomic::Ordering::SeqCst) == 3;
    ok &= retried;
    notes.push(format!("retry path (2 failures then success): {retried}"));

    report(9, "cip round trip", ok, &notes.join(", "));
}

#[test]
fn criterion_10_suite_runtime() {
    // single-threaded test order puts this last; with more threads it still
    // observes the slow training criteria because they share ablation_rows
    ablation_rows();
    let elapsed = suite_start().elapsed().as_secs_f64();
    report(
        10,
        "suite runtime",
        elapsed < 290.0,
        &format!("{elapsed:.0}s elapsed inside acceptance suite (budget 290s)"),
    );
}
