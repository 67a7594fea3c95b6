//! Episodic training loop, the total objective (cross-entropy plus the
//! alignment loss), the AdamW optimizer, and the ablation harness.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Var};
use crate::fewshot::{evaluate_episode, Episode, FewshotError, FusionFactor};
use crate::fusion::{fuse_s, FusionError, FusionMode, Mat, ModelDims, ModelParams};
use crate::geometry::KernelSpec;
use crate::losses::{
    classify_s, cross_entropy_s, loss_align_s, loss_infonce_s, Anchor, TripletVec,
};
use crate::synthdata::{gen_class_centers, gen_episode, GeneratorConfig, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which alignment term joins the cross-entropy objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    None,
    InfoNce,
    LinearVolume,
    KernelVolume,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_variant: LossVariant,
    pub kernel: KernelSpec,
    pub temperature: f64,
    pub anchor: Anchor,
    pub fusion_mode: FusionMode,
    pub gate_hidden: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            episodes_per_epoch: 20,
            n_way: 5,
            k_shot: 1,
            m_query: 5,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            loss_variant: LossVariant::KernelVolume,
            kernel: KernelSpec::default(),
            temperature: 0.2,
            anchor: Anchor::Text,
            fusion_mode: FusionMode::GateAndAttention,
            gate_hidden: 32,
            heads: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_dims(&self, dim: usize) -> ModelDims {
        ModelDims {
            dim,
            hidden: self.gate_hidden,
            heads: self.heads,
            text_dim: dim,
        }
    }
}

/// One completed epoch of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    pub align_loss: f64,
    pub train_accuracy: f64,
    pub degenerate_batches: usize,
}

pub type MetricsTrace = Vec<EpochRecord>;

/// Result of evaluating the total objective with gradients.
#[derive(Debug)]
pub struct LossEval {
    pub total: f64,
    pub ce: f64,
    pub align: f64,
    pub grad: Vec<f64>,
    pub degenerate_skips: usize,
    pub train_accuracy: f64,
}

struct EpisodeData {
    text: Vec<Vec<f64>>,
    support: Vec<Vec<Vec<Vec<f64>>>>, // class -> shot -> token -> dim
    query: Vec<Vec<Vec<f64>>>,
    synthetic: Vec<Vec<Vec<f64>>>,
}

impl EpisodeData {
    fn from_episode(ep: &Episode) -> Self {
        EpisodeData {
            text: ep.text_desc.iter().map(|t| t.values().to_vec()).collect(),
            support: ep
                .support
                .iter()
                .map(|shots| {
                    shots
                        .iter()
                        .map(|ts| ts.tokens.iter().map(|t| t.values().to_vec()).collect())
                        .collect()
                })
                .collect(),
            query: ep
                .query
                .iter()
                .map(|qs| qs.iter().map(|q| q.values().to_vec()).collect())
                .collect(),
            synthetic: ep
                .synthetic
                .iter()
                .map(|ss| ss.iter().map(|s| s.values().to_vec()).collect())
                .collect(),
        }
    }
}

fn lift_vec<'t>(tape: &'t Tape, v: &[f64]) -> Vec<Var<'t>> {
    v.iter().map(|&x| tape.var(x)).collect()
}

fn mean_normalized<S: Scalar>(vs: &[Vec<S>]) -> Vec<S> {
    let dim = vs[0].len();
    let inv = vs[0][0].constant(1.0 / vs.len() as f64);
    let mean: Vec<S> = (0..dim)
        .map(|d| {
            let mut acc = vs[0][0].constant(0.0);
            for v in vs {
                acc = acc + v[d];
            }
            acc * inv
        })
        .collect();
    let mut sq = mean[0].constant(0.0);
    for &m in &mean {
        sq = sq + m * m;
    }
    let n = sq.sqrt();
    mean.into_iter().map(|m| m / n).collect()
}

struct ObjectiveOut<S> {
    total: S,
    ce: S,
    align: S,
    correct: usize,
}

/// The shared forward pass: text-enhanced prototypes, query cross-entropy,
/// and the configured alignment term over per-class triplets.
fn episode_objective<S: Scalar>(
    data: &EpisodeData,
    text: &[Vec<S>],
    support: &[Vec<Vec<Vec<S>>>],
    query: &[Vec<Vec<S>>],
    synthetic: &[Vec<Vec<S>>],
    params: &ModelParams<S>,
    cfg: &TrainConfig,
    align_keep: &[bool],
) -> ObjectiveOut<S> {
    let n = data.text.len();
    let zero = text[0][0].constant(0.0);

    // per-class fused support samples and text-enhanced prototypes
    let mut prototypes: Vec<Vec<S>> = Vec::with_capacity(n);
    for c in 0..n {
        let fused: Vec<Vec<S>> = support[c]
            .iter()
            .map(|tokens| fuse_s(&text[c], tokens, params, cfg.fusion_mode))
            .collect();
        prototypes.push(mean_normalized(&fused));
    }

    // cross-entropy summed over all queries
    let mut ce = zero;
    let mut correct = 0usize;
    for (label, qs) in query.iter().enumerate() {
        for q in qs {
            let probs = classify_s(q, &prototypes, cfg.temperature);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.value().partial_cmp(&b.1.value()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
            ce = ce + cross_entropy_s(&probs, label);
        }
    }

    // alignment triplets: (text, fused-support prototype, mean synthetic)
    let align = if cfg.loss_variant == LossVariant::None {
        zero
    } else {
        let triplets: Vec<TripletVec<S>> = (0..n)
            .filter(|&c| align_keep[c])
            .map(|c| {
                [
                    text[c].clone(),
                    prototypes[c].clone(),
                    mean_normalized(&synthetic[c]),
                ]
            })
            .collect();
        if triplets.is_empty() {
            zero
        } else {
            match cfg.loss_variant {
                LossVariant::None => zero,
                LossVariant::InfoNce => {
                    loss_infonce_s(&triplets, cfg.temperature, cfg.anchor)
                }
                LossVariant::LinearVolume => loss_align_s(
                    &triplets,
                    &KernelSpec::Linear,
                    cfg.temperature,
                    cfg.anchor,
                ),
                LossVariant::KernelVolume => {
                    loss_align_s(&triplets, &cfg.kernel, cfg.temperature, cfg.anchor)
                }
            }
        }
    };

    ObjectiveOut {
        total: ce + align,
        ce,
        align,
        correct,
    }
}

/// Decide, in plain f64, which classes can safely contribute alignment
/// gradients: every kernel Gram determinant the loss touches must stay away
/// from zero, where the derivative of sqrt(det) blows up.
fn degeneracy_mask(
    data: &EpisodeData,
    params: &ModelParams<f64>,
    cfg: &TrainConfig,
) -> Vec<bool> {
    let n = data.text.len();
    if cfg.loss_variant == LossVariant::None || cfg.loss_variant == LossVariant::InfoNce {
        return vec![true; n];
    }
    let kernel = match cfg.loss_variant {
        LossVariant::LinearVolume => KernelSpec::Linear,
        _ => cfg.kernel,
    };
    let mut text = Vec::with_capacity(n);
    let mut proto = Vec::with_capacity(n);
    let mut vision = Vec::with_capacity(n);
    for c in 0..n {
        let fused: Vec<Vec<f64>> = data.support[c]
            .iter()
            .map(|tokens| fuse_s(&data.text[c], tokens, params, cfg.fusion_mode))
            .collect();
        text.push(data.text[c].clone());
        proto.push(mean_normalized(&fused));
        vision.push(mean_normalized(&data.synthetic[c]));
    }
    let det3 = |t: &[f64], s: &[f64], v: &[f64]| -> f64 {
        let vol = crate::geometry::triplet_kernel_volume_s(&kernel, [t, s, v]);
        vol * vol
    };
    let mut keep = vec![true; n];
    for i in 0..n {
        for j in 0..n {
            // every denominator combination of both loss directions
            let d1 = det3(&text[j], &proto[i], &vision[i]);
            let d2 = det3(&text[i], &proto[j], &vision[j]);
            if d1 < 1e-10 || d2 < 1e-10 {
                keep[i] = false;
                keep[j] = false;
            }
        }
    }
    keep
}

/// Evaluate the total objective and its gradient over all model parameters.
///
/// Degenerate classes are excluded from the alignment term only; their
/// cross-entropy contribution always flows.
pub fn total_loss(
    episode: &Episode,
    params: &ModelParams<f64>,
    cfg: &TrainConfig,
) -> Result<LossEval, TrainError> {
    episode.validate()?;
    let data = EpisodeData::from_episode(episode);
    let keep = degeneracy_mask(&data, params, cfg);
    let skips = keep.iter().filter(|k| !**k).count();

    let tape = Tape::new();
    let (lifted, leaves) = params.lift(&tape);
    let text: Vec<Vec<Var>> = data.text.iter().map(|t| lift_vec(&tape, t)).collect();
    let support: Vec<Vec<Vec<Vec<Var>>>> = data
        .support
        .iter()
        .map(|shots| {
            shots
                .iter()
                .map(|toks| toks.iter().map(|t| lift_vec(&tape, t)).collect())
                .collect()
        })
        .collect();
    let query: Vec<Vec<Vec<Var>>> = data
        .query
        .iter()
        .map(|qs| qs.iter().map(|q| lift_vec(&tape, q)).collect())
        .collect();
    let synthetic: Vec<Vec<Vec<Var>>> = data
        .synthetic
        .iter()
        .map(|ss| ss.iter().map(|s| lift_vec(&tape, s)).collect())
        .collect();

    let out = episode_objective(
        &data, &text, &support, &query, &synthetic, &lifted, cfg, &keep,
    );
    let adj = tape.gradients(out.total);
    let grad: Vec<f64> = leaves.iter().map(|&i| adj[i]).collect();
    let total_queries = episode.n_way * episode.m_query;
    Ok(LossEval {
        total: out.total.value(),
        ce: out.ce.value(),
        align: out.align.value(),
        grad,
        degenerate_skips: skips,
        train_accuracy: out.correct as f64 / total_queries as f64,
    })
}

/// f64-only evaluation of the same objective (used by FD oracles in tests).
pub fn total_loss_value(
    episode: &Episode,
    params: &ModelParams<f64>,
    cfg: &TrainConfig,
    keep: &[bool],
) -> f64 {
    let data = EpisodeData::from_episode(episode);
    let out = episode_objective(
        &data,
        &data.text,
        &data.support,
        &data.query,
        &data.synthetic,
        params,
        cfg,
        keep,
    );
    out.total
}

/// Degeneracy mask for an episode under given parameters (test support).
pub fn alignment_mask(
    episode: &Episode,
    params: &ModelParams<f64>,
    cfg: &TrainConfig,
) -> Vec<bool> {
    degeneracy_mask(&EpisodeData::from_episode(episode), params, cfg)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One AdamW update over flat parameters.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        params[i] -= lr * weight_decay * params[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Run the episodic training loop. Deterministic for a fixed seed.
pub fn train(
    cfg: &TrainConfig,
    gen_cfg: &GeneratorConfig,
) -> Result<(ModelParams<f64>, MetricsTrace), TrainError> {
    let dims = cfg.model_dims(gen_cfg.dim);
    let mut params = ModelParams::init(dims, cfg.seed)?;
    let centers = gen_class_centers(gen_cfg)?;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    let mut state = AdamState::new(params.param_count());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut flat = params.flatten();
    for epoch in 0..cfg.epochs {
        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_align = 0.0;
        let mut sum_acc = 0.0;
        let mut degenerate = 0usize;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = gen_episode(
                gen_cfg,
                &centers,
                cfg.n_way,
                cfg.k_shot,
                cfg.m_query,
                &mut episode_rng,
            )?;
            let eval = total_loss(&ep, &params, cfg)?;
            optimizer_step(
                &mut flat,
                &eval.grad,
                &mut state,
                cfg.learning_rate,
                cfg.weight_decay,
            );
            params = params.from_flat(&flat);
            sum_total += eval.total;
            sum_ce += eval.ce;
            sum_align += eval.align;
            sum_acc += eval.train_accuracy;
            if eval.degenerate_skips > 0 {
                degenerate += 1;
            }
        }
        let n = cfg.episodes_per_epoch as f64;
        trace.push(EpochRecord {
            epoch,
            total_loss: sum_total / n,
            ce_loss: sum_ce / n,
            align_loss: sum_align / n,
            train_accuracy: sum_acc / n,
            degenerate_batches: degenerate,
        });
    }
    Ok((params, trace))
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub seeds: usize,
    pub episodes: usize,
}

/// Mean and 95% confidence half-width of a sample.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Held-out episodes shared by every ablation variant.
pub fn heldout_episodes(
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
    count: usize,
    eval_seed: u64,
) -> Result<Vec<Episode>, TrainError> {
    let centers = gen_class_centers(gen_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    (0..count)
        .map(|_| {
            gen_episode(
                gen_cfg,
                &centers,
                cfg.n_way,
                cfg.k_shot,
                cfg.m_query,
                &mut rng,
            )
            .map_err(TrainError::from)
        })
        .collect()
}

/// Train every variant with shared seeds and score on a shared held-out
/// episode set.
pub fn ablate(
    base: &TrainConfig,
    gen_cfg: &GeneratorConfig,
    variants: &[(String, TrainConfig)],
    seeds: &[u64],
    heldout: &[Episode],
    u: FusionFactor,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(variants.len());
    for (label, var_cfg) in variants {
        let mut accs = Vec::with_capacity(seeds.len() * heldout.len());
        for &seed in seeds {
            // Seeds vary the model initialization and the training episode
            // draws; the generator's class-center world stays fixed so every
            // run is scored against the same held-out distribution.
            let cfg = TrainConfig { seed, ..*var_cfg };
            let (params, _) = train(&cfg, gen_cfg)?;
            for ep in heldout {
                accs.push(evaluate_episode(
                    ep,
                    &params,
                    cfg.fusion_mode,
                    u,
                    cfg.temperature,
                )?);
            }
        }
        let (mean, ci) = mean_ci95(&accs);
        rows.push(AblationRow {
            label: label.clone(),
            mean_accuracy: mean,
            ci95_half_width: ci,
            seeds: seeds.len(),
            episodes: heldout.len(),
        });
    }
    let _ = base;
    Ok(rows)
}

/// Write model parameters as a line-oriented text checkpoint: a JSON header
/// with the shapes, then one `tensor <name> <rows> <cols>` line per tensor
/// followed by its rows (f64 values round-trip exactly).
pub fn save_checkpoint(path: &Path, params: &ModelParams<f64>) -> Result<(), TrainError> {
    let dims = params.dims();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&dims).unwrap())?;
    let mut write_tensor = |name: &str, m: &Mat<f64>| -> std::io::Result<()> {
        writeln!(w, "tensor {name} {} {}", m.rows, m.cols)?;
        for r in 0..m.rows {
            let row: Vec<String> = (0..m.cols)
                .map(|c| format!("{:?}", m.data[r * m.cols + c]))
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    };
    write_tensor("gate.w1", &params.gate.w1)?;
    write_tensor("gate.w2", &params.gate.w2)?;
    for (h, m) in params.attention.wq.iter().enumerate() {
        write_tensor(&format!("attention.wq.{h}"), m)?;
    }
    for (h, m) in params.attention.wk.iter().enumerate() {
        write_tensor(&format!("attention.wk.{h}"), m)?;
    }
    for (h, m) in params.attention.wv.iter().enumerate() {
        write_tensor(&format!("attention.wv.{h}"), m)?;
    }
    write_tensor("attention.wo", &params.attention.wo)?;
    write_tensor("text_projection", &params.text_projection)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f64>, TrainError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::CheckpointFormat("missing header".into()))??;
    let dims: ModelDims = serde_json::from_str(&header)
        .map_err(|e| TrainError::CheckpointFormat(format!("bad header: {e}")))?;
    let mut params = ModelParams::zeros(dims)?;
    let read_tensor = |lines: &mut std::io::Lines<BufReader<File>>,
                           expect_name: &str|
     -> Result<Mat<f64>, TrainError> {
        let head = lines
            .next()
            .ok_or_else(|| TrainError::CheckpointFormat("truncated checkpoint".into()))??;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" || parts[1] != expect_name {
            return Err(TrainError::CheckpointFormat(format!(
                "expected tensor {expect_name}, found {head:?}"
            )));
        }
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| TrainError::CheckpointFormat("bad row count".into()))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| TrainError::CheckpointFormat("bad col count".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| TrainError::CheckpointFormat("truncated tensor".into()))??;
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| {
                    TrainError::CheckpointFormat(format!("bad value {tok:?}"))
                })?);
            }
        }
        if data.len() != rows * cols {
            return Err(TrainError::CheckpointFormat(format!(
                "tensor {expect_name}: expected {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    };
    params.gate.w1 = read_tensor(&mut lines, "gate.w1")?;
    params.gate.w2 = read_tensor(&mut lines, "gate.w2")?;
    for h in 0..dims.heads {
        params.attention.wq[h] = read_tensor(&mut lines, &format!("attention.wq.{h}"))?;
    }
    for h in 0..dims.heads {
        params.attention.wk[h] = read_tensor(&mut lines, &format!("attention.wk.{h}"))?;
    }
    for h in 0..dims.heads {
        params.attention.wv[h] = read_tensor(&mut lines, &format!("attention.wv.{h}"))?;
    }
    params.attention.wo = read_tensor(&mut lines, "attention.wo")?;
    params.text_projection = read_tensor(&mut lines, "text_projection")?;
    Ok(params)
}
