//! Command-line entry point wiring all modules into runnable experiments.
//!
//! Every command honors `--seed`, writes machine-readable output, and exits
//! nonzero on any validation or invariant failure. Commands that produce
//! files also write a `manifest.json` with the fully resolved configuration.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::cip::{self, PromptVariant};
use crate::fewshot::{self, FusionFactor};
use crate::fusion::ModelParams;
use crate::geometry::{
    self, det_psd, gram, kernel_gram, volume, Embedding, KernelSpec,
};
use crate::grads::{self, grad_check, grad_kernel_volume};
use crate::losses::{loss_a2d_s, loss_align_s, loss_d2a_s, Anchor, TripletVec};
use crate::synthdata::{episode_records, gaussian, gen_class_centers, gen_episode, save_embeddings, GeneratorConfig};
use crate::trainer::{
    self, heldout_episodes, load_checkpoint, save_checkpoint, total_loss, total_loss_value,
    LossVariant, TrainConfig,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Synth(#[from] crate::synthdata::SynthError),
    #[error(transparent)]
    Fewshot(#[from] fewshot::FewshotError),
    #[error(transparent)]
    Cip(#[from] cip::CipError),
    #[error(transparent)]
    Grad(#[from] grads::GradError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

/// On-disk configuration: a `[train]` table and a `[generator]` table, both
/// optional, both fully defaulted.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig, CliError> {
        match path {
            None => Ok(AppConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

/// Provenance record written alongside every output artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix: u64,
    pub ended_unix: u64,
    pub outputs: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &AppConfig,
    seed: u64,
    started: u64,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(cfg).unwrap(),
        seed,
        started_unix: started,
        ended_unix: unix_now(),
        outputs: outputs
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelKind {
    Linear,
    Polynomial,
    Rbf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossVariantArg {
    None,
    Infonce,
    LinearVolume,
    KernelVolume,
}

impl From<LossVariantArg> for LossVariant {
    fn from(v: LossVariantArg) -> Self {
        match v {
            LossVariantArg::None => LossVariant::None,
            LossVariantArg::Infonce => LossVariant::InfoNce,
            LossVariantArg::LinearVolume => LossVariant::LinearVolume,
            LossVariantArg::KernelVolume => LossVariant::KernelVolume,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnchorArg {
    Text,
    Vision,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    MainText,
    Appendix,
}

impl From<VariantArg> for PromptVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::MainText => PromptVariant::MainText,
            VariantArg::Appendix => PromptVariant::AppendixTemplate,
        }
    }
}

/// Flags that override values read from the config file.
#[derive(Debug, Args, Clone, Copy)]
struct Overrides {
    /// Seed for all randomness in this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature override.
    #[arg(long)]
    tau: Option<f64>,
    /// Kernel family override.
    #[arg(long, value_enum)]
    kernel: Option<KernelKind>,
    /// RBF bandwidth (used with --kernel rbf).
    #[arg(long)]
    sigma: Option<f64>,
    /// Alignment loss variant override.
    #[arg(long, value_enum)]
    loss_variant: Option<LossVariantArg>,
    /// Contrastive anchor override.
    #[arg(long, value_enum)]
    anchor: Option<AnchorArg>,
}

impl Overrides {
    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.generator.seed = seed;
        }
        if let Some(tau) = self.tau {
            cfg.train.temperature = tau;
        }
        if let Some(kind) = self.kernel {
            cfg.train.kernel = match kind {
                KernelKind::Linear => KernelSpec::Linear,
                KernelKind::Polynomial => KernelSpec::Polynomial {
                    offset: 1.0,
                    degree: 2,
                },
                KernelKind::Rbf => KernelSpec::Rbf {
                    bandwidth: self.sigma.unwrap_or(1.0),
                },
            };
        } else if let Some(sigma) = self.sigma {
            cfg.train.kernel = KernelSpec::Rbf { bandwidth: sigma };
        }
        if let Some(v) = self.loss_variant {
            cfg.train.loss_variant = v.into();
        }
        if let Some(a) = self.anchor {
            cfg.train.anchor = match a {
                AnchorArg::Text => Anchor::Text,
                AnchorArg::Vision => Anchor::Vision,
            };
        }
    }
}

#[derive(Parser)]
#[command(name = "volign", version, about = "Kernelized volume alignment experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the geometric identity suite and report per-identity max error.
    Identities {
        /// Random instances per identity.
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: flip a sign in one identity's expected value.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Check analytic gradients of volumes, losses, and the full objective
    /// against central finite differences.
    Gradcheck {
        /// Random instances per gradient target.
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the fusion model on synthetic episodes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Fusion factor between text and vision prototypes.
        #[arg(long, default_value_t = 0.5)]
        u: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every loss variant on shared seeds and compare on shared
    /// held-out episodes.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0.5)]
        u: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep the fusion factor over a grid and report the accuracy curve.
    SweepU {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        grid_step: f64,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate synthetic episode embedding files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the staged class-description prompt.
    GenPrompt {
        #[arg(long)]
        class_name: String,
        #[arg(long, value_enum, default_value_t = VariantArg::Appendix)]
        variant: VariantArg,
        /// Opaque image references substituted into the prompt.
        #[arg(long)]
        image_ref: Vec<String>,
    },
    /// Fetch a class description from a chat-completions endpoint. The
    /// bearer token is read from the VOLIGN_API_TOKEN environment variable.
    Describe {
        #[arg(long)]
        class_name: String,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        #[arg(long, value_enum, default_value_t = VariantArg::Appendix)]
        variant: VariantArg,
        #[arg(long)]
        image_ref: Vec<String>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Identities {
            count,
            seed,
            inject_bug,
        } => cmd_identities(count, seed, inject_bug),
        Command::Gradcheck { count, seed } => cmd_gradcheck(count, seed),
        Command::Train {
            config,
            out_dir,
            overrides,
        } => cmd_train(config.as_deref(), &out_dir, overrides),
        Command::Eval {
            checkpoint,
            config,
            episodes,
            u,
            out_dir,
            overrides,
        } => cmd_eval(&checkpoint, config.as_deref(), episodes, u, out_dir.as_deref(), overrides),
        Command::Ablate {
            config,
            seeds,
            episodes,
            u,
            out_dir,
            overrides,
        } => cmd_ablate(config.as_deref(), seeds, episodes, u, out_dir.as_deref(), overrides),
        Command::SweepU {
            checkpoint,
            config,
            grid_step,
            episodes,
            out_dir,
            overrides,
        } => cmd_sweep_u(
            &checkpoint,
            config.as_deref(),
            grid_step,
            episodes,
            out_dir.as_deref(),
            overrides,
        ),
        Command::GenData {
            config,
            out_dir,
            episodes,
            overrides,
        } => cmd_gen_data(config.as_deref(), &out_dir, episodes, overrides),
        Command::GenPrompt {
            class_name,
            variant,
            image_ref,
        } => cmd_gen_prompt(&class_name, variant.into(), &image_ref),
        Command::Describe {
            class_name,
            endpoint,
            model,
            timeout,
            variant,
            image_ref,
        } => cmd_describe(&class_name, &endpoint, &model, timeout, variant.into(), &image_ref),
    }
}

// ---------------------------------------------------------------------------
// identities

/// Result of one identity over `instances` random cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rand_unit(dim: usize, rng: &mut ChaCha8Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if let Ok(e) = Embedding::unit(v) {
            return e;
        }
    }
}

fn rand_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a random Gaussian matrix
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &q {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= proj * c;
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            for x in v.iter_mut() {
                *x /= n;
            }
            q.push(v);
        }
    }
    q
}

fn apply_orthogonal(q: &[Vec<f64>], v: &Embedding) -> Embedding {
    let out: Vec<f64> = q
        .iter()
        .map(|row| row.iter().zip(v.values()).map(|(a, b)| a * b).sum())
        .collect();
    Embedding::new(out).unwrap()
}

/// Run the full geometric identity suite. `inject_bug` flips the sign of the
/// expected value in the two-vector identity as a negative control.
pub fn identity_suite(count: usize, seed: u64, inject_bug: bool) -> Vec<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |name: &str, max_error: f64, tolerance: f64, instances: usize| {
        reports.push(IdentityReport {
            name: name.to_string(),
            instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        });
    };

    // two unit vectors: volume equals sin of the angle between them
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 2 + i % 7;
        let a = rand_unit(dim, &mut rng);
        let b = rand_unit(dim, &mut rng);
        let cos = a.dot(&b).unwrap();
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let expected = if inject_bug { -sin } else { sin };
        let vol = volume(&[a, b]).unwrap();
        err = err.max((vol - expected).abs());
    }
    push("two_vector_sine", err, 1e-9, count);

    // three unit vectors: det(G) matches the cofactor expansion
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 3 + i % 6;
        let t = rand_unit(dim, &mut rng);
        let s = rand_unit(dim, &mut rng);
        let v = rand_unit(dim, &mut rng);
        let ts = t.dot(&s).unwrap();
        let sv = s.dot(&v).unwrap();
        let tv = t.dot(&v).unwrap();
        let expansion = 1.0 - sv * sv - ts * ts - tv * tv + 2.0 * ts * sv * tv;
        let det = det_psd(&gram(&[t, s, v]).unwrap()).unwrap();
        err = err.max((det - expansion).abs());
    }
    push("three_vector_expansion", err, 1e-12, count);

    // a single vector: volume equals its norm
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 1 + i % 8;
        let scale = 0.1 + 3.0 * rng.gen::<f64>();
        let v = Embedding::new(
            rand_unit(dim.max(2), &mut rng)
                .values()
                .iter()
                .map(|x| x * scale)
                .collect(),
        )
        .unwrap();
        let vol = volume(std::slice::from_ref(&v)).unwrap();
        err = err.max((vol - v.norm()).abs());
    }
    push("single_vector_norm", err, 1e-12, count);

    // more vectors than dimensions: the volume collapses
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 2 + i % 4;
        let vs: Vec<Embedding> = (0..dim + 1).map(|_| rand_unit(dim, &mut rng)).collect();
        err = err.max(volume(&vs).unwrap());
    }
    push("rank_deficiency", err, 1e-9, count);

    // volumes are invariant under orthogonal transforms
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 4 + i % 5;
        let vs: Vec<Embedding> = (0..3).map(|_| rand_unit(dim, &mut rng)).collect();
        let q = rand_orthogonal(dim, &mut rng);
        let rotated: Vec<Embedding> = vs.iter().map(|v| apply_orthogonal(&q, v)).collect();
        err = err.max((volume(&vs).unwrap() - volume(&rotated).unwrap()).abs());
    }
    push("orthogonal_invariance", err, 1e-9, count);

    // RBF kernel Grams stay positive semidefinite
    let mut err = 0.0f64;
    for i in 0..count {
        let dim = 3 + i % 6;
        let k = 2 + i % 5;
        let bandwidth = 0.5 + 1.5 * rng.gen::<f64>();
        let vs: Vec<Embedding> = (0..k).map(|_| rand_unit(dim, &mut rng)).collect();
        let g = kernel_gram(&KernelSpec::Rbf { bandwidth }, &vs).unwrap();
        err = err.max((-g.min_eigenvalue()).max(0.0));
    }
    push("rbf_psd", err, 1e-10, count);

    reports
}

fn cmd_identities(count: usize, seed: u64, inject_bug: bool) -> Result<i32, CliError> {
    let reports = identity_suite(count, seed, inject_bug);
    println!("{}", serde_json::to_string_pretty(&reports).unwrap());
    if reports.iter().all(|r| r.passed) {
        Ok(0)
    } else {
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        eprintln!("failed identities: {}", failing.join(", "));
        Ok(1)
    }
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub target: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn embeddings_from_flat(flat: &[f64], k: usize, dim: usize) -> Vec<Embedding> {
    (0..k)
        .map(|i| Embedding::new(flat[i * dim..(i + 1) * dim].to_vec()).unwrap())
        .collect()
}

/// Tape gradient of an alignment loss with respect to every triplet
/// component, flattened batch-major.
fn loss_grad_tape<FLoss>(
    triplets: &[TripletVec<f64>],
    f: FLoss,
) -> (f64, Vec<f64>)
where
    FLoss: for<'t> Fn(&[TripletVec<crate::autodiff::Var<'t>>]) -> crate::autodiff::Var<'t>,
{
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let lifted: Vec<TripletVec<crate::autodiff::Var>> = triplets
        .iter()
        .map(|t| {
            let mut out: TripletVec<crate::autodiff::Var> =
                [Vec::new(), Vec::new(), Vec::new()];
            for (slot, vec) in t.iter().enumerate() {
                out[slot] = vec
                    .iter()
                    .map(|&x| {
                        let v = tape.var(x);
                        leaves.push(v.index());
                        v
                    })
                    .collect();
            }
            out
        })
        .collect();
    let loss = f(&lifted);
    let adj = tape.gradients(loss);
    (
        crate::autodiff::Scalar::value(loss),
        leaves.iter().map(|&i| adj[i]).collect(),
    )
}

/// Run finite-difference checks on every analytic gradient path. Returns one
/// report per target.
pub fn gradcheck_suite(count: usize, seed: u64) -> Vec<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = [
        KernelSpec::Linear,
        KernelSpec::Polynomial {
            offset: 1.0,
            degree: 2,
        },
        KernelSpec::Rbf { bandwidth: 1.0 },
    ];
    let tol = 1e-4;
    let mut reports = Vec::new();

    // kernel_volume analytic gradient
    let mut max_err = 0.0f64;
    let mut done = 0;
    let dim = 8;
    while done < count {
        let spec = kernels[done % kernels.len()];
        let vs: Vec<Embedding> = (0..3).map(|_| rand_unit(dim, &mut rng)).collect();
        let gset = match grad_kernel_volume(&spec, &vs) {
            Ok(g) => g,
            Err(_) => continue, // degenerate draw; resample
        };
        let flat: Vec<f64> = vs.iter().flat_map(|v| v.values().to_vec()).collect();
        let analytic: Vec<f64> = gset.per_input.into_iter().flatten().collect();
        let f = |x: &[f64]| {
            geometry::kernel_volume(&spec, &embeddings_from_flat(x, 3, dim)).unwrap()
        };
        let report = grad_check(f, &analytic, &flat, tol).unwrap();
        max_err = max_err.max(report.max_relative_error);
        done += 1;
    }
    reports.push(GradcheckReport {
        target: "kernel_volume".into(),
        instances: count,
        max_relative_error: max_err,
        tolerance: tol,
        passed: max_err <= tol,
    });

    // alignment losses via the tape
    let b = 3;
    let ldim = 6;
    for (name, which) in [("loss_d2a", 0usize), ("loss_a2d", 1), ("loss_align", 2)] {
        let mut max_err = 0.0f64;
        for i in 0..count {
            let spec = kernels[i % kernels.len()];
            let tau = 0.2;
            let triplets: Vec<TripletVec<f64>> = (0..b)
                .map(|_| {
                    [
                        rand_unit(ldim, &mut rng).values().to_vec(),
                        rand_unit(ldim, &mut rng).values().to_vec(),
                        rand_unit(ldim, &mut rng).values().to_vec(),
                    ]
                })
                .collect();
            let (_, analytic) = loss_grad_tape(&triplets, |ts| match which {
                0 => loss_d2a_s(ts, &spec, tau, Anchor::Text),
                1 => loss_a2d_s(ts, &spec, tau, Anchor::Text),
                _ => loss_align_s(ts, &spec, tau, Anchor::Text),
            });
            let flat: Vec<f64> = triplets.iter().flatten().flatten().copied().collect();
            let f = |x: &[f64]| {
                let ts: Vec<TripletVec<f64>> = (0..b)
                    .map(|bi| {
                        let base = bi * 3 * ldim;
                        [
                            x[base..base + ldim].to_vec(),
                            x[base + ldim..base + 2 * ldim].to_vec(),
                            x[base + 2 * ldim..base + 3 * ldim].to_vec(),
                        ]
                    })
                    .collect();
                match which {
                    0 => loss_d2a_s(&ts, &spec, tau, Anchor::Text),
                    1 => loss_a2d_s(&ts, &spec, tau, Anchor::Text),
                    _ => loss_align_s(&ts, &spec, tau, Anchor::Text),
                }
            };
            let report = grad_check(f, &analytic, &flat, tol).unwrap();
            max_err = max_err.max(report.max_relative_error);
        }
        reports.push(GradcheckReport {
            target: name.into(),
            instances: count,
            max_relative_error: max_err,
            tolerance: tol,
            passed: max_err <= tol,
        });
    }

    // full objective over all fusion parameters, on a tiny model
    let gen = GeneratorConfig {
        class_pool: 5,
        dim: 6,
        token_count: 2,
        seed,
        ..GeneratorConfig::default()
    };
    let centers = gen_class_centers(&gen).unwrap();
    let total_instances = count.div_ceil(4);
    let mut max_err = 0.0f64;
    for i in 0..total_instances {
        let cfg = TrainConfig {
            n_way: 2,
            k_shot: 1,
            m_query: 1,
            gate_hidden: 3,
            heads: 2,
            loss_variant: match i % 4 {
                0 => LossVariant::None,
                1 => LossVariant::InfoNce,
                2 => LossVariant::LinearVolume,
                _ => LossVariant::KernelVolume,
            },
            ..TrainConfig::default()
        };
        let ep = gen_episode(&gen, &centers, cfg.n_way, cfg.k_shot, cfg.m_query, &mut rng)
            .unwrap();
        let params = ModelParams::init(cfg.model_dims(gen.dim), seed ^ (i as u64 + 1)).unwrap();
        let eval = total_loss(&ep, &params, &cfg).unwrap();
        let keep = trainer::alignment_mask(&ep, &params, &cfg);
        let flat = params.flatten();
        let f = |x: &[f64]| total_loss_value(&ep, &params.from_flat(x), &cfg, &keep);
        let report = grad_check(f, &eval.grad, &flat, tol).unwrap();
        max_err = max_err.max(report.max_relative_error);
    }
    reports.push(GradcheckReport {
        target: "total_loss".into(),
        instances: total_instances,
        max_relative_error: max_err,
        tolerance: tol,
        passed: max_err <= tol,
    });

    reports
}

fn cmd_gradcheck(count: usize, seed: u64) -> Result<i32, CliError> {
    let reports = gradcheck_suite(count, seed);
    println!("{}", serde_json::to_string_pretty(&reports).unwrap());
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// train / eval / ablate / sweep-u

fn cmd_train(
    config: Option<&Path>,
    out_dir: &Path,
    overrides: Overrides,
) -> Result<i32, CliError> {
    let started = unix_now();
    let mut cfg = AppConfig::load(config)?;
    overrides.apply(&mut cfg);
    std::fs::create_dir_all(out_dir)?;
    let (params, trace) = trainer::train(&cfg.train, &cfg.generator)?;
    let ckpt = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &params)?;
    let metrics = out_dir.join("metrics.csv");
    let mut csv = String::from("epoch,total_loss,ce_loss,align_loss,train_accuracy,degenerate_batches\n");
    for r in &trace {
        csv.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{}\n",
            r.epoch, r.total_loss, r.ce_loss, r.align_loss, r.train_accuracy, r.degenerate_batches
        ));
    }
    std::fs::write(&metrics, csv)?;
    write_manifest(
        out_dir,
        "train",
        &cfg,
        cfg.train.seed,
        started,
        &[ckpt.clone(), metrics.clone()],
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "checkpoint": ckpt.to_string_lossy(),
            "metrics": metrics.to_string_lossy(),
            "epochs": trace.len(),
            "final": trace.last(),
        }))
        .unwrap()
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    mean_accuracy: f64,
    ci95_half_width: f64,
    episodes: usize,
    u: f64,
}

fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    episodes: usize,
    u: f64,
    out_dir: Option<&Path>,
    overrides: Overrides,
) -> Result<i32, CliError> {
    let started = unix_now();
    let mut cfg = AppConfig::load(config)?;
    overrides.apply(&mut cfg);
    let params = load_checkpoint(checkpoint)?;
    let u = FusionFactor::new(u)?;
    let eval_seed = cfg.train.seed.wrapping_add(0xE7A1);
    let eps = heldout_episodes(&cfg.generator, &cfg.train, episodes, eval_seed)?;
    let accs: Vec<f64> = eps
        .iter()
        .map(|ep| {
            fewshot::evaluate_episode(ep, &params, cfg.train.fusion_mode, u, cfg.train.temperature)
        })
        .collect::<Result<_, _>>()?;
    let (mean, ci) = trainer::mean_ci95(&accs);
    let report = EvalReport {
        mean_accuracy: mean,
        ci95_half_width: ci,
        episodes,
        u: u.get(),
    };
    let text = serde_json::to_string_pretty(&report).unwrap();
    println!("{text}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("eval.json");
        std::fs::write(&path, &text)?;
        write_manifest(dir, "eval", &cfg, cfg.train.seed, started, &[path])?;
    }
    Ok(0)
}

fn cmd_ablate(
    config: Option<&Path>,
    seeds: usize,
    episodes: usize,
    u: f64,
    out_dir: Option<&Path>,
    overrides: Overrides,
) -> Result<i32, CliError> {
    let started = unix_now();
    let mut cfg = AppConfig::load(config)?;
    overrides.apply(&mut cfg);
    let u = FusionFactor::new(u)?;
    let eval_seed = cfg.train.seed.wrapping_add(0xAB1A);
    let heldout = heldout_episodes(&cfg.generator, &cfg.train, episodes, eval_seed)?;
    let variants: Vec<(String, TrainConfig)> = [
        ("none", LossVariant::None),
        ("infonce", LossVariant::InfoNce),
        ("linear-volume", LossVariant::LinearVolume),
        ("kernel-volume", LossVariant::KernelVolume),
    ]
    .into_iter()
    .map(|(label, v)| {
        (
            label.to_string(),
            TrainConfig {
                loss_variant: v,
                ..cfg.train
            },
        )
    })
    .collect();
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.train.seed.wrapping_add(s)).collect();
    let rows = trainer::ablate(&cfg.train, &cfg.generator, &variants, &seed_list, &heldout, u)?;
    let mut tsv = String::from("variant\tmean_accuracy\tci95_half_width\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{:?}\t{:?}\n",
            r.label, r.mean_accuracy, r.ci95_half_width
        ));
    }
    print!("{tsv}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("ablation.json");
        let table = dir.join("ablation.tsv");
        std::fs::write(&json, serde_json::to_string_pretty(&rows).unwrap())?;
        std::fs::write(&table, &tsv)?;
        write_manifest(dir, "ablate", &cfg, cfg.train.seed, started, &[json, table])?;
    }
    Ok(0)
}

fn cmd_sweep_u(
    checkpoint: &Path,
    config: Option<&Path>,
    grid_step: f64,
    episodes: usize,
    out_dir: Option<&Path>,
    overrides: Overrides,
) -> Result<i32, CliError> {
    let started = unix_now();
    let mut cfg = AppConfig::load(config)?;
    overrides.apply(&mut cfg);
    let params = load_checkpoint(checkpoint)?;
    let eval_seed = cfg.train.seed.wrapping_add(0x5EE9);
    let eps = heldout_episodes(&cfg.generator, &cfg.train, episodes, eval_seed)?;
    let curve = fewshot::sweep_u(&eps, &params, cfg.train.fusion_mode, cfg.train.temperature, grid_step)?;
    let u_star = fewshot::grid_search_u(&eps, &params, cfg.train.fusion_mode, cfg.train.temperature, grid_step)?;
    let mut tsv = String::from("u\taccuracy\n");
    for (u, acc) in &curve {
        tsv.push_str(&format!("{u:?}\t{acc:?}\n"));
    }
    print!("{tsv}");
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({"u_star": u_star.get()})).unwrap()
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("sweep.json");
        let table = dir.join("sweep.tsv");
        std::fs::write(
            &json,
            serde_json::to_string_pretty(&serde_json::json!({
                "curve": curve,
                "u_star": u_star.get(),
            }))
            .unwrap(),
        )?;
        std::fs::write(&table, &tsv)?;
        write_manifest(dir, "sweep-u", &cfg, cfg.train.seed, started, &[json, table])?;
    }
    Ok(0)
}

fn cmd_gen_data(
    config: Option<&Path>,
    out_dir: &Path,
    episodes: usize,
    overrides: Overrides,
) -> Result<i32, CliError> {
    let started = unix_now();
    let mut cfg = AppConfig::load(config)?;
    overrides.apply(&mut cfg);
    std::fs::create_dir_all(out_dir)?;
    let centers = gen_class_centers(&cfg.generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.generator.seed);
    let mut outputs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let ep = gen_episode(
            &cfg.generator,
            &centers,
            cfg.train.n_way,
            cfg.train.k_shot,
            cfg.train.m_query,
            &mut rng,
        )?;
        let path = out_dir.join(format!("episode_{i}.jsonl"));
        save_embeddings(&path, &episode_records(&ep))?;
        outputs.push(path);
    }
    write_manifest(out_dir, "gen-data", &cfg, cfg.generator.seed, started, &outputs)?;
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "episodes": episodes,
            "out_dir": out_dir.to_string_lossy(),
        }))
        .unwrap()
    );
    Ok(0)
}

fn cmd_gen_prompt(
    class_name: &str,
    variant: PromptVariant,
    image_refs: &[String],
) -> Result<i32, CliError> {
    let prompt = cip::build_prompt(class_name, image_refs, variant)?;
    print!("{prompt}");
    Ok(0)
}

fn cmd_describe(
    class_name: &str,
    endpoint: &str,
    model: &str,
    timeout: u64,
    variant: PromptVariant,
    image_refs: &[String],
) -> Result<i32, CliError> {
    let token = std::env::var(cip::AUTH_TOKEN_ENV).map_err(|_| {
        CliError::Config(format!("set {} to authenticate", cip::AUTH_TOKEN_ENV))
    })?;
    let mut client = cip::ClientConfig::new(endpoint, model, &token)?;
    client.timeout = Duration::from_secs(timeout);
    let prompt = cip::build_prompt(class_name, image_refs, variant)?;
    let mut descriptor = cip::request_description(&client, &prompt, variant)?;
    descriptor.class_name = class_name.to_string();
    println!("{}", serde_json::to_string_pretty(&descriptor).unwrap());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_suite_passes_cleanly() {
        let reports = identity_suite(100, 7, false);
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed, "{}: max err {}", r.name, r.max_error);
        }
    }

    #[test]
    fn injected_bug_fails_named_identity() {
        let reports = identity_suite(50, 7, true);
        let bad: Vec<&IdentityReport> = reports.iter().filter(|r| !r.passed).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].name, "two_vector_sine");
    }

    #[test]
    fn gradcheck_suite_passes() {
        let reports = gradcheck_suite(6, 3);
        assert_eq!(reports.len(), 5);
        for r in &reports {
            assert!(r.passed, "{}: max rel err {}", r.target, r.max_relative_error);
        }
    }

    #[test]
    fn config_roundtrip_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        let text = "[train]\nepochs = 2\ntemperature = 0.3\n\n[generator]\ndim = 16\n";
        std::fs::write(&path, text).unwrap();
        let mut cfg = AppConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.temperature, 0.3);
        assert_eq!(cfg.generator.dim, 16);
        // unspecified fields fall back to defaults
        assert_eq!(cfg.train.learning_rate, 5e-4);
        let ov = Overrides {
            seed: Some(9),
            tau: Some(0.5),
            kernel: Some(KernelKind::Rbf),
            sigma: Some(2.0),
            loss_variant: Some(LossVariantArg::Infonce),
            anchor: Some(AnchorArg::Vision),
        };
        ov.apply(&mut cfg);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.generator.seed, 9);
        assert_eq!(cfg.train.temperature, 0.5);
        assert_eq!(cfg.train.kernel, KernelSpec::Rbf { bandwidth: 2.0 });
        assert_eq!(cfg.train.loss_variant, LossVariant::InfoNce);
        assert_eq!(cfg.train.anchor, Anchor::Vision);
    }

    #[test]
    fn bad_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nepochs = \"many\"\n").unwrap();
        assert!(matches!(
            AppConfig::load(Some(&path)),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn gen_prompt_exit_codes() {
        assert_eq!(
            run(["volign", "gen-prompt", "--class-name", "robin"]),
            0
        );
        assert_eq!(run(["volign", "gen-prompt", "--class-name", ""]), 1);
        assert_eq!(run(["volign", "no-such-command"]), 2);
    }
}
