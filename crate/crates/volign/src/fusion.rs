//! Cross-modal fusion: inject text semantics into support tokens via a
//! sigmoid channel gate, then mix tokens with one multi-head self-attention
//! block, producing the enhanced support embedding Z_s.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_sum_exp, Scalar, Tape, Var};
use crate::geometry::{Embedding, GeometryError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token set is empty")]
    EmptyTokenSet,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Support patch tokens (plus optionally one prepended text token).
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub tokens: Vec<Embedding>,
}

impl TokenSet {
    pub fn new(tokens: Vec<Embedding>) -> Result<Self, FusionError> {
        if tokens.is_empty() {
            return Err(FusionError::EmptyTokenSet);
        }
        let dim = tokens[0].dim();
        for t in &tokens[1..] {
            if t.dim() != dim {
                return Err(FusionError::ShapeMismatch {
                    context: "token set",
                    expected: dim,
                    got: t.dim(),
                });
            }
        }
        Ok(TokenSet { tokens })
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.tokens.iter().map(|t| t.values().to_vec()).collect()
    }
}

/// Dense row-major matrix of generic scalars; `apply` computes `M x`.
#[derive(Debug, Clone)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| S::dot(&self.data[r * self.cols..(r + 1) * self.cols], x))
            .collect()
    }
}

impl Mat<f64> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                .collect(),
        }
    }

    fn lift<'t>(&self, tape: &'t Tape, leaves: &mut Vec<usize>) -> Mat<Var<'t>> {
        let data: Vec<Var<'t>> = self
            .data
            .iter()
            .map(|&v| {
                let var = tape.var(v);
                leaves.push(var.index());
                var
            })
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Two-layer sigmoid gate: w1 maps [text; avg(support)] to the hidden
/// width, w2 maps back to the embedding dimension.
#[derive(Debug, Clone)]
pub struct GateParams<S> {
    pub w1: Mat<S>,
    pub w2: Mat<S>,
}

/// Per-head query/key/value projections plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<S> {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Vec<Mat<S>>,
    pub wk: Vec<Mat<S>>,
    pub wv: Vec<Mat<S>>,
    pub wo: Mat<S>,
}

/// All trainable parameters of the fusion path.
#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub gate: GateParams<S>,
    pub attention: AttentionParams<S>,
    pub text_projection: Mat<S>,
}

/// Whether the attention block runs after the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    GateOnly,
    GateAndAttention,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::GateAndAttention
    }
}

/// Shape hyperparameters for [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub text_dim: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(FusionError::ShapeMismatch {
                context: "heads must divide dim",
                expected: self.dim,
                got: self.heads,
            });
        }
        Ok(())
    }
}

impl Default for ModelDims {
    // Desk-scale defaults: dim 64, 4 heads, gate hidden width 32.
    fn default() -> Self {
        ModelDims {
            dim: 64,
            hidden: 32,
            heads: 4,
            text_dim: 64,
        }
    }
}

impl ModelParams<f64> {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, FusionError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hd = dims.head_dim();
        let gate = GateParams {
            w1: Mat::init(dims.hidden, 2 * dims.dim, &mut rng),
            w2: Mat::init(dims.dim, dims.hidden, &mut rng),
        };
        let attention = AttentionParams {
            heads: dims.heads,
            head_dim: hd,
            wq: (0..dims.heads)
                .map(|_| Mat::init(hd, dims.dim, &mut rng))
                .collect(),
            wk: (0..dims.heads)
                .map(|_| Mat::init(hd, dims.dim, &mut rng))
                .collect(),
            wv: (0..dims.heads)
                .map(|_| Mat::init(hd, dims.dim, &mut rng))
                .collect(),
            wo: Mat::init(dims.dim, dims.dim, &mut rng),
        };
        Ok(ModelParams {
            gate,
            attention,
            text_projection: Mat::init(dims.dim, dims.text_dim, &mut rng),
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self, FusionError> {
        dims.validate()?;
        let hd = dims.head_dim();
        Ok(ModelParams {
            gate: GateParams {
                w1: Mat::zeros(dims.hidden, 2 * dims.dim),
                w2: Mat::zeros(dims.dim, dims.hidden),
            },
            attention: AttentionParams {
                heads: dims.heads,
                head_dim: hd,
                wq: (0..dims.heads).map(|_| Mat::zeros(hd, dims.dim)).collect(),
                wk: (0..dims.heads).map(|_| Mat::zeros(hd, dims.dim)).collect(),
                wv: (0..dims.heads).map(|_| Mat::zeros(hd, dims.dim)).collect(),
                wo: Mat::zeros(dims.dim, dims.dim),
            },
            text_projection: Mat::zeros(dims.dim, dims.text_dim),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            dim: self.gate.w2.rows,
            hidden: self.gate.w1.rows,
            heads: self.attention.heads,
            text_dim: self.text_projection.cols,
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Mat<f64>)> {
        let mut out: Vec<(&'static str, &Mat<f64>)> = vec![
            ("gate.w1", &self.gate.w1),
            ("gate.w2", &self.gate.w2),
        ];
        for m in &self.attention.wq {
            out.push(("attention.wq", m));
        }
        for m in &self.attention.wk {
            out.push(("attention.wk", m));
        }
        for m in &self.attention.wv {
            out.push(("attention.wv", m));
        }
        out.push(("attention.wo", &self.attention.wo));
        out.push(("text_projection", &self.text_projection));
        out
    }

    /// All parameters in a fixed flattening order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.data.iter().copied())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().into_iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Rebuild parameters from a flat slice in `flatten` order.
    pub fn from_flat(&self, flat: &[f64]) -> ModelParams<f64> {
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for m in out.tensors_mut() {
            for v in &mut m.data {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat<f64>> {
        let mut out: Vec<&mut Mat<f64>> =
            vec![&mut self.gate.w1, &mut self.gate.w2];
        out.extend(self.attention.wq.iter_mut());
        out.extend(self.attention.wk.iter_mut());
        out.extend(self.attention.wv.iter_mut());
        out.push(&mut self.attention.wo);
        out.push(&mut self.text_projection);
        out
    }

    /// Record all parameters as tape leaves, returning the lifted params and
    /// the leaf node index for each flat component (in `flatten` order).
    pub fn lift<'t>(&self, tape: &'t Tape) -> (ModelParams<Var<'t>>, Vec<usize>) {
        let mut leaves = Vec::with_capacity(self.param_count());
        let gate = GateParams {
            w1: self.gate.w1.lift(tape, &mut leaves),
            w2: self.gate.w2.lift(tape, &mut leaves),
        };
        let attention = AttentionParams {
            heads: self.attention.heads,
            head_dim: self.attention.head_dim,
            wq: self
                .attention
                .wq
                .iter()
                .map(|m| m.lift(tape, &mut leaves))
                .collect(),
            wk: self
                .attention
                .wk
                .iter()
                .map(|m| m.lift(tape, &mut leaves))
                .collect(),
            wv: self
                .attention
                .wv
                .iter()
                .map(|m| m.lift(tape, &mut leaves))
                .collect(),
            wo: self.attention.wo.lift(tape, &mut leaves),
        };
        let text_projection = self.text_projection.lift(tape, &mut leaves);
        (
            ModelParams {
                gate,
                attention,
                text_projection,
            },
            leaves,
        )
    }
}

fn avg<S: Scalar>(tokens: &[Vec<S>]) -> Vec<S> {
    let n = tokens[0][0].constant(tokens.len() as f64);
    let dim = tokens[0].len();
    (0..dim)
        .map(|d| {
            let mut acc = tokens[0][0].constant(0.0);
            for t in tokens {
                acc = acc + t[d];
            }
            acc / n
        })
        .collect()
}

fn unit_normalize_s<S: Scalar>(x: &[S]) -> Vec<S> {
    let n = S::dot(x, x).sqrt();
    x.iter().map(|&v| v / n).collect()
}

/// Gate vector and modulated tokens:
/// beta = sigmoid(W2 sigmoid(W1 [text; avg(support)])), tokens scaled by
/// beta channelwise.
pub fn channel_gate_s<S: Scalar>(
    text: &[S],
    support: &[Vec<S>],
    p: &GateParams<S>,
) -> (Vec<S>, Vec<Vec<S>>) {
    let pooled = avg(support);
    let mut concat = text.to_vec();
    concat.extend_from_slice(&pooled);
    let hidden: Vec<S> = p.w1.apply(&concat).into_iter().map(|h| h.sigmoid()).collect();
    let beta: Vec<S> = p.w2.apply(&hidden).into_iter().map(|h| h.sigmoid()).collect();
    let modulated = support
        .iter()
        .map(|t| t.iter().zip(&beta).map(|(&x, &b)| x * b).collect())
        .collect();
    (beta, modulated)
}

/// One multi-head self-attention block over the token set.
pub fn self_attend_s<S: Scalar>(tokens: &[Vec<S>], p: &AttentionParams<S>) -> Vec<Vec<S>> {
    let t = tokens.len();
    let scale = 1.0 / (p.head_dim as f64).sqrt();
    // concat_out[i] collects all head outputs for token i
    let mut concat_out: Vec<Vec<S>> = vec![Vec::with_capacity(p.heads * p.head_dim); t];
    for h in 0..p.heads {
        let q: Vec<Vec<S>> = tokens.iter().map(|x| p.wq[h].apply(x)).collect();
        let k: Vec<Vec<S>> = tokens.iter().map(|x| p.wk[h].apply(x)).collect();
        let v: Vec<Vec<S>> = tokens.iter().map(|x| p.wv[h].apply(x)).collect();
        for i in 0..t {
            let scores: Vec<S> = (0..t)
                .map(|j| {
                    let dot = S::dot(&q[i], &k[j]);
                    dot * dot.constant(scale)
                })
                .collect();
            let lse = log_sum_exp(&scores);
            let attn: Vec<S> = scores.iter().map(|&s| (s - lse).exp()).collect();
            for d in 0..p.head_dim {
                let mut acc = attn[0].constant(0.0);
                for j in 0..t {
                    acc = acc + attn[j] * v[j][d];
                }
                concat_out[i].push(acc);
            }
        }
    }
    concat_out.iter().map(|c| p.wo.apply(c)).collect()
}

/// Full fusion: project text, gate, optionally attend with the text token
/// prepended, pool the support-derived tokens, unit-normalize.
///
/// After attention only the support tokens are pooled; the text token's
/// information reaches them through the attention mixing.
pub fn fuse_s<S: Scalar>(
    text_raw: &[S],
    support: &[Vec<S>],
    params: &ModelParams<S>,
    mode: FusionMode,
) -> Vec<S> {
    let text = params.text_projection.apply(text_raw);
    let (_beta, modulated) = channel_gate_s(&text, support, &params.gate);
    let pooled = match mode {
        FusionMode::GateOnly => avg(&modulated),
        FusionMode::GateAndAttention => {
            let mut tokens = vec![text];
            tokens.extend(modulated);
            let attended = self_attend_s(&tokens, &params.attention);
            avg(&attended[1..])
        }
    };
    unit_normalize_s(&pooled)
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<(), FusionError> {
    if expected != got {
        return Err(FusionError::ShapeMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// f64 channel gate over domain types.
pub fn channel_gate(
    text: &Embedding,
    support: &TokenSet,
    p: &GateParams<f64>,
) -> Result<(Embedding, TokenSet), FusionError> {
    check_dim("gate input", p.w1.cols, text.dim() + support.dim())?;
    check_dim("gate output", p.w2.rows, support.dim())?;
    let (beta, modulated) = channel_gate_s(text.values(), &support.to_vecs(), p);
    let beta = Embedding::new(beta)?;
    let tokens = modulated
        .into_iter()
        .map(|t| Embedding::new(t).map_err(FusionError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((beta, TokenSet::new(tokens)?))
}

/// f64 self-attention over domain types.
pub fn self_attend(ts: &TokenSet, p: &AttentionParams<f64>) -> Result<TokenSet, FusionError> {
    check_dim("attention input", p.heads * p.head_dim, ts.dim())?;
    check_dim("attention output", p.wo.rows, ts.dim())?;
    let out = self_attend_s(&ts.to_vecs(), p);
    let tokens = out
        .into_iter()
        .map(|t| Embedding::new(t).map_err(FusionError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenSet::new(tokens)?)
}

/// f64 fusion producing the enhanced support embedding Z_s.
pub fn fuse(
    text_raw: &Embedding,
    support: &TokenSet,
    params: &ModelParams<f64>,
    mode: FusionMode,
) -> Result<Embedding, FusionError> {
    check_dim("text projection", params.text_projection.cols, text_raw.dim())?;
    check_dim(
        "support dim",
        params.text_projection.rows,
        support.dim(),
    )?;
    let out = fuse_s(text_raw.values(), &support.to_vecs(), params, mode);
    let e = Embedding::new(out)?;
    // output of fuse_s is already unit-norm; tag it
    Ok(e.normalize()?)
}
