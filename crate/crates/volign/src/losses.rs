//! Kernelized volume contrastive losses (D2A / A2D), ablation baselines,
//! and the cosine-softmax classifier with cross-entropy.
//!
//! The forward passes are written generically over [`Scalar`] so the same
//! code evaluates plain f64 losses and records gradient tapes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_sum_exp, Scalar};
use crate::geometry::{triplet_kernel_volume_s, Embedding, GeometryError, KernelSpec};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("alignment batch is empty")]
    EmptyBatch,
    #[error("prototype list is empty")]
    EmptyPrototypes,
    #[error("label {label} out of range for {classes} classes")]
    IndexOutOfRange { label: usize, classes: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("triplet member is not unit-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("probability vector sums to {0}, expected 1")]
    NotADistribution(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which modality stays fixed while negatives vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Text,
    Vision,
}

impl Default for Anchor {
    fn default() -> Self {
        Anchor::Text
    }
}

/// One class's (text, fused-support, synthetic-vision) embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingTriplet {
    pub text: Embedding,
    pub support: Embedding,
    pub vision: Embedding,
}

impl EmbeddingTriplet {
    pub fn new(
        text: Embedding,
        support: Embedding,
        vision: Embedding,
    ) -> Result<Self, LossError> {
        for e in [&text, &support, &vision] {
            let n = e.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(LossError::NotNormalized(n));
            }
            if e.dim() != text.dim() {
                return Err(LossError::Geometry(GeometryError::DimensionMismatch {
                    expected: text.dim(),
                    got: e.dim(),
                }));
            }
        }
        Ok(EmbeddingTriplet {
            text,
            support,
            vision,
        })
    }
}

/// One triplet per class instance in the batch; the batch members serve as
/// each other's negatives.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    pub triplets: Vec<EmbeddingTriplet>,
}

impl AlignmentBatch {
    pub fn new(triplets: Vec<EmbeddingTriplet>) -> Result<Self, LossError> {
        if triplets.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        Ok(AlignmentBatch { triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Temperature, kernel, and anchor choice for the alignment losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub kernel: KernelSpec,
    pub anchor: Anchor,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: DEFAULT_TAU,
            kernel: KernelSpec::default(),
            anchor: Anchor::Text,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<(), LossError> {
        if self.temperature <= 0.0 {
            return Err(LossError::InvalidTemperature(self.temperature));
        }
        self.kernel.validate()?;
        Ok(())
    }
}

/// A triplet of generic scalar vectors: `[text, support, vision]`.
pub type TripletVec<S> = [Vec<S>; 3];

const TEXT: usize = 0;
const SUPPORT: usize = 1;
const VISION: usize = 2;

fn vol3<S: Scalar>(kernel: &KernelSpec, t: &[S], s: &[S], v: &[S]) -> S {
    triplet_kernel_volume_s(kernel, [t, s, v])
}

/// Generic D2A loss over triplets: negatives vary the anchor modality.
pub fn loss_d2a_s<S: Scalar>(
    triplets: &[TripletVec<S>],
    kernel: &KernelSpec,
    tau: f64,
    anchor: Anchor,
) -> S {
    let b = triplets.len();
    let zero = triplets[0][0][0].constant(0.0);
    let inv_tau = zero.constant(1.0 / tau);
    let mut total = zero;
    for i in 0..b {
        let ti = &triplets[i];
        let logits: Vec<S> = (0..b)
            .map(|j| {
                let v = match anchor {
                    Anchor::Text => {
                        vol3(kernel, &triplets[j][TEXT], &ti[SUPPORT], &ti[VISION])
                    }
                    Anchor::Vision => {
                        vol3(kernel, &ti[TEXT], &ti[SUPPORT], &triplets[j][VISION])
                    }
                };
                -v * inv_tau
            })
            .collect();
        total = total + log_sum_exp(&logits) - logits[i];
    }
    total / zero.constant(b as f64)
}

/// Generic A2D loss: the anchor stays fixed while the other two modalities
/// vary jointly over the batch.
pub fn loss_a2d_s<S: Scalar>(
    triplets: &[TripletVec<S>],
    kernel: &KernelSpec,
    tau: f64,
    anchor: Anchor,
) -> S {
    let b = triplets.len();
    let zero = triplets[0][0][0].constant(0.0);
    let inv_tau = zero.constant(1.0 / tau);
    let mut total = zero;
    for i in 0..b {
        let ti = &triplets[i];
        let logits: Vec<S> = (0..b)
            .map(|j| {
                let tj = &triplets[j];
                let v = match anchor {
                    Anchor::Text => vol3(kernel, &ti[TEXT], &tj[SUPPORT], &tj[VISION]),
                    Anchor::Vision => vol3(kernel, &tj[TEXT], &tj[SUPPORT], &ti[VISION]),
                };
                -v * inv_tau
            })
            .collect();
        total = total + log_sum_exp(&logits) - logits[i];
    }
    total / zero.constant(b as f64)
}

/// Mean of the two directional volume losses.
pub fn loss_align_s<S: Scalar>(
    triplets: &[TripletVec<S>],
    kernel: &KernelSpec,
    tau: f64,
    anchor: Anchor,
) -> S {
    let d2a = loss_d2a_s(triplets, kernel, tau, anchor);
    let a2d = loss_a2d_s(triplets, kernel, tau, anchor);
    (d2a + a2d) / d2a.constant(2.0)
}

fn cosine_s<S: Scalar>(a: &[S], b: &[S]) -> S {
    let dot = S::dot(a, b);
    let na = S::dot(a, a);
    let nb = S::dot(b, b);
    dot / (na.sqrt() * nb.sqrt())
}

/// Symmetric pairwise InfoNCE between the anchor modality and each other
/// modality; ablation baseline only.
pub fn loss_infonce_s<S: Scalar>(triplets: &[TripletVec<S>], tau: f64, anchor: Anchor) -> S {
    let b = triplets.len();
    let zero = triplets[0][0][0].constant(0.0);
    let inv_tau = zero.constant(1.0 / tau);
    let (a_idx, others) = match anchor {
        Anchor::Text => (TEXT, [SUPPORT, VISION]),
        Anchor::Vision => (VISION, [TEXT, SUPPORT]),
    };
    let mut total = zero;
    let mut terms = 0usize;
    for &m_idx in &others {
        // anchor_i vs modality_i, negatives over anchors then over modality
        for i in 0..b {
            let pos = cosine_s(&triplets[i][a_idx], &triplets[i][m_idx]) * inv_tau;
            let over_anchor: Vec<S> = (0..b)
                .map(|j| cosine_s(&triplets[j][a_idx], &triplets[i][m_idx]) * inv_tau)
                .collect();
            let over_mod: Vec<S> = (0..b)
                .map(|j| cosine_s(&triplets[i][a_idx], &triplets[j][m_idx]) * inv_tau)
                .collect();
            total = total + log_sum_exp(&over_anchor) - pos;
            total = total + log_sum_exp(&over_mod) - pos;
            terms += 2;
        }
    }
    total / zero.constant(terms as f64)
}

/// Cosine-softmax class probabilities for a query against prototypes.
pub fn classify_s<S: Scalar>(query: &[S], prototypes: &[Vec<S>], tau: f64) -> Vec<S> {
    let inv_tau = query[0].constant(1.0 / tau);
    let logits: Vec<S> = prototypes
        .iter()
        .map(|p| cosine_s(query, p) * inv_tau)
        .collect();
    let lse = log_sum_exp(&logits);
    logits.into_iter().map(|l| (l - lse).exp()).collect()
}

/// Negative log-likelihood of the labeled class.
pub fn cross_entropy_s<S: Scalar>(probs: &[S], label: usize) -> S {
    -probs[label].ln()
}

fn batch_to_vecs(batch: &AlignmentBatch) -> Vec<TripletVec<f64>> {
    batch
        .triplets
        .iter()
        .map(|t| {
            [
                t.text.values().to_vec(),
                t.support.values().to_vec(),
                t.vision.values().to_vec(),
            ]
        })
        .collect()
}

/// D2A contrastive loss over the batch: negatives vary the anchor modality.
pub fn loss_d2a(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(loss_d2a_s(
        &batch_to_vecs(batch),
        &cfg.kernel,
        cfg.temperature,
        cfg.anchor,
    ))
}

/// A2D contrastive loss over the batch: the other two modalities vary jointly.
pub fn loss_a2d(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(loss_a2d_s(
        &batch_to_vecs(batch),
        &cfg.kernel,
        cfg.temperature,
        cfg.anchor,
    ))
}

/// Alignment loss: mean of D2A and A2D.
pub fn loss_align(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok((loss_d2a(batch, cfg)? + loss_a2d(batch, cfg)?) / 2.0)
}

/// Pairwise InfoNCE baseline.
pub fn loss_infonce(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(loss_infonce_s(
        &batch_to_vecs(batch),
        cfg.temperature,
        cfg.anchor,
    ))
}

/// Volume loss restricted to the linear kernel (ablation baseline).
pub fn loss_linear_volume(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    let cfg = LossConfig {
        kernel: KernelSpec::Linear,
        ..*cfg
    };
    loss_align(batch, &cfg)
}

/// Softmax over cosine similarities to the prototypes.
pub fn classify(
    query: &Embedding,
    prototypes: &[Embedding],
    tau: f64,
) -> Result<Vec<f64>, LossError> {
    if prototypes.is_empty() {
        return Err(LossError::EmptyPrototypes);
    }
    if tau <= 0.0 {
        return Err(LossError::InvalidTemperature(tau));
    }
    let protos: Vec<Vec<f64>> = prototypes.iter().map(|p| p.values().to_vec()).collect();
    Ok(classify_s(query.values(), &protos, tau))
}

/// Cross-entropy of a probability vector against the true label.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, LossError> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(LossError::NotADistribution(sum));
    }
    if label >= probs.len() {
        return Err(LossError::IndexOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(-probs[label].ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Embedding::unit(v).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, dim: usize) -> AlignmentBatch {
        let triplets = (0..b)
            .map(|_| {
                EmbeddingTriplet::new(
                    random_unit(rng, dim),
                    random_unit(rng, dim),
                    random_unit(rng, dim),
                )
                .unwrap()
            })
            .collect();
        AlignmentBatch::new(triplets).unwrap()
    }

    // ----- independent loop-based oracle (no shared code paths) -----

    fn oracle_kernel(spec: &KernelSpec, x: &[f64], z: &[f64]) -> f64 {
        match *spec {
            KernelSpec::Linear => x.iter().zip(z).map(|(a, b)| a * b).sum(),
            KernelSpec::Polynomial { offset, degree } => {
                let mut d = 0.0;
                for i in 0..x.len() {
                    d += x[i] * z[i];
                }
                (d + offset).powi(degree as i32)
            }
            KernelSpec::Rbf { bandwidth } => {
                let mut sq = 0.0;
                for i in 0..x.len() {
                    sq += (x[i] - z[i]) * (x[i] - z[i]);
                }
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }

    fn oracle_vol(spec: &KernelSpec, t: &[f64], s: &[f64], v: &[f64]) -> f64 {
        let vs = [t, s, v];
        let mut k = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] = oracle_kernel(spec, vs[i], vs[j]);
            }
        }
        let det = k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
            - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
            + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]);
        det.max(0.0).sqrt()
    }

    fn oracle_d2a(batch: &AlignmentBatch, cfg: &LossConfig) -> f64 {
        let b = batch.len();
        let mut total = 0.0;
        for i in 0..b {
            let ti = &batch.triplets[i];
            let num = (-oracle_vol(
                &cfg.kernel,
                ti.text.values(),
                ti.support.values(),
                ti.vision.values(),
            ) / cfg.temperature)
                .exp();
            let mut den = 0.0;
            for j in 0..b {
                let tj = &batch.triplets[j];
                let v = match cfg.anchor {
                    Anchor::Text => oracle_vol(
                        &cfg.kernel,
                        tj.text.values(),
                        ti.support.values(),
                        ti.vision.values(),
                    ),
                    Anchor::Vision => oracle_vol(
                        &cfg.kernel,
                        ti.text.values(),
                        ti.support.values(),
                        tj.vision.values(),
                    ),
                };
                den += (-v / cfg.temperature).exp();
            }
            total += -(num / den).ln();
        }
        total / b as f64
    }

    fn oracle_a2d(batch: &AlignmentBatch, cfg: &LossConfig) -> f64 {
        let b = batch.len();
        let mut total = 0.0;
        for i in 0..b {
            let ti = &batch.triplets[i];
            let num = (-oracle_vol(
                &cfg.kernel,
                ti.text.values(),
                ti.support.values(),
                ti.vision.values(),
            ) / cfg.temperature)
                .exp();
            let mut den = 0.0;
            for j in 0..b {
                let tj = &batch.triplets[j];
                let v = match cfg.anchor {
                    Anchor::Text => oracle_vol(
                        &cfg.kernel,
                        ti.text.values(),
                        tj.support.values(),
                        tj.vision.values(),
                    ),
                    Anchor::Vision => oracle_vol(
                        &cfg.kernel,
                        tj.text.values(),
                        tj.support.values(),
                        ti.vision.values(),
                    ),
                };
                den += (-v / cfg.temperature).exp();
            }
            total += -(num / den).ln();
        }
        total / b as f64
    }

    fn oracle_infonce(batch: &AlignmentBatch, cfg: &LossConfig) -> f64 {
        let b = batch.len();
        let cos = |a: &Embedding, c: &Embedding| a.cosine(c).unwrap();
        let member = |t: &EmbeddingTriplet, idx: usize| -> Embedding {
            match idx {
                0 => t.text.clone(),
                1 => t.support.clone(),
                _ => t.vision.clone(),
            }
        };
        let (a_idx, others) = match cfg.anchor {
            Anchor::Text => (0usize, [1usize, 2]),
            Anchor::Vision => (2usize, [0usize, 1]),
        };
        let mut total = 0.0;
        let mut n = 0usize;
        for &m in &others {
            for i in 0..b {
                let pos = (cos(
                    &member(&batch.triplets[i], a_idx),
                    &member(&batch.triplets[i], m),
                ) / cfg.temperature)
                    .exp();
                let mut den1 = 0.0;
                let mut den2 = 0.0;
                for j in 0..b {
                    den1 += (cos(
                        &member(&batch.triplets[j], a_idx),
                        &member(&batch.triplets[i], m),
                    ) / cfg.temperature)
                        .exp();
                    den2 += (cos(
                        &member(&batch.triplets[i], a_idx),
                        &member(&batch.triplets[j], m),
                    ) / cfg.temperature)
                        .exp();
                }
                total += -(pos / den1).ln() - (pos / den2).ln();
                n += 2;
            }
        }
        total / n as f64
    }

    #[test]
    fn d2a_single_class_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 1, 8);
        assert_eq!(loss_d2a(&batch, &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(loss_a2d(&batch, &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(loss_align(&batch, &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(loss_infonce(&batch, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn a2d_identical_triplets_is_log_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = EmbeddingTriplet::new(
            random_unit(&mut rng, 8),
            random_unit(&mut rng, 8),
            random_unit(&mut rng, 8),
        )
        .unwrap();
        for b in [2usize, 5, 9] {
            let batch = AlignmentBatch::new(vec![t.clone(); b]).unwrap();
            let got = loss_a2d(&batch, &LossConfig::default()).unwrap();
            assert!((got - (b as f64).ln()).abs() < 1e-10, "b={b}");
        }
    }

    #[test]
    fn d2a_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for anchor in [Anchor::Text, Anchor::Vision] {
            for kernel in [
                KernelSpec::Linear,
                KernelSpec::Rbf { bandwidth: 1.0 },
                KernelSpec::Polynomial {
                    offset: 1.0,
                    degree: 2,
                },
            ] {
                let cfg = LossConfig {
                    temperature: 0.2,
                    kernel,
                    anchor,
                };
                let batch = random_batch(&mut rng, 5, 16);
                let got = loss_d2a(&batch, &cfg).unwrap();
                assert!((got - oracle_d2a(&batch, &cfg)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn a2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for anchor in [Anchor::Text, Anchor::Vision] {
            let cfg = LossConfig {
                anchor,
                ..LossConfig::default()
            };
            let batch = random_batch(&mut rng, 5, 16);
            let got = loss_a2d(&batch, &cfg).unwrap();
            assert!((got - oracle_a2d(&batch, &cfg)).abs() < 1e-10);
        }
    }

    #[test]
    fn align_is_mean_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        let batch = random_batch(&mut rng, 5, 16);
        let want = (oracle_d2a(&batch, &cfg) + oracle_a2d(&batch, &cfg)) / 2.0;
        assert!((loss_align(&batch, &cfg).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn infonce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = LossConfig::default();
        let batch = random_batch(&mut rng, 5, 16);
        let got = loss_infonce(&batch, &cfg).unwrap();
        assert!((got - oracle_infonce(&batch, &cfg)).abs() < 1e-10);
    }

    #[test]
    fn linear_volume_equals_align_with_linear_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        let lin = LossConfig {
            kernel: KernelSpec::Linear,
            ..cfg
        };
        let batch = random_batch(&mut rng, 4, 12);
        assert_eq!(
            loss_linear_volume(&batch, &cfg).unwrap(),
            loss_align(&batch, &lin).unwrap()
        );
    }

    #[test]
    fn batch_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LossConfig::default();
        let batch = random_batch(&mut rng, 5, 12);
        let mut perm = batch.clone();
        perm.triplets.rotate_left(2);
        for f in [loss_d2a, loss_a2d, loss_align, loss_infonce] {
            let a = f(&batch, &cfg).unwrap();
            let b = f(&perm, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_finite_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 4, 8);
            let cfg = LossConfig::default();
            for f in [loss_d2a, loss_a2d, loss_align, loss_infonce] {
                let v = f(&batch, &cfg).unwrap();
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn matched_volume_monotonicity() {
        // Shrink the matched volume by moving support toward text while
        // keeping all cross terms fixed via a direct logit-space check.
        let tau = 0.2;
        let loss_item = |matched: f64, others: &[f64]| -> f64 {
            let num = (-matched / tau).exp();
            let den: f64 = num + others.iter().map(|v| (-v / tau).exp()).sum::<f64>();
            -(num / den).ln()
        };
        let others = [0.9, 0.7, 0.8];
        let mut prev = loss_item(0.95, &others);
        for m in [0.8, 0.6, 0.4, 0.2, 0.05] {
            let cur = loss_item(m, &others);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn classify_uniform_for_equidistant_query() {
        let protos = vec![
            Embedding::unit(vec![1.0, 0.0, 0.0]).unwrap(),
            Embedding::unit(vec![0.0, 1.0, 0.0]).unwrap(),
            Embedding::unit(vec![0.0, 0.0, 1.0]).unwrap(),
        ];
        let q = Embedding::unit(vec![1.0, 1.0, 1.0]).unwrap();
        let p = classify(&q, &protos, 0.2).unwrap();
        for pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_sharp_at_low_temperature() {
        let protos = vec![
            Embedding::unit(vec![1.0, 0.0]).unwrap(),
            Embedding::unit(vec![0.0, 1.0]).unwrap(),
        ];
        let q = Embedding::unit(vec![1.0, 0.0]).unwrap();
        let p = classify(&q, &protos, 0.01).unwrap();
        assert!(p[0] > 0.999);
    }

    #[test]
    fn classify_single_prototype() {
        let protos = vec![Embedding::unit(vec![0.0, 1.0]).unwrap()];
        let q = Embedding::unit(vec![1.0, 0.0]).unwrap();
        let p = classify(&q, &protos, 0.2).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn classify_empty_prototypes_errors() {
        let q = Embedding::unit(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            classify(&q, &[], 0.2),
            Err(LossError::EmptyPrototypes)
        ));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        let u = [0.2; 5];
        assert!((cross_entropy(&u, 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(LossError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_rejects_non_distribution() {
        assert!(matches!(
            cross_entropy(&[0.5, 0.2], 0),
            Err(LossError::NotADistribution(_))
        ));
    }
}
