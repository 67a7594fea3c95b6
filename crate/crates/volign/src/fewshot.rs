//! Episodes, prototypes, support-set enrichment, prototype combination, and
//! episode evaluation.

use thiserror::Error;

use crate::fusion::{fuse, FusionError, FusionMode, ModelParams, TokenSet};
use crate::geometry::{Embedding, GeometryError};
use crate::losses::{classify, LossError};

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("class {0} has no support samples")]
    EmptyClass(usize),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("prototype kinds {0:?} and {1:?} do not match the expected combination")]
    KindMismatch(PrototypeKind, PrototypeKind),
    #[error("validation episode set is empty")]
    EmptyValidation,
    #[error("need at least {needed} candidates, got {got}")]
    InsufficientCandidates { needed: usize, got: usize },
    #[error("fusion factor {0} outside [0, 1]")]
    InvalidFusionFactor(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// One N-way K-shot task: labeled support token sets, labeled queries, one
/// text descriptor per class, and per-class synthetic embeddings. Class
/// labels are the outer indices 0..N-1.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub support: Vec<Vec<TokenSet>>,
    pub query: Vec<Vec<Embedding>>,
    pub text_desc: Vec<Embedding>,
    pub synthetic: Vec<Vec<Embedding>>,
}

impl Episode {
    pub fn validate(&self) -> Result<(), FewshotError> {
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(FewshotError::CountMismatch(format!(
                    "{name}: expected {want}, got {got}"
                )))
            } else {
                Ok(())
            }
        };
        check("support classes", self.support.len(), self.n_way)?;
        check("query classes", self.query.len(), self.n_way)?;
        check("text descriptors", self.text_desc.len(), self.n_way)?;
        check("synthetic classes", self.synthetic.len(), self.n_way)?;
        for (c, s) in self.support.iter().enumerate() {
            check(&format!("support shots of class {c}"), s.len(), self.k_shot)?;
        }
        for (c, q) in self.query.iter().enumerate() {
            check(&format!("queries of class {c}"), q.len(), self.m_query)?;
        }
        Ok(())
    }

    /// Mean-pooled, normalized embedding of one support sample's tokens.
    pub fn support_feature(ts: &TokenSet) -> Result<Embedding, FewshotError> {
        Ok(mean_embedding(&ts.tokens)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeKind {
    Plain,
    Text,
    Vision,
    Combined,
}

/// One normalized prototype per class.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub per_class: Vec<Embedding>,
    pub kind: PrototypeKind,
}

/// Convex-combination weight between text and vision prototypes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionFactor(f64);

impl FusionFactor {
    pub fn new(u: f64) -> Result<Self, FewshotError> {
        if !(0.0..=1.0).contains(&u) || !u.is_finite() {
            return Err(FewshotError::InvalidFusionFactor(u));
        }
        Ok(FusionFactor(u))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn mean_embedding(vs: &[Embedding]) -> Result<Embedding, GeometryError> {
    let dim = vs[0].dim();
    let mut acc = vec![0.0; dim];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x / vs.len() as f64;
        }
    }
    Embedding::unit(acc)
}

/// Plain prototypes: per-class mean of support features, normalized.
pub fn prototypes(support_features: &[Vec<Embedding>]) -> Result<PrototypeSet, FewshotError> {
    let mut per_class = Vec::with_capacity(support_features.len());
    for (c, feats) in support_features.iter().enumerate() {
        if feats.is_empty() {
            return Err(FewshotError::EmptyClass(c));
        }
        per_class.push(mean_embedding(feats)?);
    }
    Ok(PrototypeSet {
        per_class,
        kind: PrototypeKind::Plain,
    })
}

/// Per-class union of real support features and synthetic features: the
/// N-way (K+K)-shot enrichment. Real samples are never mutated.
pub fn enriched_support(episode: &Episode) -> Result<Vec<Vec<Embedding>>, FewshotError> {
    episode.validate()?;
    let mut out = Vec::with_capacity(episode.n_way);
    for c in 0..episode.n_way {
        if episode.synthetic[c].len() != episode.k_shot {
            return Err(FewshotError::CountMismatch(format!(
                "synthetic shots of class {c}: expected {}, got {}",
                episode.k_shot,
                episode.synthetic[c].len()
            )));
        }
        let mut feats = Vec::with_capacity(2 * episode.k_shot);
        for ts in &episode.support[c] {
            feats.push(Episode::support_feature(ts)?);
        }
        feats.extend(episode.synthetic[c].iter().cloned());
        out.push(feats);
    }
    Ok(out)
}

/// Text-enhanced prototypes: fuse each support sample with the class text
/// descriptor, average, normalize.
pub fn prototype_text(
    episode: &Episode,
    params: &ModelParams<f64>,
    mode: FusionMode,
) -> Result<PrototypeSet, FewshotError> {
    episode.validate()?;
    let mut per_class = Vec::with_capacity(episode.n_way);
    for c in 0..episode.n_way {
        let fused: Vec<Embedding> = episode.support[c]
            .iter()
            .map(|ts| fuse(&episode.text_desc[c], ts, params, mode))
            .collect::<Result<_, _>>()?;
        per_class.push(mean_embedding(&fused)?);
    }
    Ok(PrototypeSet {
        per_class,
        kind: PrototypeKind::Text,
    })
}

/// Vision-enriched prototypes over the (K+K)-shot set.
pub fn prototype_vis(episode: &Episode) -> Result<PrototypeSet, FewshotError> {
    let enriched = enriched_support(episode)?;
    let set = prototypes(&enriched)?;
    Ok(PrototypeSet {
        per_class: set.per_class,
        kind: PrototypeKind::Vision,
    })
}

/// C = u * c_t + (1 - u) * c_v, normalized per class.
pub fn combine_prototypes(
    c_t: &PrototypeSet,
    c_v: &PrototypeSet,
    u: FusionFactor,
) -> Result<PrototypeSet, FewshotError> {
    if c_t.kind != PrototypeKind::Text || c_v.kind != PrototypeKind::Vision {
        return Err(FewshotError::KindMismatch(c_t.kind, c_v.kind));
    }
    if c_t.per_class.len() != c_v.per_class.len() {
        return Err(FewshotError::CountMismatch(format!(
            "prototype class counts {} vs {}",
            c_t.per_class.len(),
            c_v.per_class.len()
        )));
    }
    let u_val = u.get();
    let per_class = c_t
        .per_class
        .iter()
        .zip(&c_v.per_class)
        .map(|(t, v)| {
            let vals: Vec<f64> = t
                .values()
                .iter()
                .zip(v.values())
                .map(|(&a, &b)| u_val * a + (1.0 - u_val) * b)
                .collect();
            Embedding::unit(vals)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PrototypeSet {
        per_class,
        kind: PrototypeKind::Combined,
    })
}

/// Classify every query against the u-combined prototypes; fraction correct.
pub fn evaluate_episode(
    episode: &Episode,
    params: &ModelParams<f64>,
    mode: FusionMode,
    u: FusionFactor,
    tau: f64,
) -> Result<f64, FewshotError> {
    let c_t = prototype_text(episode, params, mode)?;
    let c_v = prototype_vis(episode)?;
    let combined = combine_prototypes(&c_t, &c_v, u)?;
    accuracy_against(episode, &combined.per_class, tau)
}

/// Accuracy of the episode's queries against an arbitrary prototype list.
pub fn accuracy_against(
    episode: &Episode,
    prototypes: &[Embedding],
    tau: f64,
) -> Result<f64, FewshotError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (label, qs) in episode.query.iter().enumerate() {
        for q in qs {
            let probs = classify(q, prototypes, tau)?;
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Grid search over u in [0, 1], maximizing mean validation accuracy; ties
/// break toward smaller u.
pub fn grid_search_u(
    validation: &[Episode],
    params: &ModelParams<f64>,
    mode: FusionMode,
    tau: f64,
    grid_step: f64,
) -> Result<FusionFactor, FewshotError> {
    if validation.is_empty() {
        return Err(FewshotError::EmptyValidation);
    }
    let steps = (1.0 / grid_step).round() as usize;
    let mut best_u = 0.0;
    let mut best_acc = f64::NEG_INFINITY;
    for s in 0..=steps {
        let u = (s as f64 * grid_step).min(1.0);
        let mut acc = 0.0;
        for ep in validation {
            acc += evaluate_episode(ep, params, mode, FusionFactor::new(u)?, tau)?;
        }
        acc /= validation.len() as f64;
        if acc > best_acc {
            best_acc = acc;
            best_u = u;
        }
    }
    FusionFactor::new(best_u)
}

/// Mean per-u validation accuracy across the grid, for sweep reports.
pub fn sweep_u(
    validation: &[Episode],
    params: &ModelParams<f64>,
    mode: FusionMode,
    tau: f64,
    grid_step: f64,
) -> Result<Vec<(f64, f64)>, FewshotError> {
    if validation.is_empty() {
        return Err(FewshotError::EmptyValidation);
    }
    let steps = (1.0 / grid_step).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let u = (s as f64 * grid_step).min(1.0);
        let mut acc = 0.0;
        for ep in validation {
            acc += evaluate_episode(ep, params, mode, FusionFactor::new(u)?, tau)?;
        }
        out.push((u, acc / validation.len() as f64));
    }
    Ok(out)
}

/// The K candidates most cosine-similar to the text embedding, ties broken
/// by input order. Score-based stand-in for LLM pairwise ranking.
pub fn select_top_k(
    candidates: &[Embedding],
    text: &Embedding,
    k: usize,
) -> Result<Vec<Embedding>, FewshotError> {
    if candidates.len() < k {
        return Err(FewshotError::InsufficientCandidates {
            needed: k,
            got: candidates.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, text.cosine(c)?)))
        .collect::<Result<_, GeometryError>>()?;
    // stable sort keeps input order on ties
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, _)| candidates[i].clone())
        .collect())
}
