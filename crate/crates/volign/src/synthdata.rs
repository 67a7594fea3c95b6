//! Deterministic synthetic multimodal episode generation and embedding
//! file I/O.
//!
//! Randomness comes from ChaCha8 (a published counter-based generator with
//! a platform-independent stream) seeded explicitly; Gaussians are drawn by
//! Box-Muller from the uniform stream. Identical configuration and seed
//! reproduce every episode bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fewshot::Episode;
use crate::fusion::TokenSet;
use crate::geometry::{Embedding, GeometryError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not generate {needed} centers with pairwise cosine below {threshold} after {attempts} attempts")]
    SeparationUnsatisfiable {
        needed: usize,
        threshold: f64,
        attempts: usize,
    },
    #[error("requested {n} ways from a pool of {pool} classes")]
    PoolTooSmall { n: usize, pool: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// Knobs of the synthetic episode generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub class_pool: usize,
    pub dim: usize,
    pub token_count: usize,
    pub support_noise: f64,
    pub query_noise: f64,
    /// Distance of the (fixed, per-class) text descriptor from the class
    /// center before renormalization.
    pub text_shift: f64,
    pub synthetic_shift: f64,
    /// Maximum pairwise cosine between class centers.
    pub separation: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            class_pool: 16,
            dim: 64,
            token_count: 9,
            support_noise: 0.6,
            query_noise: 0.6,
            text_shift: 0.3,
            synthetic_shift: 0.3,
            separation: 0.5,
            seed: 0,
        }
    }
}

const CENTER_RETRY_BUDGET: usize = 10_000;

/// Standard normal via Box-Muller from the portable uniform stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Result<Embedding, SynthError> {
    loop {
        if let Ok(e) = Embedding::unit(gaussian_vec(rng, dim)) {
            return Ok(e);
        }
    }
}

/// Perturb `center` by white noise of scale `noise` and renormalize.
fn noisy_unit(
    center: &Embedding,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Embedding, SynthError> {
    let v: Vec<f64> = center
        .values()
        .iter()
        .map(|&c| c + noise * gaussian(rng))
        .collect();
    Ok(Embedding::unit(v)?)
}

/// Shift `center` by a vector of exact norm `shift` and renormalize.
fn shifted_unit(
    center: &Embedding,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Embedding, SynthError> {
    if shift == 0.0 {
        return Ok(center.normalize()?);
    }
    let dir = random_unit(rng, center.dim())?;
    let v: Vec<f64> = center
        .values()
        .iter()
        .zip(dir.values())
        .map(|(&c, &d)| c + shift * d)
        .collect();
    Ok(Embedding::unit(v)?)
}

/// Well-separated unit class centers from the seeded stream.
pub fn gen_class_centers(cfg: &GeneratorConfig) -> Result<Vec<Embedding>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers: Vec<Embedding> = Vec::with_capacity(cfg.class_pool);
    let mut attempts = 0;
    while centers.len() < cfg.class_pool {
        if attempts >= CENTER_RETRY_BUDGET {
            return Err(SynthError::SeparationUnsatisfiable {
                needed: cfg.class_pool,
                threshold: cfg.separation,
                attempts,
            });
        }
        attempts += 1;
        let cand = random_unit(&mut rng, cfg.dim)?;
        let ok = centers
            .iter()
            .all(|c| c.dot(&cand).unwrap_or(1.0).abs() < cfg.separation);
        if ok {
            centers.push(cand);
        }
    }
    Ok(centers)
}

/// The fixed per-class text descriptor: center displaced by a seeded offset
/// of norm `text_shift`, constant across episodes.
pub fn text_descriptor(
    cfg: &GeneratorConfig,
    center: &Embedding,
    class_id: usize,
) -> Result<Embedding, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class_id as u64 + 1),
    );
    shifted_unit(center, cfg.text_shift, &mut rng)
}

/// Sample one N-way K-shot episode with M queries per class.
pub fn gen_episode(
    cfg: &GeneratorConfig,
    centers: &[Embedding],
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, SynthError> {
    if n_way > centers.len() {
        return Err(SynthError::PoolTooSmall {
            n: n_way,
            pool: centers.len(),
        });
    }
    // partial Fisher-Yates for the class subset
    let mut idx: Vec<usize> = (0..centers.len()).collect();
    for i in 0..n_way {
        let j = i + rng.gen_range(0..idx.len() - i);
        idx.swap(i, j);
    }
    let chosen = &idx[..n_way];

    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    let mut text_desc = Vec::with_capacity(n_way);
    let mut synthetic = Vec::with_capacity(n_way);
    for &c in chosen {
        let center = &centers[c];
        let mut class_support = Vec::with_capacity(k_shot);
        for _ in 0..k_shot {
            let tokens = (0..cfg.token_count)
                .map(|_| noisy_unit(center, cfg.support_noise, rng))
                .collect::<Result<Vec<_>, _>>()?;
            class_support.push(TokenSet::new(tokens).expect("non-empty tokens"));
        }
        support.push(class_support);
        query.push(
            (0..m_query)
                .map(|_| noisy_unit(center, cfg.query_noise, rng))
                .collect::<Result<Vec<_>, _>>()?,
        );
        text_desc.push(text_descriptor(cfg, center, c)?);
        synthetic.push(
            (0..k_shot)
                .map(|_| shifted_unit(center, cfg.synthetic_shift, rng))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(Episode {
        n_way,
        k_shot,
        m_query,
        support,
        query,
        text_desc,
        synthetic,
    })
}

/// One embedding row of the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub class_id: usize,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Support,
    Query,
    Text,
    Synthetic,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    dim: usize,
    count: usize,
}

/// Write records as one JSON object per line, preceded by a header line.
pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<(), SynthError> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut w = BufWriter::new(File::create(path)?);
    let header = FileHeader {
        dim,
        count: records.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap())?;
    for r in records {
        if r.vector.len() != dim {
            return Err(SynthError::Format(format!(
                "record vector length {} differs from header dim {dim}",
                r.vector.len()
            )));
        }
        writeln!(w, "{}", serde_json::to_string(r).unwrap())?;
    }
    Ok(())
}

/// Read an embedding file written by [`save_embeddings`].
pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, SynthError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| SynthError::Format("missing header line".into()))??;
    let header: FileHeader = serde_json::from_str(&header_line)
        .map_err(|e| SynthError::Format(format!("bad header: {e}")))?;
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| SynthError::Format(format!("bad record: {e}")))?;
        if rec.vector.len() != header.dim {
            return Err(SynthError::Format(format!(
                "record vector length {} does not match header dim {}",
                rec.vector.len(),
                header.dim
            )));
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(SynthError::Format(format!(
            "truncated file: header promises {} records, found {}",
            header.count,
            records.len()
        )));
    }
    Ok(records)
}

/// Flatten an episode into file records.
pub fn episode_records(episode: &Episode) -> Vec<EmbeddingRecord> {
    let mut out = Vec::new();
    for (class_id, class_support) in episode.support.iter().enumerate() {
        for ts in class_support {
            for tok in &ts.tokens {
                out.push(EmbeddingRecord {
                    class_id,
                    modality: Modality::Support,
                    vector: tok.values().to_vec(),
                });
            }
        }
    }
    for (class_id, qs) in episode.query.iter().enumerate() {
        for q in qs {
            out.push(EmbeddingRecord {
                class_id,
                modality: Modality::Query,
                vector: q.values().to_vec(),
            });
        }
    }
    for (class_id, t) in episode.text_desc.iter().enumerate() {
        out.push(EmbeddingRecord {
            class_id,
            modality: Modality::Text,
            vector: t.values().to_vec(),
        });
    }
    for (class_id, ss) in episode.synthetic.iter().enumerate() {
        for s in ss {
            out.push(EmbeddingRecord {
                class_id,
                modality: Modality::Synthetic,
                vector: s.values().to_vec(),
            });
        }
    }
    out
}
