//! Residual vector quantization and Semantic-ID assignment.
//!
//! Two training modes share the greedy per-level encoder:
//! - `KmeansRvq`: level ℓ's codebook is k-means over level-ℓ residuals
//!   (origin-anchored for ℓ ≥ 2).
//! - `Rqvae`: shallow encoder/decoder networks and codebooks trained jointly
//!   with straight-through code gradients and a commitment term.

pub mod kmeans;
pub mod rqvae;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Matrix};

pub use rqvae::{AutoEncoder, Mlp, RqVaeConfig};

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RvqMode {
    KmeansRvq,
    Rqvae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub mode: RvqMode,
    pub seed: u64,
    #[serde(default)]
    pub rqvae: RqVaeConfig,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            levels: DEFAULT_LEVELS,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            mode: RvqMode::KmeansRvq,
            seed: 0,
            rqvae: RqVaeConfig::default(),
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("RVQ needs at least one level".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    pub levels: usize,
    pub codebook_size: usize,
    /// Input dimension.
    pub dim: usize,
    /// Codeword dimension; equals `dim` in k-means mode.
    pub code_dim: usize,
    pub mode: RvqMode,
    pub seed: u64,
    pub beta: f64,
    /// One `codebook_size × code_dim` matrix per level.
    pub codebooks: Vec<Matrix>,
    pub networks: Option<AutoEncoder>,
}

/// Length-L code tuple plus a disambiguation index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub dedup: usize,
}

impl SemanticId {
    pub fn new(codes: Vec<usize>) -> Self {
        SemanticId { codes, dedup: 0 }
    }

    /// Codes followed by the dedup index.
    pub fn positions(&self) -> Vec<usize> {
        let mut p = self.codes.clone();
        p.push(self.dedup);
        p
    }
}

/// Fits codebooks to the rows of `data` (already projected and normalized).
pub fn fit(data: &Matrix, cfg: &RvqConfig) -> Result<RvqModel> {
    cfg.validate()?;
    match cfg.mode {
        RvqMode::KmeansRvq => fit_kmeans(data, cfg),
        RvqMode::Rqvae => rqvae::fit(data, cfg).map(|(model, _)| model),
    }
}

pub(crate) fn check_population(points: &Matrix, level: usize, k: usize) -> Result<()> {
    let distinct = kmeans::distinct_rows(points);
    if distinct < k {
        return Err(Error::UnderPopulated { level, distinct, k });
    }
    Ok(())
}

/// Residual k-means codebooks over `data`, one level at a time. From level 2
/// on, codeword 0 is pinned at the origin so no point's residual can grow.
pub(crate) fn residual_kmeans(data: &Matrix, levels: usize, k: usize, seed: u64) -> Result<Vec<Matrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = data.clone();
    let mut codebooks = Vec::with_capacity(levels);
    for level in 1..=levels {
        check_population(&residual, level, k)?;
        let res = if level == 1 {
            kmeans::kmeans(&residual, k, &mut rng)
        } else {
            kmeans::kmeans_anchored(&residual, k, &mut rng)
        };
        for i in 0..residual.rows {
            let c = res.assignments[i];
            for (r, cv) in residual.row_mut(i).iter_mut().zip(res.centroids.row(c)) {
                *r -= cv;
            }
        }
        codebooks.push(res.centroids);
    }
    Ok(codebooks)
}

fn fit_kmeans(data: &Matrix, cfg: &RvqConfig) -> Result<RvqModel> {
    let codebooks = residual_kmeans(data, cfg.levels, cfg.codebook_size, cfg.seed)?;
    Ok(RvqModel {
        levels: cfg.levels,
        codebook_size: cfg.codebook_size,
        dim: data.cols,
        code_dim: data.cols,
        mode: RvqMode::KmeansRvq,
        seed: cfg.seed,
        beta: cfg.rqvae.beta,
        codebooks,
        networks: None,
    })
}

/// Greedy nearest-codeword codes over residuals of `z` (already in code space).
/// Returns the codes and the residual after each level.
pub fn quantize(codebooks: &[Matrix], z: &[f64]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut r = z.to_vec();
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let (code, _) = kmeans::nearest(cb, &r);
        for (x, c) in r.iter_mut().zip(cb.row(code)) {
            *x -= c;
        }
        codes.push(code);
        residuals.push(r.clone());
    }
    (codes, residuals)
}

impl RvqModel {
    fn to_code_space(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "vector has dim {}, model expects {}",
                v.len(),
                self.dim
            )));
        }
        Ok(match &self.networks {
            Some(net) => net.encoder.forward(v),
            None => v.to_vec(),
        })
    }

    /// Semantic ID with `dedup = 0`.
    pub fn encode(&self, v: &[f64]) -> Result<SemanticId> {
        let z = self.to_code_space(v)?;
        Ok(SemanticId::new(quantize(&self.codebooks, &z).0))
    }

    /// Codes plus the residual vector after each level (in code space).
    pub fn encode_with_residuals(&self, v: &[f64]) -> Result<(SemanticId, Vec<Vec<f64>>)> {
        let z = self.to_code_space(v)?;
        let (codes, residuals) = quantize(&self.codebooks, &z);
        Ok((SemanticId::new(codes), residuals))
    }

    /// Sum of the selected codewords, passed through the decoder in RQ-VAE mode.
    pub fn decode(&self, id: &SemanticId) -> Result<Vec<f64>> {
        if id.codes.len() != self.levels {
            return Err(Error::Contract(format!(
                "id has {} codes, model has {} levels",
                id.codes.len(),
                self.levels
            )));
        }
        let mut q = vec![0.0; self.code_dim];
        for (level, (&code, cb)) in id.codes.iter().zip(&self.codebooks).enumerate() {
            if code >= self.codebook_size {
                return Err(Error::Contract(format!(
                    "code {code} at level {} out of range [0, {})",
                    level + 1,
                    self.codebook_size
                )));
            }
            for (a, c) in q.iter_mut().zip(cb.row(code)) {
                *a += c;
            }
        }
        Ok(match &self.networks {
            Some(net) => net.decoder.forward(&q),
            None => q,
        })
    }

    /// Mean squared reconstruction error over rows using the first `levels` levels.
    pub fn reconstruction_mse(&self, data: &Matrix, levels: usize) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..data.rows {
            let id = self.encode(data.row(i))?;
            let truncated = RvqModel {
                codebooks: self.codebooks[..levels].to_vec(),
                levels,
                ..self.clone()
            };
            let rec = truncated.decode(&SemanticId::new(id.codes[..levels].to_vec()))?;
            total += sq_dist(&rec, data.row(i));
        }
        Ok(total / data.rows as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ModelHeader {
            levels: self.levels,
            codebook_size: self.codebook_size,
            dim: self.dim,
            code_dim: self.code_dim,
            mode: self.mode,
            seed: self.seed,
            beta: self.beta,
            hidden: self.networks.as_ref().map(|n| n.encoder.hidden()),
            dtype: "f32".into(),
            byte_order: "little".into(),
        };
        let path = dir.join("rvq.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
        let mut data = Vec::new();
        for cb in &self.codebooks {
            data.extend_from_slice(&cb.data);
        }
        let path = dir.join("codebooks.bin");
        fs::write(&path, encode_f32(&data)).map_err(|e| Error::io(&path, e))?;
        if let Some(net) = &self.networks {
            let path = dir.join("networks.bin");
            fs::write(&path, encode_f32(&net.flatten())).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("rvq.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: ModelHeader = serde_json::from_str(&text)?;
        let path = dir.join("codebooks.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let per = h.codebook_size * h.code_dim;
        if bytes.len() != 4 * per * h.levels {
            return Err(Error::Integrity(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                4 * per * h.levels,
                bytes.len()
            )));
        }
        let data = decode_f32(&bytes);
        let codebooks = data
            .chunks(per)
            .map(|c| Matrix::from_vec(h.codebook_size, h.code_dim, c.to_vec()))
            .collect();
        let networks = match h.hidden {
            Some(hidden) => {
                let path = dir.join("networks.bin");
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Some(AutoEncoder::unflatten(h.dim, hidden, h.code_dim, &decode_f32(&bytes))?)
            }
            None => None,
        };
        Ok(RvqModel {
            levels: h.levels,
            codebook_size: h.codebook_size,
            dim: h.dim,
            code_dim: h.code_dim,
            mode: h.mode,
            seed: h.seed,
            beta: h.beta,
            codebooks,
            networks,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    levels: usize,
    codebook_size: usize,
    dim: usize,
    code_dim: usize,
    mode: RvqMode,
    seed: u64,
    beta: f64,
    hidden: Option<usize>,
    dtype: String,
    byte_order: String,
}

/// Encodes every row of `data`, keyed by item id, with `dedup = 0`.
pub fn assign_ids(model: &RvqModel, item_ids: &[String], data: &Matrix) -> Result<BTreeMap<String, SemanticId>> {
    item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| Ok((id.clone(), model.encode(data.row(i))?)))
        .collect()
}

/// Items sharing a code tuple get dedup indices 0, 1, 2, ... in item-id order.
pub fn resolve_collisions(ids: &BTreeMap<String, SemanticId>) -> BTreeMap<String, SemanticId> {
    let mut next: BTreeMap<&[usize], usize> = BTreeMap::new();
    ids.iter()
        .map(|(item, sid)| {
            let slot = next.entry(sid.codes.as_slice()).or_insert(0);
            let out = SemanticId {
                codes: sid.codes.clone(),
                dedup: *slot,
            };
            *slot += 1;
            (item.clone(), out)
        })
        .collect()
}
