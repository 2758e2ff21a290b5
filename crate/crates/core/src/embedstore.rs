//! Per-modality embedding matrices: on-disk format, projection to the common
//! Semantic-ID dimension, and synthetic fixtures.
//!
//! A matrix directory holds `manifest.json` and `data.bin`, the latter being
//! `count × dim` row-major little-endian `f32`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const FORMAT_VERSION: u32 = 1;

/// Default common dimension items are projected to before quantization.
pub const DEFAULT_COMMON_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    OcrText,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::OcrText => "ocr_text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "ocr_text" | "ocr" => Ok(Modality::OcrText),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Item embeddings of one modality. Values are held at `f32` precision so that
/// a write/read round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub modality: Modality,
    pub encoder: String,
    pub item_ids: Vec<String>,
    pub rows: Matrix,
    /// Extra manifest fields (pooling, render resolution, backbone, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EmbeddingMatrix {
    pub fn new(
        modality: Modality,
        encoder: impl Into<String>,
        item_ids: Vec<String>,
        mut rows: Matrix,
    ) -> Result<Self> {
        if rows.cols == 0 {
            return Err(Error::Data("embedding dim must be > 0".into()));
        }
        if item_ids.len() != rows.rows {
            return Err(Error::Integrity(format!(
                "{} item ids for {} rows",
                item_ids.len(),
                rows.rows
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = item_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate item id `{dup}`")));
        }
        if !rows.is_finite() {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        rows.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        Ok(EmbeddingMatrix {
            modality,
            encoder: encoder.into(),
            item_ids,
            rows,
            metadata: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols
    }

    pub fn count(&self) -> usize {
        self.rows.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn index_of(&self) -> BTreeMap<&str, usize> {
        self.item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub modality: Modality,
    pub encoder: String,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub byte_order: String,
    pub item_ids: Vec<String>,
    #[serde(flatten)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Writes `m` into `dir` (created if absent) and returns the manifest path.
pub fn write_matrix(m: &EmbeddingMatrix, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        modality: m.modality,
        encoder: m.encoder.clone(),
        dim: m.dim(),
        count: m.count(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        item_ids: m.item_ids.clone(),
        metadata: m.metadata.clone(),
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, encode_f32(&m.rows.data)).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_matrix(dir: &Path) -> Result<EmbeddingMatrix> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::Integrity(format!(
            "unsupported dtype/byte order {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    if manifest.item_ids.len() != manifest.count {
        return Err(Error::Integrity(format!(
            "manifest count {} but {} item ids",
            manifest.count,
            manifest.item_ids.len()
        )));
    }
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = manifest.count * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "data holds {} bytes, manifest declares {} rows x {} dims ({} bytes)",
            bytes.len(),
            manifest.count,
            manifest.dim,
            expected
        )));
    }
    let data = decode_f32(&bytes);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite value", data_path.display())));
    }
    let mut m = EmbeddingMatrix::new(
        manifest.modality,
        manifest.encoder,
        manifest.item_ids,
        Matrix::from_vec(manifest.count, manifest.dim, data),
    )?;
    m.metadata = manifest.metadata;
    Ok(m)
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Fixed linear map into the common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Identity(usize),
    /// `out_dim × in_dim`
    Linear(Matrix),
}

impl Projection {
    /// Random projection with orthonormal rows (or columns when expanding),
    /// identity when the dimensions already match.
    pub fn orthonormal(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        if in_dim == out_dim {
            return Projection::Identity(in_dim);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if out_dim <= in_dim {
            let mut w = Matrix::randn(out_dim, in_dim, 1.0, &mut rng);
            gram_schmidt_rows(&mut w);
            Projection::Linear(w)
        } else {
            let mut wt = Matrix::randn(in_dim, out_dim, 1.0, &mut rng);
            gram_schmidt_rows(&mut wt);
            Projection::Linear(wt.transpose())
        }
    }

    /// Seed derived from the modality so each modality gets its own fixed map.
    pub fn for_modality(modality: Modality, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(modality.as_str().as_bytes());
        h.update(seed.to_le_bytes());
        let d = h.finalize();
        let derived = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"));
        Projection::orthonormal(in_dim, out_dim, derived)
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Projection::Identity(d) => *d,
            Projection::Linear(w) => w.cols,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Identity(d) => *d,
            Projection::Linear(w) => w.rows,
        }
    }

    pub fn apply(&self, e: &[f64]) -> Vec<f64> {
        match self {
            Projection::Identity(_) => e.to_vec(),
            Projection::Linear(w) => (0..w.rows).map(|r| dot(w.row(r), e)).collect(),
        }
    }
}

fn gram_schmidt_rows(w: &mut Matrix) {
    for i in 0..w.rows {
        for j in 0..i {
            let proj = dot(w.row(i), w.row(j));
            let (head, tail) = w.data.split_at_mut(i * w.cols);
            let prev = &head[j * w.cols..(j + 1) * w.cols];
            for (x, p) in tail[..w.cols].iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let n = dot(w.row(i), w.row(i)).sqrt();
        w.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
}

/// `(W·e) / ‖W·e‖₂`
pub fn project_normalize(e: &[f64], p: &Projection) -> Result<Vec<f64>> {
    if e.len() != p.in_dim() {
        return Err(Error::Contract(format!(
            "embedding has dim {}, projection expects {}",
            e.len(),
            p.in_dim()
        )));
    }
    let mut v = p.apply(e);
    let n = dot(&v, &v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("projected embedding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Projects and normalizes every row; the result is kept at full precision.
pub fn project_rows(m: &EmbeddingMatrix, p: &Projection) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.count(), p.out_dim());
    for i in 0..m.count() {
        let v = project_normalize(m.row(i), p)
            .map_err(|e| Error::Degenerate(format!("item `{}`: {e}", m.item_ids[i])))?;
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_items: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Probability that an item's image-modality cluster equals its text cluster.
    pub cross_modal_correlation: f64,
    /// Sub-topics per cluster; items sit near one sub-topic centre.
    #[serde(default = "default_subclusters")]
    pub subclusters: usize,
    /// Spread of sub-topic centres around their cluster centre.
    #[serde(default = "default_sub_spread")]
    pub sub_spread: f64,
    /// Per-item isotropic jitter, relative to the unit-norm cluster centres.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_subclusters() -> usize {
    4
}

fn default_sub_spread() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(n_items: usize, dim: usize, n_clusters: usize, cross_modal_correlation: f64, seed: u64) -> Self {
        SynthSpec {
            n_items,
            dim,
            n_clusters,
            cross_modal_correlation,
            subclusters: default_subclusters(),
            sub_spread: default_sub_spread(),
            noise: default_noise(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEmbeddings {
    pub text: EmbeddingMatrix,
    pub image: EmbeddingMatrix,
    pub text_labels: Vec<usize>,
    pub image_labels: Vec<usize>,
}

pub fn synthetic_item_id(i: usize) -> String {
    format!("item{i:05}")
}

/// Gaussian-cluster embeddings for two paired modalities.
pub fn synthesize_embeddings(spec: &SynthSpec) -> Result<SyntheticEmbeddings> {
    if spec.dim < 2 {
        return Err(Error::Config("synthetic dim must be >= 2".into()));
    }
    if spec.n_clusters == 0 || spec.n_clusters > spec.n_items {
        return Err(Error::Config(format!(
            "need 1 <= n_clusters <= n_items, got {} clusters for {} items",
            spec.n_clusters, spec.n_items
        )));
    }
    if !(0.0..=1.0).contains(&spec.cross_modal_correlation) {
        return Err(Error::Config("cross_modal_correlation must lie in [0, 1]".into()));
    }
    if !(spec.noise >= 0.0 && spec.sub_spread >= 0.0) {
        return Err(Error::Config("noise and sub_spread must be >= 0".into()));
    }
    if spec.subclusters == 0 {
        return Err(Error::Config("need at least one sub-topic per cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres = |rng: &mut ChaCha8Rng| {
        let mut c = Matrix::randn(spec.n_clusters, spec.dim, 1.0, rng);
        for r in 0..c.rows {
            let n = dot(c.row(r), c.row(r)).sqrt();
            c.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        c
    };
    let text_centres = centres(&mut rng);
    let image_centres = centres(&mut rng);

    let text_labels: Vec<usize> = (0..spec.n_items)
        .map(|i| {
            // every cluster is populated before the rest are drawn at random
            if i < spec.n_clusters {
                i
            } else {
                rng.random_range(0..spec.n_clusters)
            }
        })
        .collect();
    let image_labels: Vec<usize> = text_labels
        .iter()
        .map(|&l| {
            if rng.random::<f64>() < spec.cross_modal_correlation {
                l
            } else {
                rng.random_range(0..spec.n_clusters)
            }
        })
        .collect();

    let subs: Vec<usize> = (0..spec.n_items)
        .map(|_| rng.random_range(0..spec.subclusters))
        .collect();

    let scale = (spec.dim as f64).sqrt();
    let sample = |labels: &[usize], c: &Matrix, rng: &mut ChaCha8Rng| {
        let offsets = Matrix::randn(spec.n_clusters * spec.subclusters, spec.dim, spec.sub_spread / scale, rng);
        let mut m = Matrix::randn(spec.n_items, spec.dim, spec.noise / scale, rng);
        for (i, &l) in labels.iter().enumerate() {
            let off = offsets.row(l * spec.subclusters + subs[i]);
            for ((x, cv), o) in m.row_mut(i).iter_mut().zip(c.row(l)).zip(off) {
                *x += cv + o;
            }
        }
        m
    };
    let text_rows = sample(&text_labels, &text_centres, &mut rng);
    let image_rows = sample(&image_labels, &image_centres, &mut rng);
    let ids: Vec<String> = (0..spec.n_items).map(synthetic_item_id).collect();
    Ok(SyntheticEmbeddings {
        text: EmbeddingMatrix::new(Modality::Text, "synthetic", ids.clone(), text_rows)?,
        image: EmbeddingMatrix::new(Modality::Image, "synthetic", ids, image_rows)?,
        text_labels,
        image_labels,
    })
}
