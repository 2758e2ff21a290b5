//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DEFAULT_MAX_HISTORY;
use crate::embedstore::{Modality, DEFAULT_COMMON_DIM};
use crate::error::{Error, Result};
use crate::fusion::Layout;
use crate::metrics::{DEFAULT_KS, DEFAULT_SEEDS};
use crate::renderkit::RenderConfig;
use crate::rvq::{RvqConfig, RvqMode};
use crate::seq2seq::{BeamConfig, ModelConfig, TrainConfig};

use super::synthetic::SyntheticStudy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Self-contained generated study.
    Synthetic(SyntheticStudy),
    Files {
        /// TSV `user<TAB>item<TAB>timestamp`.
        interactions: PathBuf,
        /// JSON list of item ids.
        catalog: PathBuf,
        /// JSONL `{item_id, description, ...}`; needed by rendered modalities.
        #[serde(default)]
        metadata: Option<PathBuf>,
    },
}

/// Where one modality's item embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModalitySource {
    /// An embedding-matrix directory (`manifest.json` + `data.bin`).
    Embeddings(PathBuf),
    /// A modality of the synthetic generator.
    Synthetic(Modality),
    /// Item descriptions rendered to images and passed through the reference visual encoder.
    Render(RenderSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSource {
    pub render: RenderConfig,
    /// Resolution the rendered canvas is box-filtered to before encoding.
    pub resolution: usize,
    pub encode_dim: usize,
    pub encoder_seed: u64,
    /// Writes the first few rendered images as PNG for inspection.
    pub export_png: usize,
}

impl Default for RenderSource {
    fn default() -> Self {
        RenderSource {
            render: RenderConfig::default(),
            resolution: 1024,
            encode_dim: 256,
            encoder_seed: 0,
            export_png: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub beam: BeamConfig,
    /// Drops items already in the user's history from the ranked list.
    pub filter_history: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            beam: BeamConfig::default(),
            filter_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub enabled: bool,
    pub train: TrainConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            enabled: false,
            train: TrainConfig::alignment(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    /// Source for the text channel (text or rendered OCR-text embeddings).
    #[serde(default)]
    pub text: Option<ModalitySource>,
    #[serde(default)]
    pub image: Option<ModalitySource>,
    #[serde(default = "default_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub projection_seed: u64,
    #[serde(default)]
    pub rvq: RvqConfig,
    #[serde(default = "default_fusion")]
    pub fusion: Layout,
    #[serde(default = "default_true")]
    pub image_first: bool,
    /// Constant gate value for early fusion in k-means mode.
    #[serde(default = "default_alpha")]
    pub gate_alpha: f64,
    #[serde(default = "default_history")]
    pub max_history: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_dim() -> usize {
    DEFAULT_COMMON_DIM
}
fn default_fusion() -> Layout {
    Layout::Unimodal
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.5
}
fn default_history() -> usize {
    DEFAULT_MAX_HISTORY
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Files {
            interactions,
            catalog,
            metadata,
        } = &mut self.data
        {
            fix(interactions);
            fix(catalog);
            if let Some(m) = metadata {
                fix(m);
            }
        }
        for src in [&mut self.text, &mut self.image].into_iter().flatten() {
            if let ModalitySource::Embeddings(p) = src {
                fix(p);
            }
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn modality_count(&self) -> usize {
        usize::from(self.text.is_some()) + usize::from(self.image.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        match self.fusion {
            Layout::Unimodal if self.modality_count() != 1 => {
                return cfg_err(format!(
                    "fusion `unimodal` needs exactly one modality, {} configured",
                    self.modality_count()
                ))
            }
            l if l.is_multimodal() && self.modality_count() != 2 => {
                return cfg_err(format!("fusion `{l}` needs both a text and an image modality"))
            }
            _ => {}
        }
        if self.alignment.enabled && self.fusion != Layout::LateC {
            return cfg_err(format!(
                "alignment pre-training requires fusion `lateC`, not `{}`",
                self.fusion
            ));
        }
        if self.projection_dim == 0 {
            return cfg_err("projection_dim must be positive".into());
        }
        if self.max_history == 0 {
            return cfg_err("max_history must be >= 1".into());
        }
        if !(self.gate_alpha > 0.0 && self.gate_alpha < 1.0) {
            return cfg_err(format!("gate_alpha {} must lie in (0, 1)", self.gate_alpha));
        }
        self.rvq.validate()?;
        if self.rvq.mode == RvqMode::Rqvae && self.fusion == Layout::Early && self.rvq.rqvae.code_dim == 0 {
            return cfg_err("rqvae code_dim must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            return cfg_err("eval.seeds must not be empty".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return cfg_err("eval.ks must be non-empty and positive".into());
        }
        if self.eval.beam.beam_size == 0 {
            return cfg_err("beam size must be >= 1".into());
        }
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(16);
        model.validate()?;
        self.train.validate()?;
        if self.alignment.enabled {
            self.alignment.train.validate()?;
        }
        for src in [&self.text, &self.image].into_iter().flatten() {
            match src {
                ModalitySource::Synthetic(m) => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        return cfg_err("synthetic modality sources need a synthetic data source".into());
                    }
                    if *m == Modality::OcrText {
                        return cfg_err("synthetic sources provide `text` or `image`; use `render` for ocr_text".into());
                    }
                }
                ModalitySource::Render(r) => {
                    r.render.validate()?;
                    check_resolution(&r.render, r.resolution)?;
                    if r.encode_dim < 8 {
                        return cfg_err("render encode_dim must be >= 8".into());
                    }
                    if let DataSource::Files { metadata: None, .. } = self.data {
                        return cfg_err("rendered modalities need `metadata` with item descriptions".into());
                    }
                }
                ModalitySource::Embeddings(_) => {}
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        digest_json(&c)
    }

    /// The one rendered modality source, if any.
    pub fn render_source(&self) -> Option<&RenderSource> {
        [&self.text, &self.image].into_iter().flatten().find_map(|s| match s {
            ModalitySource::Render(r) => Some(r),
            _ => None,
        })
    }
}

pub fn check_resolution(render: &RenderConfig, resolution: usize) -> Result<()> {
    if !crate::renderkit::SUPPORTED_CANVASES.contains(&resolution) || render.canvas % resolution != 0 {
        return Err(Error::Config(format!(
            "resolution {resolution} unsupported for a {}px canvas (use one of {:?} dividing it)",
            render.canvas,
            crate::renderkit::SUPPORTED_CANVASES
        )));
    }
    Ok(())
}

pub fn digest_bytes(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config values serialize");
    digest_bytes(&[v.to_string().as_bytes()])
}
