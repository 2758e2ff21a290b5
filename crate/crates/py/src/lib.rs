//! Python bindings for the core library. Vectors cross the boundary as plain
//! lists of floats.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use semid_core::embedstore::read_matrix;
use semid_core::experiment::{run_experiment as run_core, ExperimentConfig};
use semid_core::fusion::{self, Channel, GateNetwork, Layout, Vocab};
use semid_core::metrics;
use semid_core::rvq::{self, RvqConfig, RvqModel, SemanticId};
use semid_core::tensor::Matrix;

create_exception!(semid, SemidError, PyException);

fn err(e: semid_core::Error) -> PyErr {
    SemidError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(SemidError::new_err("expected a non-empty list of non-empty rows"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(SemidError::new_err(format!("row {i} has {} values, expected {cols}", rows[i].len())));
    }
    Ok(Matrix::from_rows(rows))
}

/// Residual quantizer fitted with k-means.
#[pyclass(module = "semid", name = "Rvq")]
pub struct Rvq {
    model: RvqModel,
}

#[pymethods]
impl Rvq {
    #[staticmethod]
    #[pyo3(signature = (rows, levels = 3, codebook_size = 256, seed = 0))]
    pub fn fit(rows: Vec<Vec<f64>>, levels: usize, codebook_size: usize, seed: u64) -> PyResult<Self> {
        let cfg = RvqConfig {
            levels,
            codebook_size,
            seed,
            ..Default::default()
        };
        let model = rvq::fit(&to_matrix(&rows)?, &cfg).map_err(err)?;
        Ok(Rvq { model })
    }

    #[staticmethod]
    pub fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Rvq {
            model: RvqModel::load(&dir).map_err(err)?,
        })
    }

    pub fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.model.save(&dir).map_err(err)
    }

    #[getter]
    pub fn levels(&self) -> usize {
        self.model.levels
    }

    #[getter]
    pub fn codebook_size(&self) -> usize {
        self.model.codebook_size
    }

    #[getter]
    pub fn dim(&self) -> usize {
        self.model.dim
    }

    /// Codebooks as `levels × codebook_size × dim` nested lists.
    pub fn codebooks(&self) -> Vec<Vec<Vec<f64>>> {
        self.model
            .codebooks
            .iter()
            .map(|cb| (0..cb.rows).map(|i| cb.row(i).to_vec()).collect())
            .collect()
    }

    pub fn encode(&self, v: Vec<f64>) -> PyResult<Vec<usize>> {
        Ok(self.model.encode(&v).map_err(err)?.codes)
    }

    /// Codes plus the residual after each level.
    pub fn encode_residuals(&self, v: Vec<f64>) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
        let (id, res) = self.model.encode_with_residuals(&v).map_err(err)?;
        Ok((id.codes, res))
    }

    pub fn decode(&self, codes: Vec<usize>) -> PyResult<Vec<f64>> {
        self.model.decode(&SemanticId::new(codes)).map_err(err)
    }

    #[pyo3(signature = (rows, levels = None))]
    pub fn reconstruction_mse(&self, rows: Vec<Vec<f64>>, levels: Option<usize>) -> PyResult<f64> {
        self.model
            .reconstruction_mse(&to_matrix(&rows)?, levels.unwrap_or(self.model.levels))
            .map_err(err)
    }

    /// Collision-free Semantic IDs: `{item_id: (codes, dedup)}`.
    pub fn assign_ids(
        &self,
        item_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> PyResult<BTreeMap<String, (Vec<usize>, usize)>> {
        let ids = rvq::assign_ids(&self.model, &item_ids, &to_matrix(&rows)?).map_err(err)?;
        Ok(rvq::resolve_collisions(&ids)
            .into_iter()
            .map(|(k, s)| (k, (s.codes, s.dedup)))
            .collect())
    }
}

#[pyfunction]
pub fn recall_at_k(ranked: Vec<String>, target: &str, k: usize) -> PyResult<f64> {
    metrics::recall_at_k(&ranked, target, k).map_err(err)
}

#[pyfunction]
pub fn ndcg_at_k(ranked: Vec<String>, target: &str, k: usize) -> PyResult<f64> {
    metrics::ndcg_at_k(&ranked, target, k).map_err(err)
}

/// `(t, p_value)`; both are `None` when every paired difference is equal.
#[pyfunction]
pub fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(Option<f64>, Option<f64>)> {
    Ok(match metrics::paired_t_test(&a, &b).map_err(err)? {
        metrics::TTest::Test { t, p_value, .. } => (Some(t), Some(p_value)),
        metrics::TTest::Degenerate { .. } => (None, None),
    })
}

/// Gated fusion of two unit vectors with a constant gate `alpha`.
#[pyfunction]
#[pyo3(signature = (text, image, alpha = 0.5))]
pub fn early_fuse(text: Vec<f64>, image: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let gate = GateNetwork::constant(text.len(), alpha).map_err(err)?;
    fusion::early_fuse(&text, &image, &gate).map_err(err)
}

/// Token sequence of one item under a late-fusion layout (`lateA`, `lateB` or
/// `lateC`). IDs are `(codes, dedup)` pairs; `dedup_size` bounds the dedup index.
#[pyfunction]
#[pyo3(signature = (layout, image, text, codebook_size, dedup_size = 1))]
pub fn fuse_ids(
    layout: &str,
    image: (Vec<usize>, usize),
    text: (Vec<usize>, usize),
    codebook_size: usize,
    dedup_size: usize,
) -> PyResult<Vec<usize>> {
    let layout: Layout = layout.parse().map_err(err)?;
    let s_img = SemanticId {
        codes: image.0,
        dedup: image.1,
    };
    let s_t = SemanticId {
        codes: text.0,
        dedup: text.1,
    };
    let vocab = Vocab::new(
        s_img.codes.len(),
        codebook_size,
        &[(Channel::Image, dedup_size), (Channel::Text, dedup_size)],
    );
    let seq = match layout {
        Layout::LateA => fusion::concat_ids(&s_img, &s_t, &vocab),
        Layout::LateB => fusion::interleave_ids(&s_img, &s_t, &vocab),
        Layout::LateC => fusion::wrap_modality_aware(&s_img, &s_t, &vocab),
        other => return Err(SemidError::new_err(format!("`{other}` is not a late-fusion layout"))),
    };
    Ok(seq.map_err(err)?.tokens)
}

/// `(modality, item_ids, rows)` of an embedding-matrix directory.
#[pyfunction]
pub fn read_embeddings(dir: PathBuf) -> PyResult<(String, Vec<String>, Vec<Vec<f64>>)> {
    let m = read_matrix(&dir).map_err(err)?;
    let rows = (0..m.count()).map(|i| m.row(i).to_vec()).collect();
    Ok((m.modality.to_string(), m.item_ids, rows))
}

/// Runs the full pipeline and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
pub fn run_experiment(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config).map_err(err)?;
    let outcome = py.detach(|| run_core(cfg, out)).map_err(err)?;
    std::fs::read_to_string(outcome.out.join("report.json")).map_err(|e| SemidError::new_err(e.to_string()))
}

#[pymodule]
fn semid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SemidError", m.py().get_type::<SemidError>())?;
    m.add_class::<Rvq>()?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(early_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_ids, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
