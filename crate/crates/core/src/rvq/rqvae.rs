//! RQ-VAE: residual quantization between a shallow encoder and decoder.
//!
//! Per batch the loss is
//! `‖dec(z + sg(q − z)) − x‖² + ‖sg(z) − q‖² + β‖z − sg(q)‖²`, averaged over
//! rows, where `z = enc(x)` and `q` is the sum of the greedily selected
//! codewords.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_population, quantize, residual_kmeans, RvqConfig, RvqMode, RvqModel};
use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    pub hidden: usize,
    pub code_dim: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub clip_norm: f64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            hidden: 64,
            code_dim: 32,
            steps: 300,
            learning_rate: 1e-3,
            batch_size: 256,
            beta: super::DEFAULT_BETA,
            clip_norm: 1.0,
        }
    }
}

/// One hidden layer with a rectifier: `relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    pub fn hidden(&self) -> usize {
        self.w1.cols
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.w1.cols)
            .map(|j| {
                let s: f64 = x.iter().enumerate().map(|(i, v)| v * self.w1.get(i, j)).sum();
                (s + self.b1.data[j]).max(0.0)
            })
            .collect();
        (0..self.w2.cols)
            .map(|k| {
                let s: f64 = h.iter().enumerate().map(|(j, v)| v * self.w2.get(j, k)).sum();
                s + self.b2.data[k]
            })
            .collect()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for m in [&self.w1, &self.b1, &self.w2, &self.b2] {
            out.extend_from_slice(&m.data);
        }
    }

    fn unflatten(input: usize, hidden: usize, output: usize, data: &[f64]) -> (Self, usize) {
        let shapes = [(input, hidden), (1, hidden), (hidden, output), (1, output)];
        let mut off = 0;
        let mut parts = shapes.iter().map(|&(r, c)| {
            let m = Matrix::from_vec(r, c, data[off..off + r * c].to_vec());
            off += r * c;
            m
        });
        let mlp = Mlp {
            w1: parts.next().unwrap(),
            b1: parts.next().unwrap(),
            w2: parts.next().unwrap(),
            b2: parts.next().unwrap(),
        };
        (mlp, shapes.iter().map(|(r, c)| r * c).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl AutoEncoder {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.flatten_into(&mut out);
        self.decoder.flatten_into(&mut out);
        out
    }

    pub fn unflatten(dim: usize, hidden: usize, code_dim: usize, data: &[f64]) -> Result<Self> {
        let need = 2 * (dim * hidden + hidden) + hidden * code_dim + code_dim + code_dim * hidden + dim;
        if data.len() != need {
            return Err(Error::Integrity(format!(
                "network blob holds {} values, expected {need}",
                data.len()
            )));
        }
        let (encoder, used) = Mlp::unflatten(dim, hidden, code_dim, data);
        let (decoder, _) = Mlp::unflatten(code_dim, hidden, dim, &data[used..]);
        Ok(AutoEncoder { encoder, decoder })
    }
}

/// Parameter handles of an [`Mlp`] inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpIds {
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MlpIds {
            w1: ps.add(
                format!("{prefix}.w1"),
                Matrix::randn(input, hidden, (2.0 / input as f64).sqrt(), rng),
            ),
            b1: ps.add(format!("{prefix}.b1"), Matrix::zeros(1, hidden)),
            w2: ps.add(
                format!("{prefix}.w2"),
                Matrix::randn(hidden, output, (1.0 / hidden as f64).sqrt(), rng),
            ),
            b2: ps.add(format!("{prefix}.b2"), Matrix::zeros(1, output)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    pub fn extract(&self, ps: &ParamSet) -> Mlp {
        Mlp {
            w1: ps.get(self.w1).clone(),
            b1: ps.get(self.b1).clone(),
            w2: ps.get(self.w2).clone(),
            b2: ps.get(self.b2).clone(),
        }
    }
}

/// Trainable RQ-VAE state. Extra parameters (e.g. a fusion gate feeding the
/// input) may be registered in `params` before training.
pub struct RqVaeNet {
    pub params: ParamSet,
    pub encoder: MlpIds,
    pub decoder: MlpIds,
    pub codebooks: Vec<ParamId>,
    pub dim: usize,
    pub cfg: RvqConfig,
}

/// Values frozen by the stop-gradient operator for one batch.
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    pub z: Matrix,
    pub q: Matrix,
    pub codes: Vec<Vec<usize>>,
}

impl RqVaeNet {
    pub fn new(dim: usize, cfg: &RvqConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &cfg.rqvae;
        let mut params = ParamSet::default();
        let encoder = MlpIds::register(&mut params, "enc", dim, r.hidden, r.code_dim, &mut rng);
        let decoder = MlpIds::register(&mut params, "dec", r.code_dim, r.hidden, dim, &mut rng);
        let codebooks = (0..cfg.levels)
            .map(|l| {
                params.add(
                    format!("codebook{l}"),
                    Matrix::zeros(cfg.codebook_size, r.code_dim),
                )
            })
            .collect();
        RqVaeNet {
            params,
            encoder,
            decoder,
            codebooks,
            dim,
            cfg: cfg.clone(),
        }
    }

    fn codebook_values(&self) -> Vec<Matrix> {
        self.codebooks.iter().map(|&id| self.params.get(id).clone()).collect()
    }

    /// Builds the batch loss on `g` for input rows `x`; returns the loss and the
    /// stop-gradient values used.
    pub fn loss(&self, g: &mut Graph, x: Var) -> (Var, FrozenBatch) {
        let rows = g.value(x).rows as f64;
        let z = self.encoder.forward(g, x);
        let zval = g.value(z).clone();
        let cbs = self.codebook_values();
        let mut codes_per_row = Vec::with_capacity(zval.rows);
        for i in 0..zval.rows {
            codes_per_row.push(quantize(&cbs, zval.row(i)).0);
        }
        let mut q: Option<Var> = None;
        for (l, &cid) in self.codebooks.iter().enumerate() {
            let idx: Vec<usize> = codes_per_row.iter().map(|c| c[l]).collect();
            let table = g.param(cid);
            let sel = g.gather(table, &idx);
            q = Some(match q {
                Some(acc) => g.add(acc, sel),
                None => sel,
            });
        }
        let q = q.expect("at least one level");
        let qval = g.value(q).clone();

        let mut offset = qval.clone();
        for (o, zv) in offset.data.iter_mut().zip(&zval.data) {
            *o -= zv;
        }
        let offset = g.constant(offset);
        let z_st = g.add(z, offset);
        let rec = self.decoder.forward(g, z_st);
        let diff = g.sub(rec, x);
        let recon = g.sum_sq(diff);

        let z_frozen = g.constant(zval.clone());
        let cb_diff = g.sub(q, z_frozen);
        let codebook_term = g.sum_sq(cb_diff);
        let q_frozen = g.constant(qval.clone());
        let commit_diff = g.sub(z, q_frozen);
        let commit = g.sum_sq(commit_diff);
        let commit = g.scale(commit, self.cfg.rqvae.beta);

        let total = g.add(recon, codebook_term);
        let total = g.add(total, commit);
        let loss = g.scale(total, 1.0 / rows);
        (
            loss,
            FrozenBatch {
                z: zval,
                q: qval,
                codes: codes_per_row,
            },
        )
    }

    /// Initialises codebooks by residual k-means over the encoder outputs of all rows.
    pub fn init_codebooks(&mut self, all_inputs: &dyn Fn(&mut Graph) -> Var) -> Result<()> {
        let z = {
            let mut g = Graph::new(&self.params);
            let x = all_inputs(&mut g);
            let z = self.encoder.forward(&mut g, x);
            g.value(z).clone()
        };
        let cbs = residual_kmeans(&z, self.cfg.levels, self.cfg.codebook_size, self.cfg.seed)?;
        for (&id, cb) in self.codebooks.iter().zip(cbs) {
            *self.params.get_mut(id) = cb;
        }
        Ok(())
    }

    /// Mini-batch Adam over `n_rows` inputs produced by `build(graph, row_indices)`.
    /// Returns the loss curve.
    pub fn train(
        &mut self,
        n_rows: usize,
        build: &dyn Fn(&mut Graph, &[usize]) -> Var,
    ) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..n_rows).collect();
        self.init_codebooks(&|g| build(g, &all))?;
        let r = self.cfg.rqvae.clone();
        let mut opt = Adam::new(
            &self.params,
            AdamConfig {
                learning_rate: r.learning_rate,
                ..Default::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let mut curve = Vec::with_capacity(r.steps);
        for step in 0..r.steps {
            let batch: Vec<usize> = if r.batch_size >= n_rows {
                all.clone()
            } else {
                let mut b = index::sample(&mut rng, n_rows, r.batch_size).into_vec();
                b.sort_unstable();
                b
            };
            let (loss_value, mut grads) = {
                let mut g = Graph::new(&self.params);
                let x = build(&mut g, &batch);
                let (loss, _) = self.loss(&mut g, x);
                let grads = g.backward(loss);
                let mut acc = self.params.zeros_like();
                grads.accumulate_params(&mut acc);
                (g.scalar(loss), acc)
            };
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: loss_value,
                });
            }
            curve.push(loss_value);
            clip_grad_norm(&mut grads, r.clip_norm);
            opt.step(&mut self.params, &grads);
        }
        Ok(curve)
    }

    pub fn into_model(self) -> RvqModel {
        let networks = AutoEncoder {
            encoder: self.encoder.extract(&self.params),
            decoder: self.decoder.extract(&self.params),
        };
        RvqModel {
            levels: self.cfg.levels,
            codebook_size: self.cfg.codebook_size,
            dim: self.dim,
            code_dim: self.cfg.rqvae.code_dim,
            mode: RvqMode::Rqvae,
            seed: self.cfg.seed,
            beta: self.cfg.rqvae.beta,
            codebooks: self.codebook_values(),
            networks: Some(networks),
        }
    }
}

/// Trains an RQ-VAE on the rows of `data`; returns the model and its loss curve.
pub fn fit(data: &Matrix, cfg: &RvqConfig) -> Result<(RvqModel, Vec<f64>)> {
    check_population(data, 1, cfg.codebook_size)?;
    let mut net = RqVaeNet::new(data.cols, cfg);
    let curve = net.train(data.rows, &|g, idx| g.constant(select_rows(data, idx)))?;
    Ok((net.into_model(), curve))
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Surrogate loss with the stop-gradient quantities held at `frozen`, evaluated
/// directly (no tape). Used to check straight-through gradients numerically.
pub fn frozen_surrogate_loss(
    enc: &Mlp,
    dec: &Mlp,
    x: &Matrix,
    frozen: &FrozenBatch,
    beta: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows {
        let z = enc.forward(x.row(i));
        let (z0, q0) = (frozen.z.row(i), frozen.q.row(i));
        let z_st: Vec<f64> = z.iter().zip(z0).zip(q0).map(|((z, z0), q0)| z + (q0 - z0)).collect();
        let rec = dec.forward(&z_st);
        let r: Vec<f64> = rec.iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
        let cb: Vec<f64> = z0.iter().zip(q0).map(|(a, b)| b - a).collect();
        let cm: Vec<f64> = z.iter().zip(q0).map(|(a, b)| a - b).collect();
        total += dot(&r, &r) + dot(&cb, &cb) + beta * dot(&cm, &cm);
    }
    total / x.rows as f64
}
