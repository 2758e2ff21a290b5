//! Small pre-norm encoder-decoder over Semantic-ID token streams.
//!
//! Shared token embeddings, learned absolute positions, RMSNorm, multi-head
//! attention without biases and a separate output head. Each example is its
//! own sequence, so there is no padding inside a batch.

mod beam;
mod trie;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::embedstore::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::fusion::{Token, BOS, EOS, PAD};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::Matrix;

pub use beam::{beam_decode, score_sequence, BeamConfig, Hypothesis};
pub use trie::{build_item_trie, ItemTrie};

const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            width: 128,
            heads: 4,
            ff_width: 512,
            max_positions: 1024,
            vocab_size: 0,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("need at least one encoder and one decoder layer".into()));
        }
        if self.ff_width == 0 || self.max_positions == 0 {
            return Err(Error::Config("ff_width and max_positions must be positive".into()));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config(format!("vocabulary size {} too small", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs · ⌈n / batch_size⌉`.
    pub epochs: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 1000,
            epochs: None,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Alignment-stage defaults: 2000 steps at 1e-4.
    pub fn alignment() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            steps: 2000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    fn total_steps(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size),
            None => self.steps,
        }
    }
}

/// One source/target pair. The decoder sees `[BOS, target…]` and predicts `[target…, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FfIds {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncLayer {
    norm1: ParamId,
    attn: AttnIds,
    norm2: ParamId,
    ff: FfIds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DecLayer {
    norm1: ParamId,
    self_attn: AttnIds,
    norm2: ParamId,
    cross: AttnIds,
    norm3: ParamId,
    ff: FfIds,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    embed: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncLayer>,
    enc_norm: ParamId,
    decoder: Vec<DecLayer>,
    dec_norm: ParamId,
    head: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ModelIds,
}

/// Encoder output plus per-layer cross-attention keys and values.
pub struct Memory {
    pub hidden: Var,
    cross: Vec<(Var, Var)>,
}

struct Init<'a> {
    ps: ParamSet,
    rng: &'a mut ChaCha8Rng,
    width: usize,
}

impl Init<'_> {
    fn dense(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::randn(rows, cols, std, self.rng);
        self.ps.add(name, m)
    }

    fn gain(&mut self, name: String) -> ParamId {
        self.ps.add(name, Matrix::filled(1, self.width, 1.0))
    }

    fn attn(&mut self, prefix: &str) -> AttnIds {
        let w = self.width;
        let std = 1.0 / (w as f64).sqrt();
        AttnIds {
            q: self.dense(format!("{prefix}.q"), w, w, std),
            k: self.dense(format!("{prefix}.k"), w, w, std),
            v: self.dense(format!("{prefix}.v"), w, w, std),
            o: self.dense(format!("{prefix}.o"), w, w, std),
        }
    }

    fn ff(&mut self, prefix: &str, ff_width: usize) -> FfIds {
        let w = self.width;
        FfIds {
            w1: self.dense(format!("{prefix}.ff1"), w, ff_width, 1.0 / (w as f64).sqrt()),
            w2: self.dense(format!("{prefix}.ff2"), ff_width, w, 1.0 / (ff_width as f64).sqrt()),
        }
    }
}

fn register(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamSet, ModelIds) {
    let w = cfg.width;
    let mut init = Init {
        ps: ParamSet::default(),
        rng,
        width: w,
    };
    let embed = init.dense("embed".into(), cfg.vocab_size, w, 1.0);
    let enc_pos = init.dense("enc_pos".into(), cfg.max_positions, w, 0.1);
    let dec_pos = init.dense("dec_pos".into(), cfg.max_positions, w, 0.1);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| EncLayer {
            norm1: init.gain(format!("enc{l}.norm1")),
            attn: init.attn(&format!("enc{l}.attn")),
            norm2: init.gain(format!("enc{l}.norm2")),
            ff: init.ff(&format!("enc{l}"), cfg.ff_width),
        })
        .collect();
    let enc_norm = init.gain("enc.norm".into());
    let decoder = (0..cfg.decoder_layers)
        .map(|l| DecLayer {
            norm1: init.gain(format!("dec{l}.norm1")),
            self_attn: init.attn(&format!("dec{l}.self")),
            norm2: init.gain(format!("dec{l}.norm2")),
            cross: init.attn(&format!("dec{l}.cross")),
            norm3: init.gain(format!("dec{l}.norm3")),
            ff: init.ff(&format!("dec{l}"), cfg.ff_width),
        })
        .collect();
    let dec_norm = init.gain("dec.norm".into());
    let head = init.dense("head".into(), w, cfg.vocab_size, 1.0 / (w as f64).sqrt());
    (
        init.ps,
        ModelIds {
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            head,
        },
    )
}

/// Deterministic initialization from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (params, ids) = register(config, &mut rng);
    Ok(Model {
        config: config.clone(),
        params,
        ids,
    })
}

fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASKED);
        }
    }
    m
}

/// Training-time dropout state.
struct Dropout<'a> {
    rate: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate == 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Matrix::from_vec(r, c, mask));
        g.mul(x, m)
    }
}

fn maybe_drop(g: &mut Graph, x: Var, d: &mut Option<Dropout>) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

impl Model {
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n == 0 {
            return Err(Error::Contract(format!("empty {what} sequence")));
        }
        if n > self.config.max_positions {
            return Err(Error::Config(format!(
                "{what} length {n} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::Contract(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn embed(&self, g: &mut Graph, tokens: &[Token], pos: ParamId) -> Var {
        let table = g.param(self.ids.embed);
        let x = g.gather(table, tokens);
        let pos_table = g.param(pos);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.gather(pos_table, &positions);
        g.add(x, p)
    }

    fn project_kv(&self, g: &mut Graph, x: Var, a: &AttnIds) -> (Var, Var) {
        let wk = g.param(a.k);
        let wv = g.param(a.v);
        (g.matmul(x, wk), g.matmul(x, wv))
    }

    fn attend(&self, g: &mut Graph, xq: Var, kv: (Var, Var), a: &AttnIds, mask: Option<&Matrix>) -> Var {
        let wq = g.param(a.q);
        let q = g.matmul(xq, wq);
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(kv.0, h * dh, dh);
            let vh = g.slice_cols(kv.1, h * dh, dh);
            let s = g.matmul_bt(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                let m = g.constant(m.clone());
                s = g.add(s, m);
            }
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let wo = g.param(a.o);
        g.matmul(cat, wo)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, f: &FfIds) -> Var {
        let w1 = g.param(f.w1);
        let w2 = g.param(f.w2);
        let h = g.matmul(x, w1);
        let h = g.relu(h);
        g.matmul(h, w2)
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: ParamId) -> Var {
        let gv = g.param(gain);
        g.rms_norm(x, gv)
    }

    fn encode_inner(&self, g: &mut Graph, source: &[Token], drop: &mut Option<Dropout>) -> Result<Memory> {
        self.check_len(source.len(), "source")?;
        self.check_tokens(source)?;
        let x = self.embed(g, source, self.ids.enc_pos);
        let mut x = maybe_drop(g, x, drop);
        for layer in &self.ids.encoder {
            let h = self.norm(g, x, layer.norm1);
            let kv = self.project_kv(g, h, &layer.attn);
            let a = self.attend(g, h, kv, &layer.attn, None);
            let a = maybe_drop(g, a, drop);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.norm2);
            let f = self.feed_forward(g, h, &layer.ff);
            let f = maybe_drop(g, f, drop);
            x = g.add(x, f);
        }
        let hidden = self.norm(g, x, self.ids.enc_norm);
        let hidden = maybe_drop(g, hidden, drop);
        let cross = self
            .ids
            .decoder
            .iter()
            .map(|layer| self.project_kv(g, hidden, &layer.cross))
            .collect();
        Ok(Memory { hidden, cross })
    }

    /// Final decoder states for `prefix` (which must start with BOS).
    fn decode_inner(&self, g: &mut Graph, mem: &Memory, prefix: &[Token], drop: &mut Option<Dropout>) -> Result<Var> {
        self.check_len(prefix.len(), "target")?;
        self.check_tokens(prefix)?;
        let x = self.embed(g, prefix, self.ids.dec_pos);
        let mut x = maybe_drop(g, x, drop);
        let mask = (prefix.len() > 1).then(|| causal_mask(prefix.len()));
        for (layer, &kv) in self.ids.decoder.iter().zip(&mem.cross) {
            let h = self.norm(g, x, layer.norm1);
            let self_kv = self.project_kv(g, h, &layer.self_attn);
            let a = self.attend(g, h, self_kv, &layer.self_attn, mask.as_ref());
            let a = maybe_drop(g, a, drop);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.norm2);
            let c = self.attend(g, h, kv, &layer.cross, None);
            let c = maybe_drop(g, c, drop);
            x = g.add(x, c);
            let h = self.norm(g, x, layer.norm3);
            let f = self.feed_forward(g, h, &layer.ff);
            let f = maybe_drop(g, f, drop);
            x = g.add(x, f);
        }
        let x = self.norm(g, x, self.ids.dec_norm);
        Ok(maybe_drop(g, x, drop))
    }

    fn head(&self, g: &mut Graph, states: Var) -> Var {
        let w = g.param(self.ids.head);
        g.matmul(states, w)
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, g: &mut Graph, source: &[Token]) -> Result<Memory> {
        self.encode_inner(g, source, &mut None)
    }

    /// Next-token logits (1 × V) after `prefix`, in inference mode.
    pub fn next_logits(&self, g: &mut Graph, mem: &Memory, prefix: &[Token]) -> Result<Vec<f64>> {
        let states = self.decode_inner(g, mem, prefix, &mut None)?;
        let last = g.gather(states, &[prefix.len() - 1]);
        let logits = self.head(g, last);
        Ok(g.value(logits).data.clone())
    }

    /// Teacher-forced logits (target length + 1 rows, V columns) in inference mode.
    pub fn forward(&self, source: &[Token], target: &[Token]) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let mem = self.encode(&mut g, source)?;
        let prefix = decoder_input(target);
        let states = self.decode_inner(&mut g, &mem, &prefix, &mut None)?;
        let logits = self.head(&mut g, states);
        Ok(g.value(logits).clone())
    }

    /// Summed cross-entropy over non-PAD targets of one example and the count of
    /// such targets. An all-PAD target is a padding example and contributes nothing.
    fn example_loss(&self, g: &mut Graph, ex: &Example, drop: &mut Option<Dropout>) -> Result<Option<(Var, usize)>> {
        if ex.target.iter().all(|&t| t == PAD) {
            return Ok(None);
        }
        let mem = self.encode_inner(g, &ex.source, drop)?;
        let prefix = decoder_input(&ex.target);
        let labels = decoder_labels(&ex.target);
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != PAD).collect();
        let states = self.decode_inner(g, &mem, &prefix, drop)?;
        let logits = self.head(g, states);
        let (logits, targets) = if keep.len() == labels.len() {
            (logits, labels)
        } else {
            let sel = g.gather(logits, &keep);
            (sel, keep.iter().map(|&i| labels[i]).collect())
        };
        let ce = g.cross_entropy(logits, &targets);
        Ok(Some((ce, targets.len())))
    }

    fn batch_loss(&self, batch: &[&Example], rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Matrix>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut drop = match rng {
            Some(rng) if self.config.dropout > 0.0 => Some(Dropout {
                rate: self.config.dropout,
                rng,
            }),
            _ => None,
        };
        let mut g = Graph::new(&self.params);
        let mut terms = Vec::new();
        let mut count = 0;
        for ex in batch {
            if let Some((ce, n)) = self.example_loss(&mut g, ex, &mut drop)? {
                terms.push(ce);
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Contract("batch has no non-PAD target tokens".into()));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        let loss = g.scale(total, 1.0 / count as f64);
        let grads = g.backward(loss);
        let mut acc = self.params.zeros_like();
        grads.accumulate_params(&mut acc);
        Ok((g.scalar(loss), acc))
    }

    /// Mean token cross-entropy over the batch and its gradient for every parameter.
    /// Dropout is off.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Matrix>)> {
        let refs: Vec<&Example> = batch.iter().collect();
        self.batch_loss(&refs, None)
    }

    /// Mean token cross-entropy with dropout off.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut g = Graph::new(&self.params);
        let mut total = 0.0;
        let mut count = 0;
        for ex in batch {
            if let Some((ce, n)) = self.example_loss(&mut g, ex, &mut None)? {
                total += g.scalar(ce);
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Contract("batch has no non-PAD target tokens".into()));
        }
        Ok(total / count as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
            dtype: "f32".into(),
            byte_order: "little".into(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
        let flat: Vec<f64> = self.params.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
        let path = dir.join("params.bin");
        fs::write(&path, encode_f32(&flat)).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        let mut model = init_model(&header.config)?;
        let layout: Vec<(String, usize, usize)> = model
            .params
            .names
            .iter()
            .zip(&model.params.tensors)
            .map(|(n, t)| (n.clone(), t.rows, t.cols))
            .collect();
        let stored: Vec<(String, usize, usize)> = header.tensors.iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
        if layout != stored {
            return Err(Error::Integrity(format!("{}: tensor layout does not match config", path.display())));
        }
        let path = dir.join("params.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = 4 * model.num_parameters();
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "{}: expected {expected} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let flat = decode_f32(&bytes);
        let mut off = 0;
        for t in model.params.tensors.iter_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    dtype: String,
    byte_order: String,
}

pub fn decoder_input(target: &[Token]) -> Vec<Token> {
    let mut v = Vec::with_capacity(target.len() + 1);
    v.push(BOS);
    v.extend_from_slice(target);
    v
}

pub fn decoder_labels(target: &[Token]) -> Vec<Token> {
    let mut v = target.to_vec();
    v.push(EOS);
    v
}

/// Mini-batch Adam with global-norm clipping. Returns the per-step loss curve.
pub fn train(model: &mut Model, examples: &[Example], tc: &TrainConfig) -> Result<Vec<f64>> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    let steps = tc.total_steps(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            learning_rate: tc.learning_rate,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = model.batch_loss(&batch, Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        clip_grad_norm(&mut grads, tc.clip_norm);
        opt.step(&mut model.params, &grads);
        curve.push(loss);
    }
    Ok(curve)
}

/// Translation pre-training on alignment pairs; the same loop as [`train`].
pub fn align_pretrain(model: &mut Model, pairs: &[Example], tc: &TrainConfig) -> Result<Vec<f64>> {
    train(model, pairs, tc)
}

/// `step,loss` lines.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l:.8}\n"));
    }
    out
}

#[cfg(test)]
mod tests;
