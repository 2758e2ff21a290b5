//! Early gated fusion and late-fusion token sequence construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rvq::rqvae::{select_rows, RqVaeNet};
use crate::rvq::{RvqConfig, RvqModel, SemanticId};
use crate::tensor::{dot, Matrix};

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const IMG: Token = 3;
pub const TXT: Token = 4;
pub const SEP: Token = 5;
pub const NUM_SPECIAL: usize = 6;
const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["PAD", "BOS", "EOS", "IMG", "TXT", "SEP"];

const UNIT_TOL: f64 = 1e-6;

/// Gate `α = σ(relu([e_t ‖ e_img]·W1 + b1)·W2 + b2)`, one weight per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNetwork {
    /// `2d × d`
    pub w1: Matrix,
    pub b1: Matrix,
    /// `d × d`
    pub w2: Matrix,
    pub b2: Matrix,
}

impl GateNetwork {
    /// All weights zero; every output equals `alpha`.
    pub fn constant(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("constant gate alpha {alpha} must lie in (0, 1)")));
        }
        Ok(GateNetwork {
            w1: Matrix::zeros(2 * dim, dim),
            b1: Matrix::zeros(1, dim),
            w2: Matrix::zeros(dim, dim),
            b2: Matrix::filled(1, dim, (alpha / (1.0 - alpha)).ln()),
        })
    }

    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GateNetwork {
            w1: Matrix::randn(2 * dim, dim, (1.0 / dim as f64).sqrt(), &mut rng),
            b1: Matrix::zeros(1, dim),
            w2: Matrix::randn(dim, dim, (1.0 / dim as f64).sqrt(), &mut rng),
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.cols
    }

    pub fn alpha(&self, e_t: &[f64], e_img: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let input: Vec<f64> = e_t.iter().chain(e_img).copied().collect();
        let h: Vec<f64> = (0..d)
            .map(|j| {
                let s: f64 = input.iter().enumerate().map(|(i, v)| v * self.w1.get(i, j)).sum();
                (s + self.b1.data[j]).max(0.0)
            })
            .collect();
        (0..d)
            .map(|k| {
                let s: f64 = h.iter().enumerate().map(|(j, v)| v * self.w2.get(j, k)).sum();
                sigmoid(s + self.b2.data[k])
            })
            .collect()
    }

    fn register(&self, ps: &mut ParamSet) -> GateIds {
        GateIds {
            w1: ps.add("gate.w1", self.w1.clone()),
            b1: ps.add("gate.b1", self.b1.clone()),
            w2: ps.add("gate.w2", self.w2.clone()),
            b2: ps.add("gate.b2", self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GateIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl GateIds {
    /// Fused, normalized rows for text rows `t` and image rows `i`.
    fn fuse(&self, g: &mut Graph, t: Var, i: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let input = g.concat_cols(&[t, i]);
        let h = g.matmul(input, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let a = g.matmul(h, w2);
        let a = g.add_row(a, b2);
        let alpha = g.sigmoid(a);
        let one_minus = g.affine(alpha, -1.0, 1.0);
        let at = g.mul(alpha, t);
        let ai = g.mul(one_minus, i);
        let z = g.add(at, ai);
        g.l2_normalize_rows(z)
    }

    fn extract(&self, ps: &ParamSet) -> GateNetwork {
        GateNetwork {
            w1: ps.get(self.w1).clone(),
            b1: ps.get(self.b1).clone(),
            w2: ps.get(self.w2).clone(),
            b2: ps.get(self.b2).clone(),
        }
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `normalize(α ⊙ e_t + (1 − α) ⊙ e_img)` with `α = gate([e_t ‖ e_img])`.
pub fn early_fuse(e_t: &[f64], e_img: &[f64], gate: &GateNetwork) -> Result<Vec<f64>> {
    if e_t.len() != gate.dim() || e_img.len() != gate.dim() {
        return Err(Error::Contract(format!(
            "fusion inputs have dims {} and {}, gate expects {}",
            e_t.len(),
            e_img.len(),
            gate.dim()
        )));
    }
    check_unit(e_t, "text embedding")?;
    check_unit(e_img, "image embedding")?;
    let alpha = gate.alpha(e_t, e_img);
    let mut z: Vec<f64> = alpha
        .iter()
        .zip(e_t.iter().zip(e_img))
        .map(|(a, (t, i))| a * t + (1.0 - a) * i)
        .collect();
    let n = dot(&z, &z).sqrt();
    if !(n > 1e-12) {
        return Err(Error::Degenerate("fused embedding cancels to zero".into()));
    }
    z.iter_mut().for_each(|x| *x /= n);
    Ok(z)
}

/// Fuses paired rows of `text` and `image`.
pub fn early_fuse_rows(text: &Matrix, image: &Matrix, gate: &GateNetwork) -> Result<Matrix> {
    if text.shape() != image.shape() {
        return Err(Error::Contract("text and image matrices differ in shape".into()));
    }
    let mut out = Matrix::zeros(text.rows, text.cols);
    for r in 0..text.rows {
        let z = early_fuse(text.row(r), image.row(r), gate)?;
        out.row_mut(r).copy_from_slice(&z);
    }
    Ok(out)
}

/// Trains the gate jointly with an RQ-VAE whose input is the fused vector.
/// Returns the quantizer, the trained gate and the fused rows under it.
pub fn fit_gated_rqvae(
    text: &Matrix,
    image: &Matrix,
    cfg: &RvqConfig,
) -> Result<(RvqModel, GateNetwork, Matrix)> {
    if text.shape() != image.shape() {
        return Err(Error::Contract("text and image matrices differ in shape".into()));
    }
    let mut net = RqVaeNet::new(text.cols, cfg);
    let gate_ids = GateNetwork::random(text.cols, cfg.seed ^ 0x9a7e).register(&mut net.params);
    net.train(text.rows, &|g, idx| {
        let t = g.constant(select_rows(text, idx));
        let i = g.constant(select_rows(image, idx));
        gate_ids.fuse(g, t, i)
    })?;
    let gate = gate_ids.extract(&net.params);
    let fused = early_fuse_rows(text, image, &gate)?;
    Ok((net.into_model(), gate, fused))
}

/// Which Semantic-ID stream a token block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Text,
    Image,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "unimodal")]
    Unimodal,
    #[serde(rename = "early")]
    Early,
    #[serde(rename = "lateA")]
    LateA,
    #[serde(rename = "lateB")]
    LateB,
    #[serde(rename = "lateC")]
    LateC,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Unimodal => "unimodal",
            Layout::Early => "early",
            Layout::LateA => "lateA",
            Layout::LateB => "lateB",
            Layout::LateC => "lateC",
        }
    }

    pub fn is_multimodal(self) -> bool {
        !matches!(self, Layout::Unimodal)
    }

    /// Token count of one item's sequence for IDs of `levels` codes.
    pub fn sequence_len(self, levels: usize) -> usize {
        match self {
            Layout::Unimodal | Layout::Early => levels + 1,
            Layout::LateA | Layout::LateB => 2 * (levels + 1),
            Layout::LateC => 2 * (levels + 1) + 3,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub channel: Channel,
    /// First code token; level `l`, code `c` maps to `offset + l·K + c`.
    pub offset: usize,
    pub dedup_offset: usize,
    pub dedup_size: usize,
}

/// Token id layout: special block, then per channel `L·K` code tokens
/// followed by its dedup block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codebook_size: usize,
    pub specials: Vec<String>,
    pub blocks: Vec<ChannelBlock>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenTag {
    Special { name: String },
    Code { channel: Channel, level: usize },
    Dedup { channel: Channel },
}

impl Vocab {
    /// `channels` pairs each channel with its dedup block size (max dedup + 1).
    pub fn new(levels: usize, codebook_size: usize, channels: &[(Channel, usize)]) -> Self {
        let mut next = NUM_SPECIAL;
        let blocks = channels
            .iter()
            .map(|&(channel, dedup_size)| {
                let offset = next;
                let dedup_offset = offset + levels * codebook_size;
                next = dedup_offset + dedup_size.max(1);
                ChannelBlock {
                    channel,
                    offset,
                    dedup_offset,
                    dedup_size: dedup_size.max(1),
                }
            })
            .collect();
        Vocab {
            levels,
            codebook_size,
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            blocks,
            size: next,
        }
    }

    /// Vocabulary sized for the given per-channel ID tables.
    pub fn for_ids(levels: usize, codebook_size: usize, tables: &[(Channel, &BTreeMap<String, SemanticId>)]) -> Self {
        let channels: Vec<(Channel, usize)> = tables
            .iter()
            .map(|(c, t)| (*c, t.values().map(|s| s.dedup + 1).max().unwrap_or(1)))
            .collect();
        Vocab::new(levels, codebook_size, &channels)
    }

    fn block(&self, channel: Channel) -> Result<&ChannelBlock> {
        self.blocks
            .iter()
            .find(|b| b.channel == channel)
            .ok_or_else(|| Error::Contract(format!("vocabulary has no {channel:?} block")))
    }

    /// Tokens for the L codes and the dedup position of `id`.
    pub fn encode_id(&self, channel: Channel, id: &SemanticId) -> Result<Vec<Token>> {
        let b = self.block(channel)?;
        if id.codes.len() != self.levels {
            return Err(Error::Contract(format!(
                "id has {} codes, vocabulary expects {}",
                id.codes.len(),
                self.levels
            )));
        }
        let mut out = Vec::with_capacity(self.levels + 1);
        for (l, &c) in id.codes.iter().enumerate() {
            if c >= self.codebook_size {
                return Err(Error::Contract(format!("code {c} out of range")));
            }
            out.push(b.offset + l * self.codebook_size + c);
        }
        if id.dedup >= b.dedup_size {
            return Err(Error::Contract(format!(
                "dedup {} exceeds vocabulary block of {}",
                id.dedup, b.dedup_size
            )));
        }
        out.push(b.dedup_offset + id.dedup);
        Ok(out)
    }

    /// Inverse of [`Vocab::encode_id`].
    pub fn decode_id(&self, channel: Channel, tokens: &[Token]) -> Result<SemanticId> {
        if tokens.len() != self.levels + 1 {
            return Err(Error::Contract(format!(
                "expected {} tokens, found {}",
                self.levels + 1,
                tokens.len()
            )));
        }
        let b = self.block(channel)?;
        let mut codes = Vec::with_capacity(self.levels);
        for (l, &t) in tokens[..self.levels].iter().enumerate() {
            let lo = b.offset + l * self.codebook_size;
            if !(lo..lo + self.codebook_size).contains(&t) {
                return Err(Error::Contract(format!("token {t} is not a level-{l} {channel:?} code")));
            }
            codes.push(t - lo);
        }
        let d = tokens[self.levels];
        if !(b.dedup_offset..b.dedup_offset + b.dedup_size).contains(&d) {
            return Err(Error::Contract(format!("token {d} is not a {channel:?} dedup token")));
        }
        Ok(SemanticId {
            codes,
            dedup: d - b.dedup_offset,
        })
    }

    pub fn tag(&self, token: Token) -> Result<TokenTag> {
        if token < NUM_SPECIAL {
            return Ok(TokenTag::Special {
                name: SPECIAL_NAMES[token].to_string(),
            });
        }
        for b in &self.blocks {
            if token >= b.offset && token < b.dedup_offset {
                return Ok(TokenTag::Code {
                    channel: b.channel,
                    level: (token - b.offset) / self.codebook_size,
                });
            }
            if token >= b.dedup_offset && token < b.dedup_offset + b.dedup_size {
                return Ok(TokenTag::Dedup { channel: b.channel });
            }
        }
        Err(Error::Contract(format!("token {token} outside vocabulary of {}", self.size)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub layout: Layout,
    pub provenance: Vec<TokenTag>,
}

impl TokenSequence {
    fn new(tokens: Vec<Token>, layout: Layout, vocab: &Vocab) -> Result<Self> {
        let provenance = tokens.iter().map(|&t| vocab.tag(t)).collect::<Result<_>>()?;
        Ok(TokenSequence {
            tokens,
            layout,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn same_len(a: &SemanticId, b: &SemanticId) -> Result<()> {
    if a.codes.len() != b.codes.len() {
        return Err(Error::Contract(format!(
            "modality IDs differ in length: {} vs {}",
            a.codes.len(),
            b.codes.len()
        )));
    }
    Ok(())
}

/// A single channel's ID as a sequence (unimodal or early-fused).
pub fn single_ids(s: &SemanticId, channel: Channel, layout: Layout, vocab: &Vocab) -> Result<TokenSequence> {
    TokenSequence::new(vocab.encode_id(channel, s)?, layout, vocab)
}

/// `[s_img ‖ s_t]`
pub fn concat_ids(s_img: &SemanticId, s_t: &SemanticId, vocab: &Vocab) -> Result<TokenSequence> {
    same_len(s_img, s_t)?;
    let mut tokens = vocab.encode_id(Channel::Image, s_img)?;
    tokens.extend(vocab.encode_id(Channel::Text, s_t)?);
    TokenSequence::new(tokens, Layout::LateA, vocab)
}

/// `[img₁, txt₁, img₂, txt₂, …]`, dedup positions last.
pub fn interleave_ids(s_img: &SemanticId, s_t: &SemanticId, vocab: &Vocab) -> Result<TokenSequence> {
    same_len(s_img, s_t)?;
    let a = vocab.encode_id(Channel::Image, s_img)?;
    let b = vocab.encode_id(Channel::Text, s_t)?;
    let tokens = a.iter().zip(&b).flat_map(|(&x, &y)| [x, y]).collect();
    TokenSequence::new(tokens, Layout::LateB, vocab)
}

pub fn deinterleave(seq: &[Token], vocab: &Vocab) -> Result<(SemanticId, SemanticId)> {
    if seq.len() % 2 != 0 {
        return Err(Error::Contract(format!(
            "interleaved sequence has odd length {}",
            seq.len()
        )));
    }
    let img: Vec<Token> = seq.iter().step_by(2).copied().collect();
    let txt: Vec<Token> = seq.iter().skip(1).step_by(2).copied().collect();
    Ok((
        vocab.decode_id(Channel::Image, &img)?,
        vocab.decode_id(Channel::Text, &txt)?,
    ))
}

/// `[IMG, s_img, SEP, TXT, s_t]`
pub fn wrap_modality_aware(s_img: &SemanticId, s_t: &SemanticId, vocab: &Vocab) -> Result<TokenSequence> {
    same_len(s_img, s_t)?;
    let mut tokens = vec![IMG];
    tokens.extend(vocab.encode_id(Channel::Image, s_img)?);
    tokens.push(SEP);
    tokens.push(TXT);
    tokens.extend(vocab.encode_id(Channel::Text, s_t)?);
    TokenSequence::new(tokens, Layout::LateC, vocab)
}

/// Inverse of [`wrap_modality_aware`].
pub fn unwrap_modality_aware(seq: &[Token], vocab: &Vocab) -> Result<(SemanticId, SemanticId)> {
    let n = vocab.levels + 1;
    if seq.len() != 2 * n + 3 || seq[0] != IMG || seq[n + 1] != SEP || seq[n + 2] != TXT {
        return Err(Error::Contract("not a modality-aware sequence".into()));
    }
    Ok((
        vocab.decode_id(Channel::Image, &seq[1..n + 1])?,
        vocab.decode_id(Channel::Text, &seq[n + 3..])?,
    ))
}

/// Source/target token sequences for one translation direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub item: String,
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

/// `[IMG, s_img] → [TXT, s_t]` and `[TXT, s_t] → [IMG, s_img]` for every item.
pub fn make_alignment_pairs(
    image_ids: &BTreeMap<String, SemanticId>,
    text_ids: &BTreeMap<String, SemanticId>,
    vocab: &Vocab,
) -> Result<Vec<AlignmentPair>> {
    let items: BTreeSet<&String> = image_ids.keys().chain(text_ids.keys()).collect();
    let missing: Vec<String> = items
        .iter()
        .filter(|i| !image_ids.contains_key(**i) || !text_ids.contains_key(**i))
        .map(|i| i.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let mut pairs = Vec::with_capacity(2 * items.len());
    for item in items {
        let mut img = vec![IMG];
        img.extend(vocab.encode_id(Channel::Image, &image_ids[item])?);
        let mut txt = vec![TXT];
        txt.extend(vocab.encode_id(Channel::Text, &text_ids[item])?);
        pairs.push(AlignmentPair {
            item: item.clone(),
            source: img.clone(),
            target: txt.clone(),
        });
        pairs.push(AlignmentPair {
            item: item.clone(),
            source: txt,
            target: img,
        });
    }
    Ok(pairs)
}

/// Per-channel Semantic-ID tables feeding sequence construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdTables {
    pub text: Option<BTreeMap<String, SemanticId>>,
    pub image: Option<BTreeMap<String, SemanticId>>,
    pub fused: Option<BTreeMap<String, SemanticId>>,
}

/// Builds each item's token sequence for `layout`. With `image_first = false`
/// the two modalities swap places in the late-fusion layouts.
pub fn build_catalog(
    layout: Layout,
    tables: &IdTables,
    vocab: &Vocab,
    image_first: bool,
) -> Result<BTreeMap<String, TokenSequence>> {
    let need = |t: &Option<BTreeMap<String, SemanticId>>, what: &str| {
        t.clone()
            .ok_or_else(|| Error::Config(format!("fusion `{layout}` needs {what} Semantic IDs")))
    };
    match layout {
        Layout::Unimodal => {
            let t = need(&tables.text, "text")?;
            t.iter()
                .map(|(k, s)| Ok((k.clone(), single_ids(s, Channel::Text, layout, vocab)?)))
                .collect()
        }
        Layout::Early => {
            let t = need(&tables.fused, "fused")?;
            t.iter()
                .map(|(k, s)| Ok((k.clone(), single_ids(s, Channel::Fused, layout, vocab)?)))
                .collect()
        }
        Layout::LateA | Layout::LateB | Layout::LateC => {
            let img = need(&tables.image, "image")?;
            let txt = need(&tables.text, "text")?;
            let missing: Vec<String> = img
                .keys()
                .filter(|k| !txt.contains_key(*k))
                .chain(txt.keys().filter(|k| !img.contains_key(*k)))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::Coverage(missing));
            }
            img.iter()
                .map(|(k, si)| {
                    let st = &txt[k];
                    let seq = match layout {
                        Layout::LateA => concat_ids(si, st, vocab)?,
                        Layout::LateB => interleave_ids(si, st, vocab)?,
                        _ => wrap_modality_aware(si, st, vocab)?,
                    };
                    Ok((k.clone(), if image_first { seq } else { swap_modalities(seq, vocab)? }))
                })
                .collect()
        }
    }
}

fn swap_modalities(seq: TokenSequence, vocab: &Vocab) -> Result<TokenSequence> {
    let n = vocab.levels + 1;
    let t = &seq.tokens;
    let tokens: Vec<Token> = match seq.layout {
        Layout::LateA => t[n..].iter().chain(&t[..n]).copied().collect(),
        Layout::LateB => t.chunks(2).flat_map(|p| [p[1], p[0]]).collect(),
        Layout::LateC => {
            let mut out = vec![TXT];
            out.extend_from_slice(&t[n + 3..]);
            out.push(SEP);
            out.push(IMG);
            out.extend_from_slice(&t[1..n + 1]);
            out
        }
        _ => t.clone(),
    };
    TokenSequence::new(tokens, seq.layout, vocab)
}
