//! Trie-constrained beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::trie::{ItemTrie, ROOT};
use super::{decoder_input, Model};
use crate::autodiff::{log_softmax, Graph};
use crate::error::{Error, Result};
use crate::fusion::{Token, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_length: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 20,
            max_length: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub item: String,
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

struct Partial {
    /// Decoder input so far, starting with BOS.
    prefix: Vec<Token>,
    node: usize,
    log_prob: f64,
}

fn by_score(a_lp: f64, b_lp: f64) -> Ordering {
    b_lp.partial_cmp(&a_lp).unwrap_or(Ordering::Equal)
}

/// Ranked catalog items for `context`: every hypothesis follows a trie path,
/// scores are summed full-vocabulary log-probabilities, and ties go to the
/// smaller item id. Returns at most `beam_size` items.
pub fn beam_decode(model: &Model, context: &[Token], trie: &ItemTrie, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if trie.is_empty() {
        return Err(Error::Contract("beam search over an empty trie".into()));
    }
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam size must be >= 1".into()));
    }
    if cfg.max_length < trie.max_depth() {
        return Err(Error::Config(format!(
            "max decoding length {} is shorter than the longest item sequence ({})",
            cfg.max_length,
            trie.max_depth()
        )));
    }
    let mut g = Graph::new(&model.params);
    let mem = model.encode(&mut g, context)?;
    let mut active = vec![Partial {
        prefix: vec![BOS],
        node: ROOT,
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_length {
        if active.is_empty() {
            break;
        }
        let mut candidates = Vec::new();
        for p in &active {
            let lp = log_softmax(&model.next_logits(&mut g, &mem, &p.prefix)?);
            for (tok, child) in trie.children(p.node) {
                let mut prefix = p.prefix.clone();
                prefix.push(tok);
                candidates.push(Partial {
                    prefix,
                    node: child,
                    log_prob: p.log_prob + lp[tok],
                });
            }
        }
        candidates.sort_by(|a, b| by_score(a.log_prob, b.log_prob).then_with(|| a.prefix.cmp(&b.prefix)));
        candidates.truncate(cfg.beam_size);
        active.clear();
        for c in candidates {
            if let Some(item) = trie.item(c.node) {
                finished.push(Hypothesis {
                    item: item.to_string(),
                    tokens: c.prefix[1..].to_vec(),
                    log_prob: c.log_prob,
                });
            }
            if trie.has_children(c.node) {
                active.push(c);
            }
        }
    }
    finished.sort_by(|a, b| by_score(a.log_prob, b.log_prob).then_with(|| a.item.cmp(&b.item)));
    finished.truncate(cfg.beam_size);
    Ok(finished)
}

/// Summed log-probability of `tokens` after `context` under teacher forcing
/// (the end-of-sequence token is not scored).
pub fn score_sequence(model: &Model, context: &[Token], tokens: &[Token]) -> Result<f64> {
    let logits = model.forward(context, tokens)?;
    debug_assert_eq!(logits.rows, decoder_input(tokens).len());
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(logits.row(i))[t])
        .sum())
}
