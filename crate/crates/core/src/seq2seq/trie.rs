//! Prefix tree over catalog token sequences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::{Token, TokenSequence};

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    children: BTreeMap<Token, usize>,
    item: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemTrie {
    nodes: Vec<Node>,
    items: usize,
    max_depth: usize,
}

pub const ROOT: usize = 0;

pub fn build_item_trie(catalog: &BTreeMap<String, TokenSequence>) -> Result<ItemTrie> {
    ItemTrie::from_sequences(catalog.iter().map(|(k, s)| (k.as_str(), s.tokens.as_slice())))
}

impl ItemTrie {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = (&'a str, &'a [Token])>) -> Result<Self> {
        let mut trie = ItemTrie {
            nodes: vec![Node::default()],
            items: 0,
            max_depth: 0,
        };
        for (item, tokens) in seqs {
            if tokens.is_empty() {
                return Err(Error::Contract(format!("item {item} has an empty token sequence")));
            }
            let mut node = ROOT;
            for &t in tokens {
                node = match trie.nodes[node].children.get(&t) {
                    Some(&c) => c,
                    None => {
                        trie.nodes.push(Node::default());
                        let c = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(t, c);
                        c
                    }
                };
            }
            if let Some(other) = &trie.nodes[node].item {
                return Err(Error::NotInjective(other.clone(), item.to_string()));
            }
            trie.nodes[node].item = Some(item.to_string());
            trie.items += 1;
            trie.max_depth = trie.max_depth.max(tokens.len());
        }
        Ok(trie)
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    /// Number of catalog items (terminal nodes).
    pub fn item_count(&self) -> usize {
        self.items
    }

    /// Nodes without children.
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty() && n.item.is_some()).count()
    }

    /// Length of the longest item sequence.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (Token, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    pub fn has_children(&self, node: usize) -> bool {
        !self.nodes[node].children.is_empty()
    }

    pub fn item(&self, node: usize) -> Option<&str> {
        self.nodes[node].item.as_deref()
    }

    pub fn walk(&self, tokens: &[Token]) -> Option<usize> {
        tokens
            .iter()
            .try_fold(ROOT, |n, t| self.nodes[n].children.get(t).copied())
    }

    /// The item whose full sequence is `tokens`, if any.
    pub fn lookup(&self, tokens: &[Token]) -> Option<&str> {
        self.walk(tokens).and_then(|n| self.item(n))
    }

    /// Every `(item, sequence)` in token order.
    pub fn sequences(&self) -> Vec<(String, Vec<Token>)> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            if let Some(item) = &self.nodes[n].item {
                out.push((item.clone(), prefix.clone()));
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}
