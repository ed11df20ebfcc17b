//! Word-level text transformer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CtdnError, Result};
use crate::nn::params::{small_uniform, xavier, ParamId, ParamStore};
use crate::nn::vit::BlockParams;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub embed_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            max_len: 12,
            embed_dim: 64,
        }
    }
}

/// Lower-case whitespace tokens; a trailing `.` is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let w = w.to_lowercase();
        if let Some(stem) = w.strip_suffix('.') {
            if !stem.is_empty() {
                out.push(stem.to_string());
            }
            out.push(".".to_string());
        } else {
            out.push(w);
        }
    }
    out
}

/// Fixed word list; id 0 is reserved for unknown words and never produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl WordVocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        set.sort();
        set.dedup();
        let mut words = vec!["<unk>".to_string()];
        words.extend(set);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        WordVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .into_iter()
            .map(|w| {
                self.index
                    .get(&w)
                    .copied()
                    .ok_or_else(|| CtdnError::UnknownPhrase(w.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextTransformer {
    pub cfg: TextConfig,
    pub vocab: WordVocab,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    ln_final: (ParamId, ParamId),
    proj: (ParamId, ParamId),
}

impl TextTransformer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: TextConfig,
        vocab: WordVocab,
    ) -> Self {
        let embed = store.add(
            format!("{prefix}.token_embed"),
            small_uniform(rng, vocab.len(), cfg.dim, 0.5),
        );
        let pos = store.add(
            format!("{prefix}.pos_embed"),
            small_uniform(rng, cfg.max_len, cfg.dim, 0.1),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::new(
                    store,
                    rng,
                    &format!("{prefix}.block{i}"),
                    cfg.dim,
                    cfg.heads,
                    4,
                )
            })
            .collect();
        let ln_final = (
            store.add(
                format!("{prefix}.ln_final.weight"),
                Mat::full(1, cfg.dim, 1.0),
            ),
            store.add(format!("{prefix}.ln_final.bias"), Mat::zeros(1, cfg.dim)),
        );
        let proj = (
            store.add(
                format!("{prefix}.proj.weight"),
                xavier(rng, cfg.dim, cfg.embed_dim),
            ),
            store.add(format!("{prefix}.proj.bias"), Mat::zeros(1, cfg.embed_dim)),
        );
        TextTransformer {
            cfg,
            vocab,
            embed,
            pos,
            blocks,
            ln_final,
            proj,
        }
    }

    /// Encodes token sequences into one `embed_dim` row each (mean-pooled
    /// final tokens through the projection).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for s in seqs {
            if s.is_empty() || s.len() > self.cfg.max_len {
                return Err(CtdnError::OutOfRange(format!(
                    "text length {} not in 1..={}",
                    s.len(),
                    self.cfg.max_len
                )));
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        if seqs.is_empty() {
            return Ok(g.constant(Mat::zeros(0, self.cfg.embed_dim)));
        }
        let table = store.var(g, self.embed);
        let tok = g.gather_rows(table, &ids);
        let pos_table = store.var(g, self.pos);
        let pos = g.gather_rows(pos_table, &positions);
        let mut x = g.add(tok, pos);
        for b in &self.blocks {
            x = b.forward(g, store, x, &segments).0;
        }
        let w = store.var(g, self.ln_final.0);
        let bb = store.var(g, self.ln_final.1);
        let x = g.layer_norm(x, w, bb, 1e-5);
        let groups: Vec<Vec<usize>> = segments
            .iter()
            .map(|&(s, l)| (s..s + l).collect())
            .collect();
        let pooled = g.group_mean(x, &groups);
        let w = store.var(g, self.proj.0);
        let b = store.var(g, self.proj.1);
        Ok(g.linear(pooled, w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_period() {
        assert_eq!(
            tokenize("an egocentric origami my hand."),
            vec!["an", "egocentric", "origami", "my", "hand", "."]
        );
    }

    #[test]
    fn unknown_word_reported() {
        let v = WordVocab::from_texts(["a table"]);
        match v.encode("a chair") {
            Err(CtdnError::UnknownPhrase(w)) => assert_eq!(w, "chair"),
            other => panic!("{other:?}"),
        }
    }
}
