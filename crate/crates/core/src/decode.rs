//! Trie-constrained beam search over SemIds.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::seq2seq::{ModelError, PawaModel};
use crate::semtree::{SemId, SemTree, TreeError};

/// Number of SemIds kept per query unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 11;

/// Beam width used when only `top_k` is given.
pub fn default_beam_width(top_k: usize) -> usize {
    2 * top_k
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("the trie has no terminal path")]
    EmptyTrie,
    #[error("beam width {beam} must be at least top_k {top_k}, and top_k at least 1")]
    InvalidBeam { beam: usize, top_k: usize },
    #[error("trie needs {needed} decoding positions but the model has {available}")]
    ModelMismatch { needed: usize, available: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TrieNode {
    /// (label, child index), sorted by label.
    children: Vec<(u32, usize)>,
    terminal: bool,
}

/// Prefix tree of the valid (truncated) SemIds. Node 0 is the root path `[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodingTrie {
    nodes: Vec<TrieNode>,
    terminals: usize,
    max_branches: usize,
    max_label: Option<u32>,
}

impl DecodingTrie {
    /// Trie over every SemId that at least one item of `tree` maps to at
    /// truncation `m`.
    pub fn build(tree: &SemTree, m: usize) -> Result<Self, DecodeError> {
        let groups = tree.groups(m)?;
        Self::from_semids(groups.into_iter().filter(|(_, g)| !g.is_empty()).map(|(id, _)| id))
    }

    pub fn from_semids(ids: impl IntoIterator<Item = SemId>) -> Result<Self, DecodeError> {
        let mut trie = DecodingTrie {
            nodes: vec![TrieNode::default()],
            terminals: 0,
            max_branches: 0,
            max_label: None,
        };
        for id in ids {
            let mut cur = 0;
            for &label in id.branches() {
                cur = match trie.child(cur, label) {
                    Some(c) => c,
                    None => {
                        let next = trie.nodes.len();
                        trie.nodes.push(TrieNode::default());
                        let kids = &mut trie.nodes[cur].children;
                        let at = kids.partition_point(|&(l, _)| l < label);
                        kids.insert(at, (label, next));
                        next
                    }
                };
                trie.max_label = trie.max_label.max(Some(label));
            }
            if !trie.nodes[cur].terminal {
                trie.nodes[cur].terminal = true;
                trie.terminals += 1;
            }
            trie.max_branches = trie.max_branches.max(id.branches().len());
        }
        if trie.terminals == 0 {
            return Err(DecodeError::EmptyTrie);
        }
        Ok(trie)
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn child(&self, node: usize, label: u32) -> Option<usize> {
        let kids = &self.nodes[node].children;
        kids.binary_search_by_key(&label, |&(l, _)| l).ok().map(|i| kids[i].1)
    }

    /// Branch labels that may follow `node`, ascending.
    pub fn children(&self, node: usize) -> &[(u32, usize)] {
        &self.nodes[node].children
    }

    /// Whether END may follow `node`.
    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    /// Trie node reached by a full token path (starting with the root symbol).
    pub fn lookup(&self, tokens: &[u32]) -> Option<usize> {
        let (&first, rest) = tokens.split_first()?;
        if first != 0 {
            return None;
        }
        rest.iter().try_fold(0, |n, &l| self.child(n, l))
    }

    pub fn contains_terminal(&self, id: &SemId) -> bool {
        self.lookup(id.tokens()).is_some_and(|n| self.is_terminal(n))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_terminals(&self) -> usize {
        self.terminals
    }

    /// Longest terminal path, counted in branch labels.
    pub fn max_branches(&self) -> usize {
        self.max_branches
    }

    /// Decoding positions needed to emit the longest path and its END.
    pub fn positions_needed(&self) -> usize {
        self.max_branches + 1
    }

    /// Every terminal SemId in lexicographic order.
    pub fn terminals(&self) -> Vec<SemId> {
        let mut out = Vec::with_capacity(self.terminals);
        let mut stack = vec![(0usize, vec![0u32])];
        while let Some((node, path)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(SemId::new(path.clone()).expect("starts at root"));
            }
            for &(l, c) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(l);
                stack.push((c, p));
            }
        }
        out
    }
}

pub fn build_trie(tree: &SemTree, m: usize) -> Result<DecodingTrie, DecodeError> {
    DecodingTrie::build(tree, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub trie_node: usize,
}

/// Higher score first, then lexicographically smaller tokens.
fn rank_order(a_lp: f64, a: &[u32], b_lp: f64, b: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a.cmp(b))
}

/// SemIds with their sequence log-probabilities, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemIdRanking {
    entries: Vec<(SemId, f64)>,
}

impl SemIdRanking {
    /// Sorts `entries` into ranking order.
    pub fn new(mut entries: Vec<(SemId, f64)>) -> Self {
        entries.sort_by(|a, b| rank_order(a.1, a.0.tokens(), b.1, b.0.tokens()));
        Self { entries }
    }

    pub fn entries(&self) -> &[(SemId, f64)] {
        &self.entries
    }

    pub fn semids(&self) -> impl Iterator<Item = &SemId> {
        self.entries.iter().map(|e| &e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
    }
}

impl fmt::Display for SemIdRanking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, lp) in &self.entries {
            writeln!(f, "{id}\t{lp:.6}")?;
        }
        Ok(())
    }
}

fn check_model(model: &PawaModel, trie: &DecodingTrie) -> Result<(), DecodeError> {
    let cfg = model.config();
    if trie.positions_needed() > cfg.max_positions {
        return Err(DecodeError::ModelMismatch {
            needed: trie.positions_needed(),
            available: cfg.max_positions,
        });
    }
    if trie.max_label.is_some_and(|l| l as usize >= cfg.branching) {
        return Err(ModelError::InvalidSemId("trie label exceeds the model's branching".into()).into());
    }
    Ok(())
}

/// Length-unnormalized beam search restricted to trie paths.
///
/// Each step extends the live hypotheses by every allowed label and keeps the
/// `beam_width` best. Ending a hypothesis (when its node is terminal) moves it
/// to the result pool instead of taking a beam slot. The `top_k` best pool
/// entries are returned.
pub fn beam_search(
    model: &PawaModel,
    query_tokens: &[u32],
    trie: &DecodingTrie,
    beam_width: usize,
    top_k: usize,
) -> Result<SemIdRanking, DecodeError> {
    if top_k == 0 || beam_width < top_k {
        return Err(DecodeError::InvalidBeam {
            beam: beam_width,
            top_k,
        });
    }
    if trie.num_terminals() == 0 {
        return Err(DecodeError::EmptyTrie);
    }
    check_model(model, trie)?;
    let end = model.config().end_token() as usize;
    let enc = model.encode(query_tokens)?;

    let mut live = vec![BeamHypothesis {
        tokens: vec![0],
        logprob: 0.0,
        trie_node: trie.root(),
    }];
    let mut pool: Vec<(SemId, f64)> = Vec::new();
    let mut position = 1;
    while !live.is_empty() {
        let mut next = Vec::new();
        for hyp in &live {
            let lp = model.step_log_probs(&enc, &hyp.tokens, position)?;
            if trie.is_terminal(hyp.trie_node) {
                let id = SemId::new(hyp.tokens.clone()).expect("starts at root");
                pool.push((id, hyp.logprob + lp[end]));
            }
            for &(label, child) in trie.children(hyp.trie_node) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(label);
                next.push(BeamHypothesis {
                    tokens,
                    logprob: hyp.logprob + lp[label as usize],
                    trie_node: child,
                });
            }
        }
        next.sort_by(|a, b| rank_order(a.logprob, &a.tokens, b.logprob, &b.tokens));
        next.truncate(beam_width);
        live = next;
        position += 1;
    }
    let mut ranking = SemIdRanking::new(pool);
    ranking.truncate(top_k);
    Ok(ranking)
}

/// Scores every terminal path of the trie. Exponential in nothing but the
/// trie size; meant as a reference for small tries.
pub fn exhaustive_ranking(
    model: &PawaModel,
    query_tokens: &[u32],
    trie: &DecodingTrie,
) -> Result<SemIdRanking, DecodeError> {
    check_model(model, trie)?;
    let end = model.config().end_token();
    let mut entries = Vec::new();
    for id in trie.terminals() {
        let mut seq = id.tokens().to_vec();
        seq.push(end);
        entries.push((id, model.sequence_logprob(query_tokens, &seq)?));
    }
    Ok(SemIdRanking::new(entries))
}
