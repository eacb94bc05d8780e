//! Two-stage retrieval: generative pre-selection of SemId groups, then
//! similarity reranking of the candidates. Also recall evaluation and the
//! latency benchmarks.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelSection;
use crate::corpus::{build_training_pairs, tokenize, CorpusError, QueryRecord, Vocab};
use crate::decode::{beam_search, DecodeError, DecodingTrie, SemIdRanking};
use crate::embed_store::{Embedding, EmbeddingCorpus, ItemRecord, StoreError};
use crate::semtree::{SemId, SemTree, TreeError};
use crate::seq2seq::{train, Checkpoint, CheckpointMeta, ModelConfig, ModelError, PawaModel, TrainConfig};
use crate::vecmath::dot_f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("engine state mismatch: {0}")]
    StateMismatch(String),
    #[error("query embedding has dimension {found}, corpus has {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no ground truth for query {0:?}")]
    MissingGroundTruth(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Items reachable from the pre-selected SemIds.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub semids: SemIdRanking,
    /// Corpus positions, grouped by SemId rank and by item id inside a group.
    pub items: Vec<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids<'a>(&'a self, corpus: &'a EmbeddingCorpus) -> impl Iterator<Item = &'a str> + 'a {
        self.items.iter().map(|&i| corpus.records()[i].item_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// (item id, similarity), best first.
    pub ranked_items: Vec<(String, f32)>,
    pub candidates: CandidateSet,
    pub stage1_time: Duration,
    pub stage2_time: Duration,
    pub total_time: Duration,
}

impl RetrievalResult {
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.ranked_items.iter().position(|(id, _)| id == item_id)
    }
}

/// Second-stage scorer. Implementations return one score per candidate,
/// larger meaning more similar.
pub trait Reranker: Send + Sync {
    fn score(&self, query: &Embedding, corpus: &EmbeddingCorpus, candidates: &[usize]) -> Vec<f32>;
}

/// Cosine similarity over the stored unit representations.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineReranker;

impl Reranker for CosineReranker {
    fn score(&self, query: &Embedding, corpus: &EmbeddingCorpus, candidates: &[usize]) -> Vec<f32> {
        let recs = corpus.records();
        candidates
            .iter()
            .map(|&i| dot_f32(query.values(), recs[i].rep.values()))
            .collect()
    }
}

/// Sorts scored corpus positions best first, ties by item id.
fn rank(corpus: &EmbeddingCorpus, candidates: &[usize], scores: &[f32]) -> Vec<(String, f32)> {
    let recs = corpus.records();
    let mut order: Vec<(usize, f32)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_unstable_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| recs[a.0].item_id.cmp(&recs[b.0].item_id))
    });
    order
        .into_iter()
        .map(|(i, s)| (recs[i].item_id.clone(), s))
        .collect()
}

fn check_dim(query: &Embedding, corpus: &EmbeddingCorpus) -> Result<(), PipelineError> {
    if query.dim() != corpus.dim() {
        return Err(PipelineError::DimMismatch {
            expected: corpus.dim(),
            found: query.dim(),
        });
    }
    Ok(())
}

/// Scores `candidates` against the query with cosine similarity and sorts them.
pub fn rerank(
    query: &Embedding,
    candidates: &CandidateSet,
    corpus: &EmbeddingCorpus,
) -> Result<Vec<(String, f32)>, PipelineError> {
    check_dim(query, corpus)?;
    let scores = CosineReranker.score(query, corpus, &candidates.items);
    Ok(rank(corpus, &candidates.items, &scores))
}

/// Cosine ranking of the whole corpus.
pub fn brute_force(query: &Embedding, corpus: &EmbeddingCorpus) -> Result<Vec<(String, f32)>, PipelineError> {
    check_dim(query, corpus)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let scores = CosineReranker.score(query, corpus, &all);
    Ok(rank(corpus, &all, &scores))
}

/// Everything needed to answer queries: corpus, tree, trie and model built
/// for one truncation depth.
pub struct Engine {
    corpus: EmbeddingCorpus,
    tree: SemTree,
    trie: DecodingTrie,
    /// Corpus positions per SemId, sorted by item id.
    groups: HashMap<SemId, Vec<usize>>,
    model: PawaModel,
    vocab: Vocab,
    m: usize,
    reranker: Box<dyn Reranker>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("items", &self.corpus.len())
            .field("leaves", &self.tree.leaves().count())
            .field("terminals", &self.trie.num_terminals())
            .field("m", &self.m)
            .finish()
    }
}

impl Engine {
    /// Assembles an engine from a checkpoint, refusing one trained for a
    /// different tree or truncation depth.
    pub fn new(corpus: EmbeddingCorpus, tree: SemTree, checkpoint: Checkpoint, m: usize) -> Result<Self, PipelineError> {
        if checkpoint.meta.m != m {
            return Err(PipelineError::StateMismatch(format!(
                "checkpoint was trained with m={}, engine uses m={m}",
                checkpoint.meta.m
            )));
        }
        let fp = tree.fingerprint();
        if checkpoint.meta.tree_fingerprint != fp {
            return Err(PipelineError::StateMismatch(format!(
                "checkpoint tree {} differs from loaded tree {fp}",
                checkpoint.meta.tree_fingerprint
            )));
        }
        Self::from_parts(corpus, tree, checkpoint.model, checkpoint.meta.vocab, m)
    }

    pub fn from_parts(
        corpus: EmbeddingCorpus,
        tree: SemTree,
        model: PawaModel,
        vocab: Vocab,
        m: usize,
    ) -> Result<Self, PipelineError> {
        if tree.num_items() != corpus.len() {
            return Err(PipelineError::StateMismatch(format!(
                "tree indexes {} items, corpus holds {}",
                tree.num_items(),
                corpus.len()
            )));
        }
        let trie = DecodingTrie::build(&tree, m)?;
        if trie.positions_needed() > model.config().max_positions {
            return Err(PipelineError::StateMismatch(format!(
                "model decodes {} positions, tree needs {}",
                model.config().max_positions,
                trie.positions_needed()
            )));
        }
        let mut groups = HashMap::new();
        for (id, members) in tree.groups(m)? {
            let mut pos = Vec::with_capacity(members.len());
            for item in &members {
                let p = corpus.position(item).ok_or_else(|| {
                    PipelineError::StateMismatch(format!("tree item {item:?} missing from corpus"))
                })?;
                pos.push(p);
            }
            groups.insert(id, pos);
        }
        Ok(Self {
            corpus,
            tree,
            trie,
            groups,
            model,
            vocab,
            m,
            reranker: Box::new(CosineReranker),
        })
    }

    pub fn with_reranker(mut self, reranker: Box<dyn Reranker>) -> Self {
        self.reranker = reranker;
        self
    }

    pub fn corpus(&self) -> &EmbeddingCorpus {
        &self.corpus
    }

    pub fn tree(&self) -> &SemTree {
        &self.tree
    }

    pub fn trie(&self) -> &DecodingTrie {
        &self.trie
    }

    pub fn model(&self) -> &PawaModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Corpus positions of the items in a SemId group.
    pub fn group(&self, id: &SemId) -> &[usize] {
        self.groups.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, &self.vocab, self.model.config().max_query_len)
    }

    /// Beam search followed by group expansion.
    pub fn preselect_tokens(&self, tokens: &[u32], top_k: usize, beam_width: usize) -> Result<CandidateSet, PipelineError> {
        let semids = beam_search(&self.model, tokens, &self.trie, beam_width, top_k)?;
        let mut items = Vec::new();
        for id in semids.semids() {
            items.extend_from_slice(self.group(id));
        }
        Ok(CandidateSet { semids, items })
    }

    pub fn preselect(&self, text: &str, top_k: usize, beam_width: usize) -> Result<CandidateSet, PipelineError> {
        self.preselect_tokens(&self.tokenize(text), top_k, beam_width)
    }

    /// Reranks `candidates` with the engine's reranker.
    pub fn rerank(&self, query: &Embedding, candidates: &CandidateSet) -> Result<Vec<(String, f32)>, PipelineError> {
        check_dim(query, &self.corpus)?;
        let scores = self.reranker.score(query, &self.corpus, &candidates.items);
        Ok(rank(&self.corpus, &candidates.items, &scores))
    }

    /// Both stages for one query, timing each. Tokenization counts toward
    /// stage 1.
    pub fn retrieve(
        &self,
        text: &str,
        query: &Embedding,
        top_k: usize,
        beam_width: usize,
    ) -> Result<RetrievalResult, PipelineError> {
        check_dim(query, &self.corpus)?;
        let t0 = Instant::now();
        let candidates = self.preselect(text, top_k, beam_width)?;
        let t1 = Instant::now();
        let ranked_items = self.rerank(query, &candidates)?;
        let t2 = Instant::now();
        Ok(RetrievalResult {
            ranked_items,
            candidates,
            stage1_time: t1 - t0,
            stage2_time: t2 - t1,
            total_time: t2 - t0,
        })
    }

    pub fn brute_force(&self, query: &Embedding) -> Result<Vec<(String, f32)>, PipelineError> {
        check_dim(query, &self.corpus)?;
        let all: Vec<usize> = (0..self.corpus.len()).collect();
        let scores = self.reranker.score(query, &self.corpus, &all);
        Ok(rank(&self.corpus, &all, &scores))
    }

    /// Adds an item to the nearest leaf without retraining. The SemId set,
    /// and therefore the trie and the model, are unchanged.
    pub fn insert(&mut self, record: ItemRecord) -> Result<SemId, PipelineError> {
        if self.corpus.get(&record.item_id).is_some() {
            return Err(TreeError::DuplicateItemId(record.item_id).into());
        }
        if record.rep.dim() != self.corpus.dim() {
            return Err(PipelineError::DimMismatch {
                expected: self.corpus.dim(),
                found: record.rep.dim(),
            });
        }
        let id = self.tree.insert_item(&record, self.m)?;
        let item_id = record.item_id.clone();
        self.corpus.push(record)?;
        let pos = self.corpus.len() - 1;
        let recs = self.corpus.records();
        let group = self.groups.entry(id.clone()).or_default();
        let at = group.partition_point(|&p| recs[p].item_id < item_id);
        group.insert(at, pos);
        Ok(id)
    }
}

/// Builds a vocabulary from `queries`, trains a model on their truncated
/// SemIds and packages it with the state an [`Engine`] checks.
pub fn train_checkpoint(
    tree: &SemTree,
    queries: &[QueryRecord],
    m: usize,
    dims: &ModelSection,
    train_cfg: &TrainConfig,
) -> Result<Checkpoint, PipelineError> {
    let vocab = Vocab::build(queries.iter().map(|q| q.text.as_str()));
    let pairs = build_training_pairs(tree, queries, &vocab, m, dims.max_query_len)?;
    let positions = ModelConfig::positions_for(tree.max_depth(), m);
    let model = PawaModel::new(dims.to_config(vocab.len(), tree.k(), positions))?;
    let outcome = train(model, &pairs.pairs, train_cfg)?;
    Ok(Checkpoint {
        model: outcome.model,
        meta: CheckpointMeta {
            m,
            tree_fingerprint: tree.fingerprint(),
            vocab,
            train_seed: train_cfg.seed,
            loss_history: outcome.loss_history,
        },
    })
}

/// Per-query retrieval output used by [`eval_recall`].
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub query_id: String,
    pub result: RetrievalResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SizeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    /// K -> percentage of queries with the truth in the top K.
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_sum: f64,
    /// Percentage of queries whose truth was in the candidate set.
    pub stage1_hit_rate: f64,
    pub mean_stage1_ms: f64,
    pub mean_stage2_ms: f64,
    pub mean_total_ms: f64,
    pub candidates: SizeStats,
}

pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Recall at each K plus latency and candidate-size statistics.
pub fn eval_recall(
    results: &[QueryResult],
    ground_truth: &BTreeMap<String, String>,
    ks: &[usize],
    corpus: &EmbeddingCorpus,
) -> Result<EvalReport, PipelineError> {
    if results.is_empty() {
        return Err(PipelineError::InvalidArgument("no queries to evaluate".into()));
    }
    let n = results.len() as f64;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut stage1_hits = 0;
    let (mut s1, mut s2, mut tot) = (0.0, 0.0, 0.0);
    let mut sizes = SizeStats {
        min: usize::MAX,
        max: 0,
        mean: 0.0,
    };
    for qr in results {
        let truth = ground_truth
            .get(&qr.query_id)
            .ok_or_else(|| PipelineError::MissingGroundTruth(qr.query_id.clone()))?;
        let r = &qr.result;
        if let Some(rank) = r.rank_of(truth) {
            for (&k, h) in hits.iter_mut() {
                if rank < k {
                    *h += 1;
                }
            }
        }
        if r.candidates.item_ids(corpus).any(|id| id == truth) {
            stage1_hits += 1;
        }
        s1 += ms(r.stage1_time);
        s2 += ms(r.stage2_time);
        tot += ms(r.total_time);
        let c = r.candidates.len();
        sizes.min = sizes.min.min(c);
        sizes.max = sizes.max.max(c);
        sizes.mean += c as f64 / n;
    }
    let recall_at: BTreeMap<usize, f64> = hits.into_iter().map(|(k, h)| (k, 100.0 * h as f64 / n)).collect();
    Ok(EvalReport {
        queries: results.len(),
        recall_sum: recall_at.values().sum(),
        recall_at,
        stage1_hit_rate: 100.0 * stage1_hits as f64 / n,
        mean_stage1_ms: s1 / n,
        mean_stage2_ms: s2 / n,
        mean_total_ms: tot / n,
        candidates: sizes,
    })
}

/// A query with the text for stage 1 and the embedding for stage 2.
#[derive(Debug, Clone)]
pub struct BenchQuery {
    pub text: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub total_ms: f64,
    pub brute_force_ms: f64,
    pub mean_candidates: f64,
}

/// Mean per-query latencies of both stages and of a full cosine scan, for
/// each engine. Rounds are interleaved across engines so slow drifts in
/// machine load hit every size alike. Runs on the calling thread.
pub fn bench_scaling(
    engines: &[&Engine],
    queries: &[BenchQuery],
    top_k: usize,
    beam_width: usize,
    rounds: usize,
) -> Result<Vec<ScalingRow>, PipelineError> {
    if queries.is_empty() || rounds == 0 {
        return Err(PipelineError::InvalidArgument("need at least one query and one round".into()));
    }
    // warm caches and allocator
    for e in engines {
        for q in queries.iter().take(10) {
            e.retrieve(&q.text, &q.embedding, top_k, beam_width)?;
            std::hint::black_box(e.brute_force(&q.embedding)?);
        }
    }
    let mut acc = vec![[0.0f64; 5]; engines.len()];
    for _ in 0..rounds {
        for (e, a) in engines.iter().zip(acc.iter_mut()) {
            // Separate passes, so a full scan does not evict the model
            // from cache right before the next stage 1.
            for q in queries {
                let r = e.retrieve(&q.text, &q.embedding, top_k, beam_width)?;
                a[0] += ms(r.stage1_time);
                a[1] += ms(r.stage2_time);
                a[2] += ms(r.total_time);
                a[4] += r.candidates.len() as f64;
            }
            for q in queries {
                let t = Instant::now();
                std::hint::black_box(e.brute_force(&q.embedding)?);
                a[3] += ms(t.elapsed());
            }
        }
    }
    let n = (rounds * queries.len()) as f64;
    Ok(engines
        .iter()
        .zip(acc)
        .map(|(e, a)| ScalingRow {
            size: e.corpus().len(),
            stage1_ms: a[0] / n,
            stage2_ms: a[1] / n,
            total_ms: a[2] / n,
            brute_force_ms: a[3] / n,
            mean_candidates: a[4] / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub top_k: usize,
    pub report: EvalReport,
}

/// Evaluates every engine (one per truncation depth) at every `top_k` with a
/// fixed beam width, so rankings for smaller `top_k` are prefixes of larger
/// ones.
pub fn sweep(
    engines: &[&Engine],
    queries: &[(String, String, Embedding)],
    ground_truth: &BTreeMap<String, String>,
    top_ks: &[usize],
    beam_width: usize,
) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::new();
    for e in engines {
        for &k in top_ks {
            let results = queries
                .iter()
                .map(|(qid, text, emb)| {
                    Ok(QueryResult {
                        query_id: qid.clone(),
                        result: e.retrieve(text, emb, k, beam_width.max(k))?,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            rows.push(SweepRow {
                m: e.m(),
                top_k: k,
                report: eval_recall(&results, ground_truth, &DEFAULT_RECALL_KS, e.corpus())?,
            });
        }
    }
    Ok(rows)
}

/// Plain-text table with the recall columns and candidate sizes.
pub fn format_report_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>3} {:>5} {:>7} {:>7} {:>7} {:>7} {:>8} {:>10} {:>9}\n",
        "m", "top_k", "R@1", "R@5", "R@10", "R@sum", "stage1%", "cand_mean", "total_ms"
    );
    for r in rows {
        let at = |k| r.report.recall_at.get(&k).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{:>3} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>10.1} {:>9.3}\n",
            r.m,
            r.top_k,
            at(1),
            at(5),
            at(10),
            r.report.recall_sum,
            r.report.stage1_hit_rate,
            r.report.candidates.mean,
            r.report.mean_total_ms
        ));
    }
    out
}
