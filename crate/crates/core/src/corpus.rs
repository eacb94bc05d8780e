//! Query text: tokenization, query files, training pairs, and a synthetic
//! corpus generator for desk-scale experiments.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_store::{EmbeddingCorpus, ItemRecord, StoreError};
use crate::semtree::{SemId, SemTree, TreeError};

pub const DEFAULT_MAX_QUERY_LEN: usize = 64;
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("no query references an indexed item")]
    NoValidPairs,
    #[error("cannot place {g} clusters at least 60 degrees apart in {dim} dimensions")]
    InfeasibleSeparation { g: usize, dim: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    Original,
    Expansion,
}

/// Which query sources take part in training or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryFilter {
    Original,
    Expansion,
    #[default]
    All,
}

impl QueryFilter {
    pub fn admits(self, source: QuerySource) -> bool {
        match self {
            QueryFilter::All => true,
            QueryFilter::Original => source == QuerySource::Original,
            QueryFilter::Expansion => source == QuerySource::Expansion,
        }
    }
}

impl FromStr for QueryFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Self::Original),
            "expansion" => Ok(Self::Expansion),
            "all" => Ok(Self::All),
            other => Err(format!("unknown query filter {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Optional stable id; used to look up the query's embedding for reranking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub item_id: String,
    pub text: String,
    pub source: QuerySource,
}

impl QueryRecord {
    /// The explicit id, or `q{index}` for queries without one.
    pub fn id_or_index(&self, index: usize) -> String {
        self.query_id
            .clone()
            .unwrap_or_else(|| format!("q{index}"))
    }
}

/// Lowercased words: maximal runs of alphanumeric characters. Whitespace
/// and punctuation only separate words.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word-level vocabulary. Id 0 is padding and id 1 the unknown word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from(vec!["<pad>".to_string(), "<unk>".to_string()])
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Collects every word of `texts` in first-appearance order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocab::default();
        for text in texts {
            for w in words(text) {
                vocab.add(w);
            }
        }
        vocab
    }

    pub fn from_tokens(tokens: &[(&str, u32)]) -> Self {
        let mut v = Vocab::default();
        let mut sorted: Vec<_> = tokens.to_vec();
        sorted.sort_by_key(|t| t.1);
        for (t, id) in sorted {
            assert_eq!(id as usize, v.tokens.len(), "token ids must be dense from 2");
            v.add(t.to_string());
        }
        v
    }

    fn add(&mut self, word: String) -> u32 {
        if let Some(&id) = self.index.get(&word) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(word.clone(), id);
        self.tokens.push(word);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect()
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, CorpusError> {
    parse_queries(BufReader::new(File::open(path)?))
}

pub fn parse_queries(reader: impl BufRead) -> Result<Vec<QueryRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::ParseError { line: i + 1, msg };
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(err("query text is empty".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_queries(queries: &[QueryRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for q in queries {
        serde_json::to_writer(&mut w, q).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_tokens: Vec<u32>,
    pub target: SemId,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    /// Queries dropped because their item is not in the tree.
    pub skipped: usize,
}

/// Binds every query to the truncated identifier of its item, in input order.
pub fn build_training_pairs(
    tree: &SemTree,
    queries: &[QueryRecord],
    vocab: &Vocab,
    m: usize,
    max_query_len: usize,
) -> Result<PairSet, CorpusError> {
    let mut pairs = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in queries {
        if !tree.contains(&q.item_id) {
            skipped += 1;
            continue;
        }
        pairs.push(TrainingPair {
            query_tokens: tokenize(&q.text, vocab, max_query_len),
            target: tree.assign_semid(&q.item_id, m)?,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} queries whose items are not indexed");
    }
    if pairs.is_empty() {
        return Err(CorpusError::NoValidPairs);
    }
    Ok(PairSet { pairs, skipped })
}

/// Parameters of [`synth_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub queries_per_item: usize,
    pub dim: usize,
    pub seed: u64,
}

pub const SYNTH_ITEM_NOISE: f32 = 0.05;
pub const SYNTH_QUERY_NOISE: f32 = 0.03;
/// Cluster mean directions are at least this far apart (cos 60°).
pub const SYNTH_MAX_CENTER_COS: f64 = 0.5;
const SYNTH_CENTER_ATTEMPTS: usize = 20_000;

const TEMPLATES: &[&str] = &[
    "a {c} clip showing {i}",
    "{i} in a {c} scene",
    "find the {c} video with {i}",
    "show me {i} from {c}",
    "{c} footage featuring {i}",
    "video of {i} related to {c}",
    "someone watches {i} during {c}",
    "{i} appears while {c} happens",
    "short {c} recording of {i}",
    "people talk about {i} and {c}",
    "the {c} part where {i} is visible",
    "{i} close up {c} moment",
];

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: EmbeddingCorpus,
    pub queries: Vec<QueryRecord>,
    /// Query embeddings keyed by query id, for the reranking stage.
    pub query_embeddings: EmbeddingCorpus,
    /// query id -> item id
    pub ground_truth: BTreeMap<String, String>,
    /// Generating cluster of each corpus record, in corpus order.
    pub labels: Vec<usize>,
}

pub fn cluster_keyword(g: usize) -> String {
    format!("topic{g}")
}

pub fn item_keyword(g: usize, j: usize) -> String {
    format!("obj{g}x{j}")
}

pub fn synth_item_id(g: usize, j: usize) -> String {
    format!("g{g:03}-{j:05}")
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::vecmath::norm_f64(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Well-separated unit cluster centers, drawn by rejection sampling.
pub fn synth_centers(g: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(g);
    while centers.len() < g {
        let mut placed = false;
        for _ in 0..SYNTH_CENTER_ATTEMPTS {
            let c = gaussian_unit(&mut rng, dim);
            if centers
                .iter()
                .all(|o| crate::vecmath::dot_f64(o, &c) <= SYNTH_MAX_CENTER_COS)
            {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CorpusError::InfeasibleSeparation { g, dim });
        }
    }
    Ok(centers)
}

fn noisy_unit(rng: &mut ChaCha8Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    center
        .iter()
        .map(|&x| x + sigma * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Item for cluster `g`, index `j`, drawn around `center`. Items beyond the
/// base corpus (for scaling experiments) come from the same generator.
pub fn synth_item(center: &[f64], g: usize, j: usize, seed: u64) -> Result<ItemRecord, StoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((g as u64) << 40) ^ (j as u64).wrapping_mul(0x9E37_79B9));
    let c: Vec<f32> = center.iter().map(|&x| x as f32).collect();
    ItemRecord::from_rep(synth_item_id(g, j), noisy_unit(&mut rng, &c, SYNTH_ITEM_NOISE))
}

/// Generates `g` separated clusters of items with templated text queries.
///
/// Each query mentions its cluster keyword and its item keyword. The first
/// query of every item is tagged original, the rest expansion.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    let SynthSpec {
        clusters: g,
        items_per_cluster: n_per,
        queries_per_item: q_per,
        dim,
        seed,
    } = *spec;
    if g == 0 || n_per == 0 || q_per == 0 || dim == 0 {
        return Err(CorpusError::InvalidParameter("all counts must be at least 1".into()));
    }
    let centers = synth_centers(g, dim, seed)?;
    let mut corpus = EmbeddingCorpus::new(dim)?;
    let mut query_embeddings = EmbeddingCorpus::new(dim)?;
    let mut labels = Vec::with_capacity(g * n_per);
    let mut queries = Vec::with_capacity(g * n_per * q_per);
    let mut ground_truth = BTreeMap::new();
    let mut qrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5151_5151));
    for (gi, center) in centers.iter().enumerate() {
        for j in 0..n_per {
            let item = synth_item(center, gi, j, seed)?;
            for qi in 0..q_per {
                let qid = format!("q{:07}", queries.len());
                let template = TEMPLATES[qrng.random_range(0..TEMPLATES.len())];
                let text = template
                    .replace("{c}", &cluster_keyword(gi))
                    .replace("{i}", &item_keyword(gi, j));
                let qv = noisy_unit(&mut qrng, item.rep.values(), SYNTH_QUERY_NOISE);
                query_embeddings.push(ItemRecord::from_rep(qid.clone(), qv)?)?;
                ground_truth.insert(qid.clone(), item.item_id.clone());
                queries.push(QueryRecord {
                    query_id: Some(qid),
                    item_id: item.item_id.clone(),
                    text,
                    source: if qi == 0 {
                        QuerySource::Original
                    } else {
                        QuerySource::Expansion
                    },
                });
            }
            corpus.push(item)?;
            labels.push(gi);
        }
    }
    Ok(SynthCorpus {
        corpus,
        queries,
        query_embeddings,
        ground_truth,
        labels,
    })
}

/// Items `items_per_cluster..items_per_cluster + extra` of every cluster of
/// `spec`, interleaved across clusters so any prefix stays balanced.
pub fn synth_extra_items(spec: &SynthSpec, extra: usize) -> Result<EmbeddingCorpus, CorpusError> {
    let centers = synth_centers(spec.clusters, spec.dim, spec.seed)?;
    let mut out = EmbeddingCorpus::new(spec.dim)?;
    for j in spec.items_per_cluster..spec.items_per_cluster + extra {
        for (g, center) in centers.iter().enumerate() {
            out.push(synth_item(center, g, j, spec.seed)?)?;
        }
    }
    Ok(out)
}
