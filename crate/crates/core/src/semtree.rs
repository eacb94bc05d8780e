//! The hierarchical semantic tree and the path identifiers derived from it.
//!
//! Items are split recursively with spherical k-means until every node holds
//! at most `c` items. An item's [`SemId`] is the list of branch labels from
//! the root to its leaf, prefixed with the root symbol `0`. Dropping the last
//! `m` labels (truncation) merges sibling subtrees into one coarser group.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed_store::{Embedding, EmbeddingCorpus, ItemRecord, UNIT_TOLERANCE};

/// Branching factor used by default.
pub const DEFAULT_K: usize = 30;
/// Leaf capacity used by default.
pub const DEFAULT_C: usize = 30;

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-9;
/// Independent k-means++ restarts per split; the best objective wins.
pub const KMEANS_RESTARTS: u64 = 3;

const TREE_FORMAT_VERSION: u32 = 1;
/// Subtrees at least this large are built on the rayon pool.
const PARALLEL_SPLIT_MIN: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("no input points")]
    EmptyInput,
    #[error("input point {0} is not unit-normalized")]
    NonUnitInput(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("truncation length {m} is too deep for a leaf at depth {depth}")]
    TruncationTooDeep { m: usize, depth: usize },
    #[error("item {0:?} is already indexed")]
    DuplicateItemId(String),
    #[error("corrupt tree: {0}")]
    CorruptTree(String),
}

/// A root-to-node path of branch labels. The first token is always the root
/// symbol `0`; it is rendered dash-joined, e.g. `0-9-21`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SemId(Vec<u32>);

impl SemId {
    pub fn root() -> Self {
        SemId(vec![0])
    }

    pub fn new(tokens: Vec<u32>) -> Result<Self, String> {
        match tokens.first() {
            Some(0) => Ok(SemId(tokens)),
            Some(t) => Err(format!("SemId must start with the root symbol 0, found {t}")),
            None => Err("SemId must contain at least the root symbol".to_string()),
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; a SemId holds at least the root symbol.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Branch labels after the root symbol.
    pub fn branches(&self) -> &[u32] {
        &self.0[1..]
    }

    pub fn child(&self, label: u32) -> Self {
        let mut t = self.0.clone();
        t.push(label);
        SemId(t)
    }

    pub fn truncated(&self, m: usize) -> Option<Self> {
        (m < self.0.len()).then(|| SemId(self.0[..self.0.len() - m].to_vec()))
    }

    pub fn is_valid_for(&self, k: usize) -> bool {
        self.0[0] == 0 && self.0[1..].iter().all(|&t| (t as usize) < k)
    }
}

impl fmt::Display for SemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for SemId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = s
            .split('-')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad SemId {s:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        SemId::new(tokens)
    }
}

impl TryFrom<String> for SemId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SemId> for String {
    fn from(id: SemId) -> Self {
        id.to_string()
    }
}

/// Output of [`spherical_kmeans`]. Every returned cluster is nonempty.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Embedding>,
}

impl KMeans {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }
}

/// 64-bit mixer (splitmix64 finalizer).
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the split at a node, derived from the build seed and the node's
/// path so that sibling subtrees can be built in any order.
pub fn node_seed(build_seed: u64, path: &[u32]) -> u64 {
    path.iter()
        .fold(mix64(build_seed), |h, &t| mix64(h ^ (t as u64 + 1)))
}

/// Half the squared Euclidean distance; equals `1 - cos` on unit vectors and
/// is exactly zero for identical points.
fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

fn argmax_cos(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = crate::vecmath::dot_f64(p, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn normalize_f64(v: &mut [f64]) -> bool {
    let n = crate::vecmath::norm_f64(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Greedy k-means++ seeding under cosine distance.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| half_sq_dist(p, &points[first]))
        .collect();
    while centroids.len() < k {
        let potential: f64 = dist.iter().sum();
        if potential <= 0.0 {
            break;
        }
        let Ok(weights) = WeightedIndex::new(&dist) else {
            break;
        };
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weights.sample(rng);
            let new_dist: Vec<f64> = points
                .iter()
                .zip(&dist)
                .map(|(p, &d)| d.min(half_sq_dist(p, &points[cand])))
                .collect();
            let pot: f64 = new_dist.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| pot < *b) {
                best = Some((pot, cand, new_dist));
            }
        }
        let (_, cand, new_dist) = best.expect("at least one trial");
        centroids.push(points[cand].clone());
        dist = new_dist;
    }
    centroids
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    objective: f64,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> LloydRun {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    let mut sims = vec![0f64; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let (j, s) = argmax_cos(p, &centroids);
            assignments[i] = j;
            sims[i] = s;
            counts[j] += 1;
        }
        // Empty cluster repair: hand each empty cluster the point farthest
        // from its centroid, taken from a cluster that can spare it.
        for empty in 0..k {
            if counts[empty] != 0 {
                continue;
            }
            let mut pick: Option<usize> = None;
            for i in 0..n {
                if counts[assignments[i]] > 1 && pick.is_none_or(|p| sims[i] < sims[p]) {
                    pick = Some(i);
                }
            }
            let Some(i) = pick else { break };
            counts[assignments[i]] -= 1;
            assignments[i] = empty;
            counts[empty] = 1;
            sims[i] = 1.0;
        }
        let mut sums = vec![vec![0f64; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            crate::vecmath::axpy(1.0, p, &mut sums[a]);
        }
        let mut movement = 0f64;
        for (j, mut s) in sums.into_iter().enumerate() {
            if counts[j] == 0 || !normalize_f64(&mut s) {
                continue;
            }
            let shift = 1.0 - crate::vecmath::dot_f64(&s, &centroids[j]);
            movement = movement.max(shift);
            centroids[j] = s;
        }
        if movement < KMEANS_TOLERANCE {
            break;
        }
    }
    let mut objective = 0f64;
    for (i, p) in points.iter().enumerate() {
        let (j, s) = argmax_cos(p, &centroids);
        assignments[i] = j;
        objective += s;
    }
    LloydRun {
        assignments,
        centroids,
        objective,
    }
}

/// Spherical k-means: cosine assignments, centroids renormalized onto the
/// unit sphere every iteration.
///
/// Deterministic for a fixed `(points order, k, seed)`. When the input has
/// fewer than `k` distinct points, at most that many clusters come back.
/// Clusters left empty by the final assignment are dropped, so indices in
/// `assignments` always refer to nonempty clusters.
pub fn spherical_kmeans<P: AsRef<[f32]>>(
    points: &[P],
    k: usize,
    seed: u64,
) -> Result<KMeans, TreeError> {
    let first = points.first().ok_or(TreeError::EmptyInput)?;
    if k == 0 {
        return Err(TreeError::InvalidParameter("k must be at least 1".into()));
    }
    let dim = first.as_ref().len();
    let mut pts = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(TreeError::DimMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        let v: Vec<f64> = p.iter().map(|&x| x as f64).collect();
        let norm = crate::vecmath::norm_f64(&v);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(TreeError::NonUnitInput(i));
        }
        pts.push(v);
    }
    let distinct: HashSet<Vec<u32>> = points
        .iter()
        .map(|p| p.as_ref().iter().map(|x| x.to_bits()).collect())
        .collect();
    let k_eff = k.min(distinct.len());

    let restarts = if k_eff > 1 { KMEANS_RESTARTS } else { 1 };
    let mut best: Option<LloydRun> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(r)));
        let init = seed_centroids(&pts, k_eff, &mut rng);
        let run = lloyd(&pts, init);
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    // Compact away clusters that ended up empty.
    let mut remap = vec![usize::MAX; run.centroids.len()];
    let mut centroids = Vec::new();
    for &a in &run.assignments {
        if remap[a] == usize::MAX {
            remap[a] = 0;
        }
    }
    for (j, c) in run.centroids.into_iter().enumerate() {
        if remap[j] != usize::MAX {
            remap[j] = centroids.len();
            centroids.push(Embedding::normalized(c.into_iter().map(|x| x as f32).collect()).map_err(
                |_| TreeError::CorruptTree("centroid lost normalization".into()),
            )?);
        }
    }
    Ok(KMeans {
        assignments: run.assignments.into_iter().map(|a| remap[a]).collect(),
        centroids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemTreeNode {
    pub node_id: usize,
    pub depth: usize,
    pub centroid: Embedding,
    pub children: Vec<usize>,
    pub members: Vec<String>,
    /// Set when a split put every member into one cluster; the node is then
    /// kept as a leaf even though it holds more than `c` items.
    pub stagnated: bool,
}

impl SemTreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SemTree {
    k: usize,
    c: usize,
    build_seed: u64,
    nodes: Vec<SemTreeNode>,
    leaf_of: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    paths: Vec<SemId>,
}

impl PartialEq for SemTree {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.c == other.c
            && self.build_seed == other.build_seed
            && self.nodes == other.nodes
    }
}

enum Subtree {
    Leaf {
        centroid: Embedding,
        members: Vec<usize>,
        stagnated: bool,
    },
    Inner {
        centroid: Embedding,
        children: Vec<Subtree>,
    },
}

fn mean_direction(records: &[ItemRecord], members: &[usize]) -> Embedding {
    let dim = records[members[0]].rep.dim();
    let mut sum = vec![0f64; dim];
    for &i in members {
        for (s, &v) in sum.iter_mut().zip(records[i].rep.values()) {
            *s += v as f64;
        }
    }
    if !normalize_f64(&mut sum) {
        // Members cancel out exactly; fall back to the first member.
        return records[members[0]].rep.clone();
    }
    Embedding::new(sum.into_iter().map(|x| x as f32).collect())
        .expect("normalized mean is finite")
}

struct BuildCtx<'a> {
    records: &'a [ItemRecord],
    k: usize,
    c: usize,
    seed: u64,
}

impl BuildCtx<'_> {
    fn build(&self, members: Vec<usize>, path: &SemId) -> Result<Subtree, TreeError> {
        let centroid = mean_direction(self.records, &members);
        if members.len() <= self.c {
            return Ok(Subtree::Leaf {
                centroid,
                members,
                stagnated: false,
            });
        }
        let reps: Vec<&[f32]> = members
            .iter()
            .map(|&i| self.records[i].rep.values())
            .collect();
        let km = spherical_kmeans(&reps, self.k, node_seed(self.seed, path.tokens()))?;
        if km.num_clusters() <= 1 {
            return Ok(Subtree::Leaf {
                centroid,
                members,
                stagnated: true,
            });
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); km.num_clusters()];
        for (&m, &a) in members.iter().zip(&km.assignments) {
            groups[a].push(m);
        }
        // Branch order: larger groups first, ties by smallest member id.
        let key = |g: &Vec<usize>| {
            g.iter()
                .map(|&i| self.records[i].item_id.as_str())
                .min()
                .unwrap_or("")
                .to_string()
        };
        let mut keyed: Vec<(usize, String, Vec<usize>)> =
            groups.into_iter().map(|g| (g.len(), key(&g), g)).collect();
        keyed.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let jobs: Vec<(SemId, Vec<usize>)> = keyed
            .into_iter()
            .enumerate()
            .map(|(label, (_, _, g))| (path.child(label as u32), g))
            .collect();
        let children = if members.len() >= PARALLEL_SPLIT_MIN {
            jobs.into_par_iter()
                .map(|(p, g)| self.build(g, &p))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            jobs.into_iter()
                .map(|(p, g)| self.build(g, &p))
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(Subtree::Inner { centroid, children })
    }
}

fn flatten(
    sub: Subtree,
    depth: usize,
    records: &[ItemRecord],
    nodes: &mut Vec<SemTreeNode>,
) -> usize {
    let id = nodes.len();
    match sub {
        Subtree::Leaf {
            centroid,
            members,
            stagnated,
        } => {
            let mut members: Vec<String> =
                members.into_iter().map(|i| records[i].item_id.clone()).collect();
            members.sort();
            nodes.push(SemTreeNode {
                node_id: id,
                depth,
                centroid,
                children: Vec::new(),
                members,
                stagnated,
            });
        }
        Subtree::Inner { centroid, children } => {
            nodes.push(SemTreeNode {
                node_id: id,
                depth,
                centroid,
                children: Vec::new(),
                members: Vec::new(),
                stagnated: false,
            });
            let ids: Vec<usize> = children
                .into_iter()
                .map(|ch| flatten(ch, depth + 1, records, nodes))
                .collect();
            nodes[id].children = ids;
        }
    }
    id
}

#[derive(Serialize, Deserialize)]
struct TreeDocument {
    version: u32,
    k: usize,
    c: usize,
    build_seed: u64,
    nodes: Vec<SemTreeNode>,
}

impl SemTree {
    /// Recursively splits the corpus until every leaf holds at most `c` items.
    pub fn build(corpus: &EmbeddingCorpus, k: usize, c: usize, seed: u64) -> Result<Self, TreeError> {
        if corpus.is_empty() {
            return Err(TreeError::EmptyInput);
        }
        if k < 2 {
            return Err(TreeError::InvalidParameter("k must be at least 2".into()));
        }
        if c < 1 {
            return Err(TreeError::InvalidParameter("c must be at least 1".into()));
        }
        let ctx = BuildCtx {
            records: corpus.records(),
            k,
            c,
            seed,
        };
        let root = ctx.build((0..corpus.len()).collect(), &SemId::root())?;
        let mut nodes = Vec::new();
        flatten(root, 0, corpus.records(), &mut nodes);
        Self::from_nodes(k, c, seed, nodes)
    }

    fn from_nodes(k: usize, c: usize, build_seed: u64, nodes: Vec<SemTreeNode>) -> Result<Self, TreeError> {
        let corrupt = |msg: String| TreeError::CorruptTree(msg);
        if nodes.is_empty() {
            return Err(corrupt("no nodes".into()));
        }
        if k < 2 || c < 1 {
            return Err(corrupt(format!("invalid parameters k={k}, c={c}")));
        }
        let n = nodes.len();
        let dim = nodes[0].centroid.dim();
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut paths: Vec<Option<SemId>> = vec![None; n];
        let mut leaf_of = HashMap::new();
        paths[0] = Some(SemId::root());
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(corrupt(format!("node at position {i} has id {}", node.node_id)));
            }
            if node.centroid.dim() != dim || !node.centroid.is_unit() {
                return Err(corrupt(format!("node {i} has an invalid centroid")));
            }
            if node.children.len() > k {
                return Err(corrupt(format!("node {i} has more than k children")));
            }
            if node.is_leaf() == node.members.is_empty() {
                return Err(corrupt(format!("node {i}: leaf status disagrees with membership")));
            }
            if node.stagnated && !node.is_leaf() {
                return Err(corrupt(format!("inner node {i} flagged as stagnated")));
            }
            for (label, &ch) in node.children.iter().enumerate() {
                if ch <= i || ch >= n || parent[ch].is_some() {
                    return Err(corrupt(format!("node {i} has invalid child {ch}")));
                }
                parent[ch] = Some(i);
                if nodes[ch].depth != node.depth + 1 {
                    return Err(corrupt(format!("node {ch} has inconsistent depth")));
                }
                let p = paths[i]
                    .as_ref()
                    .ok_or_else(|| corrupt(format!("node {i} is unreachable")))?;
                paths[ch] = Some(p.child(label as u32));
            }
            for m in &node.members {
                if m.is_empty() || leaf_of.insert(m.clone(), i).is_some() {
                    return Err(corrupt(format!("item {m:?} is invalid or appears twice")));
                }
            }
        }
        if nodes[0].depth != 0 {
            return Err(corrupt("root depth is not zero".into()));
        }
        let paths = paths
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| corrupt(format!("node {i} is unreachable"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            k,
            c,
            build_seed,
            nodes,
            leaf_of,
            parent,
            paths,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[SemTreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &SemTreeNode {
        &self.nodes[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parent[id]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &SemTreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn num_items(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn max_depth(&self) -> usize {
        self.leaves().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn min_leaf_depth(&self) -> usize {
        self.leaves().map(|n| n.depth).min().unwrap_or(0)
    }

    pub fn leaf_of(&self, item_id: &str) -> Option<usize> {
        self.leaf_of.get(item_id).copied()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.leaf_of.contains_key(item_id)
    }

    /// Full (untruncated) path of a node.
    pub fn path(&self, node_id: usize) -> &SemId {
        &self.paths[node_id]
    }

    /// Truncated identifier of an item: its leaf path minus the last `m` labels.
    pub fn assign_semid(&self, item_id: &str, m: usize) -> Result<SemId, TreeError> {
        let leaf = self
            .leaf_of(item_id)
            .ok_or_else(|| TreeError::UnknownItem(item_id.to_string()))?;
        self.leaf_semid(leaf, m)
    }

    pub fn leaf_semid(&self, leaf: usize, m: usize) -> Result<SemId, TreeError> {
        self.paths[leaf].truncated(m).ok_or(TreeError::TruncationTooDeep {
            m,
            depth: self.nodes[leaf].depth,
        })
    }

    /// Every distinct truncated identifier with the items it covers, members
    /// sorted by id.
    pub fn groups(&self, m: usize) -> Result<BTreeMap<SemId, Vec<String>>, TreeError> {
        let mut out: BTreeMap<SemId, Vec<String>> = BTreeMap::new();
        for leaf in self.leaves() {
            let id = self.leaf_semid(leaf.node_id, m)?;
            out.entry(id).or_default().extend(leaf.members.iter().cloned());
        }
        for members in out.values_mut() {
            members.sort();
        }
        Ok(out)
    }

    /// Adds an unseen item to the leaf whose centroid is most similar to its
    /// representation (ties to the lowest node id). Centroids are left as is.
    pub fn insert_item(&mut self, record: &ItemRecord, m: usize) -> Result<SemId, TreeError> {
        if self.leaf_of.contains_key(&record.item_id) {
            return Err(TreeError::DuplicateItemId(record.item_id.clone()));
        }
        let leaf = self.nearest_leaf(&record.rep)?;
        let id = self.leaf_semid(leaf, m)?;
        let members = &mut self.nodes[leaf].members;
        let pos = members.partition_point(|x| x < &record.item_id);
        members.insert(pos, record.item_id.clone());
        self.leaf_of.insert(record.item_id.clone(), leaf);
        Ok(id)
    }

    pub fn nearest_leaf(&self, rep: &Embedding) -> Result<usize, TreeError> {
        let dim = self.nodes[0].centroid.dim();
        if rep.dim() != dim {
            return Err(TreeError::DimMismatch {
                expected: dim,
                found: rep.dim(),
            });
        }
        if !rep.is_unit() {
            return Err(TreeError::NonUnitInput(0));
        }
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for leaf in self.leaves() {
            let s = crate::vecmath::cosine_unit(leaf.centroid.values(), rep.values());
            if s > best.1 {
                best = (leaf.node_id, s);
            }
        }
        Ok(best.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let doc = TreeDocument {
            version: TREE_FORMAT_VERSION,
            k: self.k,
            c: self.c,
            build_seed: self.build_seed,
            nodes: self.nodes.clone(),
        };
        serde_json::to_vec(&doc).expect("tree serialization cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TreeError> {
        let doc: TreeDocument =
            serde_json::from_slice(bytes).map_err(|e| TreeError::CorruptTree(e.to_string()))?;
        if doc.version != TREE_FORMAT_VERSION {
            return Err(TreeError::CorruptTree(format!("unsupported version {}", doc.version)));
        }
        Self::from_nodes(doc.k, doc.c, doc.build_seed, doc.nodes)
    }

    /// Hash over parameters, node layout and centroids. Membership is left
    /// out so inserting items keeps a tree compatible with models trained on it.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update((self.c as u64).to_le_bytes());
        h.update(self.build_seed.to_le_bytes());
        for n in &self.nodes {
            h.update((n.node_id as u64).to_le_bytes());
            h.update((n.depth as u64).to_le_bytes());
            h.update((n.children.len() as u64).to_le_bytes());
            for &ch in &n.children {
                h.update((ch as u64).to_le_bytes());
            }
            for v in n.centroid.values() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Leaves holding more than `c` items without the stagnation flag.
    pub fn capacity_violations(&self) -> Vec<usize> {
        self.leaves()
            .filter(|n| !n.stagnated && n.members.len() > self.c)
            .map(|n| n.node_id)
            .collect()
    }
}

pub fn build_tree(corpus: &EmbeddingCorpus, k: usize, c: usize, seed: u64) -> Result<SemTree, TreeError> {
    SemTree::build(corpus, k, c, seed)
}

pub fn assign_semid(tree: &SemTree, item_id: &str, m: usize) -> Result<SemId, TreeError> {
    tree.assign_semid(item_id, m)
}

pub fn insert_item(tree: &mut SemTree, record: &ItemRecord, m: usize) -> Result<SemId, TreeError> {
    tree.insert_item(record, m)
}

pub fn serialize_tree(tree: &SemTree) -> Vec<u8> {
    tree.to_bytes()
}

pub fn deserialize_tree(bytes: &[u8]) -> Result<SemTree, TreeError> {
    SemTree::from_bytes(bytes)
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        self.values()
    }
}
