//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use genindex::config::ModelSection;
use genindex::corpus::{
    synth_corpus, synth_extra_items, QueryRecord, SynthSpec, TrainingPair, Vocab,
};
use genindex::decode::{beam_search, DecodingTrie};
use genindex::embed_store::{EmbeddingCorpus, ItemRecord};
use genindex::pipeline::{
    bench_scaling, eval_recall, train_checkpoint, BenchQuery, Engine, QueryResult, DEFAULT_RECALL_KS,
};
use genindex::semtree::{SemId, SemTree};
use genindex::seq2seq::{ModelConfig, PawaModel, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn tiny_config(vocab: usize, k: usize, d: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        branching: k,
        max_positions: d,
        hidden: 8,
        encoder_layers: 1,
        heads: 2,
        ffn_hidden: 8,
        adaptor_hidden: 4,
        adaptor_heads: 1,
        adaptor_ffn_hidden: 4,
        max_query_len: 8,
        dropout: 0.0,
        init_seed: 0,
    }
}

fn random_model(cfg: ModelConfig, seed: u64, scale: f64) -> PawaModel {
    let mut m = PawaModel::new(cfg).unwrap();
    m.params_mut().randomize(seed, scale);
    m
}

fn random_query(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    let n = rng.random_range(0..6);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

// 1
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 20,
        branching: 3,
        max_positions: 3,
        hidden: 8,
        encoder_layers: 2,
        heads: 2,
        ffn_hidden: 16,
        adaptor_hidden: 4,
        adaptor_heads: 2,
        adaptor_ffn_hidden: 8,
        max_query_len: 8,
        dropout: 0.0,
        init_seed: 1,
    };
    let model = random_model(cfg, 11, 0.4);
    let pair = |q: &[u32], t: &[u32]| TrainingPair {
        query_tokens: q.to_vec(),
        target: SemId::new(t.to_vec()).unwrap(),
    };
    let batch = [
        pair(&[3, 4, 5, 0], &[0, 2, 1]),
        pair(&[8, 1, 19], &[0, 1]),
        pair(&[2], &[0]),
    ];
    let (_, analytic) = model.gradients(&batch).map_err(|e| e.to_string())?;
    let h = 1e-4;
    let mut probe = model.clone();
    let mut worst = (String::new(), 0.0f64);
    let mut zero = 0;
    for spec in model.params().specs.clone() {
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for i in spec.range() {
            let orig = probe.params().data[i];
            probe.params_mut().data[i] = orig + h;
            let up = probe.batch_loss(&batch).unwrap();
            probe.params_mut().data[i] = orig - h;
            let down = probe.batch_loss(&batch).unwrap();
            probe.params_mut().data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            an += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let (diff, denom) = (diff.sqrt(), an.sqrt() + nn.sqrt());
        if denom < 1e-6 {
            // Zero true gradient (unused positions, attention key biases):
            // a relative error is undefined, so bound the absolute one.
            ensure(diff < 1e-8, || format!("{}: absolute error {diff:.2e} on a zero gradient", spec.name))?;
            zero += 1;
            continue;
        }
        let rel = diff / denom;
        if rel > worst.1 {
            worst = (spec.name.clone(), rel);
        }
    }
    ensure(worst.1 < 1e-4, || format!("{}: relative error {:.2e}", worst.0, worst.1))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} tensors, max relative error {:.2e} ({}), {zero} zero-gradient tensors within 1e-8",
        model.params().specs.len(),
        worst.1,
        worst.0
    ))
}

/// All root-anchored paths with up to `depth` branch labels below `k`.
fn all_paths(k: u32, depth: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32]];
    let mut frontier = vec![vec![0u32]];
    for _ in 0..depth {
        let mut next = Vec::new();
        for p in &frontier {
            for l in 0..k {
                let mut q = p.clone();
                q.push(l);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

// 2
fn normalization() -> Outcome {
    let start = Instant::now();
    let (k, depth) = (3usize, 3usize);
    let paths = all_paths(k as u32, depth);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_full = 0.0f64;
    let mut worst_sub = f64::NEG_INFINITY;
    for trial in 0..10 {
        let model = random_model(tiny_config(20, k, depth + 1), trial, 0.8);
        let q = random_query(&mut rng, 20);
        let end = model.config().end_token();
        let lp = |p: &[u32]| {
            let mut s = p.to_vec();
            s.push(end);
            model.sequence_logprob(&q, &s).unwrap()
        };
        let scores: Vec<f64> = paths.iter().map(|p| lp(p)).collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        worst_full = worst_full.max((total - 1.0).abs());
        // a random sub-trie
        let keep: Vec<bool> = (0..paths.len()).map(|_| rng.random_bool(0.4)).collect();
        let sub: f64 = scores.iter().zip(&keep).filter(|(_, &k)| k).map(|(s, _)| s.exp()).sum();
        worst_sub = worst_sub.max(sub);
    }
    ensure(worst_full <= 1e-6, || format!("full sum off by {worst_full:.2e}"))?;
    ensure(worst_sub <= 1.0 + 1e-12, || format!("constrained sum {worst_sub}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!(
        "{} sequences, |sum - 1| <= {worst_full:.1e}, constrained max {worst_sub:.4}",
        paths.len()
    ))
}

fn random_semids(rng: &mut ChaCha8Rng, k: u32, max_branches: usize, count: usize) -> Vec<SemId> {
    let mut set = BTreeSet::new();
    while set.len() < count {
        let len = rng.random_range(0..=max_branches);
        let mut t = vec![0u32];
        t.extend((0..len).map(|_| rng.random_range(0..k)));
        set.insert(t);
    }
    set.into_iter().map(|t| SemId::new(t).unwrap()).collect()
}

/// Scores every terminal by summing the model's per-step log probabilities
/// left to right, then sorts by (score desc, tokens asc).
fn enumerate(model: &PawaModel, q: &[u32], ids: &[SemId]) -> Vec<(Vec<u32>, f64)> {
    let enc = model.encode(q).unwrap();
    let end = model.config().end_token() as usize;
    let mut out: Vec<(Vec<u32>, f64)> = ids
        .iter()
        .map(|id| {
            let t = id.tokens();
            let mut s = 0.0;
            for i in 1..=t.len() {
                let lp = model.step_log_probs(&enc, &t[..i], i).unwrap();
                s += if i < t.len() { lp[t[i] as usize] } else { lp[end] };
            }
            (t.to_vec(), s)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

// 3
fn beam_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for case in 0..100u64 {
        let k = rng.random_range(2..=4u32);
        let possible = (0..=3).map(|d| (k as usize).pow(d)).sum::<usize>();
        let count = rng.random_range(1..=16usize.min(possible));
        let ids = random_semids(&mut rng, k, 3, count);
        let trie = DecodingTrie::from_semids(ids.clone()).unwrap();
        let model = random_model(tiny_config(16, k as usize, trie.positions_needed()), case, 1.0);
        let q = random_query(&mut rng, 16);
        let top_k = rng.random_range(1..=count);
        let beam = count + rng.random_range(0..3);
        let got = beam_search(&model, &q, &trie, beam, top_k).map_err(|e| e.to_string())?;
        let expected = enumerate(&model, &q, &ids);
        let got: Vec<(Vec<u32>, f64)> = got.entries().iter().map(|(id, s)| (id.tokens().to_vec(), *s)).collect();
        ensure(got.len() == top_k, || format!("case {case}: {} results, want {top_k}", got.len()))?;
        for (g, e) in got.iter().zip(&expected) {
            ensure(g.0 == e.0 && g.1.to_bits() == e.1.to_bits(), || {
                format!("case {case}: beam {:?} {} vs oracle {:?} {}", g.0, g.1, e.0, e.1)
            })?;
        }
        checked += 1;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{checked} instances identical to enumeration"))
}

fn clustered_corpus(rng: &mut ChaCha8Rng, n: usize, dim: usize, dup_rate: f64) -> EmbeddingCorpus {
    let centers: Vec<Vec<f32>> = (0..rng.random_range(1..=12)).map(|_| unit(rng, dim)).collect();
    let mut recs: Vec<ItemRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let rep = if !recs.is_empty() && rng.random_bool(dup_rate) {
            recs[rng.random_range(0..recs.len())].rep.values().to_vec()
        } else {
            let c = &centers[rng.random_range(0..centers.len())];
            let noise = unit(rng, dim);
            let s = rng.random_range(0.05..0.6f32);
            c.iter().zip(&noise).map(|(a, b)| a + s * b).collect()
        };
        recs.push(ItemRecord::from_rep(format!("it{i:05}"), rep).unwrap());
    }
    EmbeddingCorpus::from_records(dim, recs).unwrap()
}

// 4
fn decode_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut decodes = 0;
    let mut emitted = 0;
    for t in 0..10u64 {
        let dim = rng.random_range(3..=12);
        let n = rng.random_range(20..=300);
        let corpus = clustered_corpus(&mut rng, n, dim, 0.05);
        let k = rng.random_range(2..=5);
        let c = rng.random_range(2..=20);
        let tree = SemTree::build(&corpus, k, c, t).map_err(|e| e.to_string())?;
        let m = rng.random_range(0..=tree.min_leaf_depth().min(1));
        let groups = tree.groups(m).map_err(|e| e.to_string())?;
        let trie = DecodingTrie::build(&tree, m).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let model = random_model(
                tiny_config(12, k, ModelConfig::positions_for(tree.max_depth(), m)),
                rng.random(),
                rng.random_range(0.1..2.0),
            );
            let top_k = rng.random_range(1..=8);
            let beam = top_k + rng.random_range(0..4);
            let q = random_query(&mut rng, 12);
            let r = beam_search(&model, &q, &trie, beam, top_k).map_err(|e| e.to_string())?;
            for id in r.semids() {
                ensure(trie.contains_terminal(id) && groups.contains_key(id), || {
                    format!("tree {t}: emitted {id}, not an indexed identifier")
                })?;
                emitted += 1;
            }
            decodes += 1;
        }
    }
    Ok(format!("{decodes} decodes, {emitted} identifiers, all valid"))
}

// 5
fn tree_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut largest = 0;
    let mut stagnated = 0;
    for t in 0..50u64 {
        let n = if t % 10 == 0 { 5000 } else { rng.random_range(1..=5000) };
        let dim = rng.random_range(2..=16);
        let dup_rate = rng.random_range(0.0..0.3);
        let mut corpus = clustered_corpus(&mut rng, n, dim, dup_rate);
        if t % 5 == 0 && n > 1 {
            // a block of identical vectors larger than any leaf
            let rep = corpus.records()[0].rep.values().to_vec();
            for j in 0..60 {
                corpus.push(ItemRecord::from_rep(format!("dup{j:03}"), rep.clone()).unwrap()).unwrap();
            }
        }
        let k = rng.random_range(2..=8);
        let c = rng.random_range(1..=50);
        let seed = rng.random();
        let tree = SemTree::build(&corpus, k, c, seed).map_err(|e| e.to_string())?;

        let mut seen = BTreeSet::new();
        let mut total = 0;
        for leaf in tree.leaves() {
            total += leaf.members.len();
            for m in &leaf.members {
                ensure(seen.insert(m.clone()), || format!("corpus {t}: {m} in two leaves"))?;
            }
            if leaf.stagnated {
                stagnated += 1;
            } else {
                ensure(leaf.members.len() <= c, || {
                    format!("corpus {t}: leaf {} holds {} > c={c}", leaf.node_id, leaf.members.len())
                })?;
            }
        }
        let all: BTreeSet<String> = corpus.records().iter().map(|r| r.item_id.clone()).collect();
        ensure(total == corpus.len() && seen == all, || format!("corpus {t}: leaves do not cover the corpus"))?;

        let bytes = tree.to_bytes();
        let back = SemTree::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back == tree && back.to_bytes() == bytes, || format!("corpus {t}: serialization differs"))?;
        let again = SemTree::build(&corpus, k, c, seed).map_err(|e| e.to_string())?;
        ensure(again.to_bytes() == bytes, || format!("corpus {t}: same seed, different tree"))?;
        largest = largest.max(corpus.len());
    }
    Ok(format!("50 corpora up to {largest} items, {stagnated} stagnated leaves"))
}

fn toy_model() -> ModelSection {
    ModelSection {
        hidden: 32,
        encoder_layers: 1,
        heads: 4,
        ffn_hidden: 64,
        adaptor_hidden: 16,
        adaptor_heads: 2,
        adaptor_ffn_hidden: 32,
        max_query_len: 16,
        ..ModelSection::default()
    }
}

fn split_queries(queries: &[QueryRecord], holdout: usize, seed: u64) -> (Vec<QueryRecord>, Vec<QueryRecord>) {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: BTreeSet<usize> = order[..holdout].iter().copied().collect();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, q) in queries.iter().enumerate() {
        if test.contains(&i) {
            te.push(q.clone());
        } else {
            tr.push(q.clone());
        }
    }
    (tr, te)
}

// 6
fn memorization() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        clusters: 16,
        items_per_cluster: 40,
        queries_per_item: 10,
        dim: 32,
        seed: 6,
    };
    let s = synth_corpus(&spec).map_err(|e| e.to_string())?;
    let (train_q, test_q) = split_queries(&s.queries, 100, 6);
    let tree = SemTree::build(&s.corpus, 16, 40, 6).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 200,
        seed: 6,
        parallel: false,
        ..TrainConfig::default()
    };
    let ck = train_checkpoint(&tree, &train_q, 0, &toy_model(), &tc).map_err(|e| e.to_string())?;
    let engine = Engine::new(s.corpus.clone(), tree.clone(), ck, 0).map_err(|e| e.to_string())?;

    let mut reproduced = 0;
    for q in &train_q {
        let target = engine.model().target_sequence(&tree.assign_semid(&q.item_id, 0).unwrap());
        if engine.model().greedy_decode(&engine.tokenize(&q.text)).unwrap() == target {
            reproduced += 1;
        }
    }
    let mem = 100.0 * reproduced as f64 / train_q.len() as f64;
    let mut hits = 0;
    for q in &test_q {
        let c = engine.preselect(&q.text, 11, 22).map_err(|e| e.to_string())?;
        if c.item_ids(engine.corpus()).any(|id| id == q.item_id) {
            hits += 1;
        }
    }
    let hit = 100.0 * hits as f64 / test_q.len() as f64;
    ensure(mem >= 99.0, || format!("memorization {mem:.2}%"))?;
    ensure(hit >= 95.0, || format!("held-out stage-1 hit rate {hit:.1}%"))?;
    within(start, Duration::from_secs(15 * 60))?;
    Ok(format!(
        "memorization {mem:.2}% of {} pairs, held-out top-11 hit rate {hit:.1}% ({} leaves, {:.0}s)",
        train_q.len(),
        tree.leaves().count(),
        start.elapsed().as_secs_f64()
    ))
}

// 7
fn scaling() -> Outcome {
    let spec = SynthSpec {
        clusters: 16,
        items_per_cluster: 62,
        queries_per_item: 2,
        dim: 512,
        seed: 7,
    };
    let s = synth_corpus(&spec).map_err(|e| e.to_string())?;
    let tree = SemTree::build(&s.corpus, 16, 80, 7).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 5,
        seed: 7,
        ..TrainConfig::default()
    };
    let ck = train_checkpoint(&tree, &s.queries, 0, &toy_model(), &tc).map_err(|e| e.to_string())?;
    let extra = synth_extra_items(&spec, 564).map_err(|e| e.to_string())?;
    let mut engine = Engine::new(s.corpus.clone(), tree, ck, 0).map_err(|e| e.to_string())?;
    let mut next = extra.records().iter();
    let mut engines = Vec::new();
    for size in [1000, 3000, 5000, 10000] {
        while engine.corpus().len() < size {
            engine.insert(next.next().unwrap().clone()).map_err(|e| e.to_string())?;
        }
        engines.push(
            Engine::from_parts(
                engine.corpus().clone(),
                engine.tree().clone(),
                engine.model().clone(),
                engine.vocab().clone(),
                0,
            )
            .map_err(|e| e.to_string())?,
        );
    }
    let queries: Vec<BenchQuery> = s
        .queries
        .iter()
        .zip(s.query_embeddings.records())
        .step_by(19)
        .take(100)
        .map(|(q, e)| BenchQuery {
            text: q.text.clone(),
            embedding: e.rep.clone(),
        })
        .collect();
    let refs: Vec<&Engine> = engines.iter().collect();
    let rows = bench_scaling(&refs, &queries, 1, 2, 10).map_err(|e| e.to_string())?;
    let (small, large) = (&rows[0], &rows[3]);
    let stage1_ratio = large.stage1_ms / small.stage1_ms;
    let bf_ratio = large.brute_force_ms / small.brute_force_ms;
    let speedup = large.total_ms / large.brute_force_ms;
    let table = rows
        .iter()
        .map(|r| format!("{}:{:.3}/{:.3}/{:.3}ms", r.size, r.stage1_ms, r.total_ms, r.brute_force_ms))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(stage1_ratio <= 1.2, || format!("stage-1 grew {stage1_ratio:.2}x ({table})"))?;
    ensure(bf_ratio >= 5.0, || format!("brute force grew only {bf_ratio:.2}x ({table})"))?;
    ensure(speedup <= 0.5, || format!("two-stage at 10k is {speedup:.2} of brute force ({table})"))?;
    Ok(format!(
        "stage1 x{stage1_ratio:.2}, brute force x{bf_ratio:.1}, two-stage/brute at 10k {speedup:.2} [stage1/two-stage/brute {table}]"
    ))
}

/// Recall at each K computed straight from a ranked id list.
fn recall_of(rankings: &[(String, Vec<String>)], gt: &BTreeMap<String, String>, k: usize) -> f64 {
    let hits = rankings
        .iter()
        .filter(|(qid, r)| r.iter().take(k).any(|id| *id == gt[qid]))
        .count();
    100.0 * hits as f64 / rankings.len() as f64
}

// 8
fn degenerate_equivalence() -> Outcome {
    for set in 0..20u64 {
        let spec = SynthSpec {
            clusters: 4 + (set as usize % 4),
            items_per_cluster: 12,
            queries_per_item: 1,
            dim: 16,
            seed: 800 + set,
        };
        let s = synth_corpus(&spec).map_err(|e| e.to_string())?;
        let tree = SemTree::build(&s.corpus, 3, 8, set).map_err(|e| e.to_string())?;
        let vocab = Vocab::build(s.queries.iter().map(|q| q.text.as_str()));
        let d = ModelConfig::positions_for(tree.max_depth(), 0);
        let model = random_model(tiny_config(vocab.len(), 3, d), set, 0.5);
        let e = Engine::from_parts(s.corpus.clone(), tree, model, vocab, 0).map_err(|e| e.to_string())?;
        let all = e.trie().num_terminals();
        let mut results = Vec::new();
        let mut brute = Vec::new();
        for (q, emb) in s.queries.iter().zip(s.query_embeddings.records()) {
            let qid = emb.item_id.clone();
            let r = e.retrieve(&q.text, &emb.rep, all, all).map_err(|e| e.to_string())?;
            let bf: Vec<String> = e.brute_force(&emb.rep).map_err(|e| e.to_string())?.into_iter().map(|x| x.0).collect();
            brute.push((qid.clone(), bf));
            results.push(QueryResult { query_id: qid, result: r });
        }
        let report = eval_recall(&results, &s.ground_truth, &DEFAULT_RECALL_KS, e.corpus()).map_err(|e| e.to_string())?;
        for k in DEFAULT_RECALL_KS {
            let bf = recall_of(&brute, &s.ground_truth, k);
            ensure(report.recall_at[&k] == bf, || {
                format!("set {set}: two-stage R@{k} {} vs brute force {bf}", report.recall_at[&k])
            })?;
        }
    }
    Ok("20 query sets, R@1/5/10 identical".into())
}

fn oracle_leaf(tree: &SemTree, rep: &[f32]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for n in tree.nodes() {
        if n.is_leaf() {
            let s = cos64(n.centroid.values(), rep);
            if s > best.1 || (s == best.1 && n.node_id < best.0) {
                best = (n.node_id, s);
            }
        }
    }
    best.0
}

/// Copies the centroid of the first leaf onto the last one so the two tie
/// for every query.
fn tree_with_tied_leaves(tree: &SemTree) -> (SemTree, Vec<f32>) {
    let mut doc: serde_json::Value = serde_json::from_slice(&tree.to_bytes()).unwrap();
    let leaves: Vec<usize> = tree.leaves().map(|n| n.node_id).collect();
    let (first, last) = (leaves[0], *leaves.last().unwrap());
    let nodes = doc["nodes"].as_array_mut().unwrap();
    let c = nodes[first]["centroid"].clone();
    nodes[last]["centroid"] = c;
    let tied = SemTree::from_bytes(&serde_json::to_vec(&doc).unwrap()).unwrap();
    let rep = tied.node(first).centroid.values().to_vec();
    (tied, rep)
}

// 9
fn insertion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut agreed = 0;
    let mut ties = 0;
    for t in 0..5u64 {
        let dim = rng.random_range(4..=16);
        let corpus = clustered_corpus(&mut rng, 400, dim, 0.0);
        let built = SemTree::build(&corpus, rng.random_range(2..=6), rng.random_range(5..=30), t).map_err(|e| e.to_string())?;
        let (mut tree, tie_rep) = if t % 2 == 0 {
            tree_with_tied_leaves(&built)
        } else {
            (built, Vec::new())
        };
        for j in 0..100 {
            let rep = if !tie_rep.is_empty() && j % 4 == 0 {
                ties += 1;
                tie_rep.clone()
            } else if j % 5 == 1 {
                corpus.records()[rng.random_range(0..corpus.len())].rep.values().to_vec()
            } else {
                unit(&mut rng, dim)
            };
            let rec = ItemRecord::from_rep(format!("new{t}-{j:03}"), rep).map_err(|e| e.to_string())?;
            let expected = oracle_leaf(&tree, rec.rep.values());
            let id = tree.insert_item(&rec, 0).map_err(|e| e.to_string())?;
            let leaf = tree.leaf_of(&rec.item_id).unwrap();
            ensure(leaf == expected && id == *tree.path(expected), || {
                format!("tree {t} insert {j}: leaf {leaf}, oracle {expected}")
            })?;
            agreed += 1;
        }
    }
    Ok(format!("{agreed}/500 inserts match the linear scan ({ties} exact ties)"))
}

fn run(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// 10
fn sweep_cli() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_genindex");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name);
    let config = "[model]\nhidden = 16\nencoder_layers = 1\nheads = 2\nffn_hidden = 32\n\
                  adaptor_hidden = 8\nadaptor_heads = 2\nadaptor_ffn_hidden = 16\nmax_query_len = 16\n";
    std::fs::write(p("config.toml"), config).map_err(|e| e.to_string())?;
    let cli = || {
        let mut c = Command::new(bin);
        c.arg("--config").arg(p("config.toml"));
        c
    };
    run(cli().args(["synth", "--clusters", "8", "--items-per-cluster", "20", "--queries-per-item", "3"])
        .args(["--dim", "16", "--seed", "10", "--out-dir"])
        .arg(d))?;
    run(cli().args(["build-tree", "--k", "4", "--c", "10", "--seed", "10", "--corpus"])
        .arg(p("corpus.bin"))
        .arg("--out")
        .arg(p("tree.json")))?;
    for m in 0..3 {
        run(cli().args(["train", "--epochs", "8", "--seed", "10", "--m", &m.to_string(), "--tree"])
            .arg(p("tree.json"))
            .arg("--pairs")
            .arg(p("queries.jsonl"))
            .arg("--out")
            .arg(p(&format!("m{m}.ckpt"))))?;
    }
    let mut eval = cli();
    eval.args(["eval", "--topk-range", "1..15", "--tree"]).arg(p("tree.json"));
    for m in 0..3 {
        eval.arg("--ckpt").arg(p(&format!("m{m}.ckpt")));
    }
    let table = run(eval
        .arg("--corpus")
        .arg(p("corpus.bin"))
        .arg("--queries")
        .arg(p("queries.jsonl"))
        .arg("--query-emb")
        .arg(p("query_emb.jsonl"))
        .arg("--json")
        .arg(p("sweep.json")))?;
    ensure(table.lines().count() == 1 + 3 * 15, || format!("unexpected table:\n{table}"))?;
    let rows: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(p("sweep.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut size: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for r in &rows {
        size.insert(
            (r["m"].as_u64().unwrap(), r["top_k"].as_u64().unwrap()),
            r["report"]["candidates"]["mean"].as_f64().unwrap(),
        );
    }
    ensure(size.len() == 45, || format!("{} rows", size.len()))?;
    for m in 0..3 {
        for k in 2..=15 {
            ensure(size[&(m, k)] >= size[&(m, k - 1)], || format!("m={m}: size drops from top_k {} to {k}", k - 1))?;
        }
    }
    for k in 1..=15 {
        for m in 1..3 {
            ensure(size[&(m, k)] >= size[&(m - 1, k)], || format!("top_k={k}: size drops from m={} to {m}", m - 1))?;
        }
    }
    Ok(format!(
        "45 rows; mean candidates at top_k 1/15: m0 {:.1}/{:.1}, m1 {:.1}/{:.1}, m2 {:.1}/{:.1}",
        size[&(0, 1)],
        size[&(0, 15)],
        size[&(1, 1)],
        size[&(1, 15)],
        size[&(2, 1)],
        size[&(2, 15)]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_check),
        ("probability normalization", normalization),
        ("beam search equals exhaustive ranking", beam_oracle),
        ("constrained decoding validity", decode_validity),
        ("tree invariants", tree_invariants),
        ("memorization and stage-1 recall", memorization),
        ("two-stage vs brute-force scaling", scaling),
        ("degenerate equivalence", degenerate_equivalence),
        ("insertion oracle", insertion_oracle),
        ("parameter sweep CLI", sweep_cli),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
