use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use genindex::config::Config;
use genindex::corpus::{
    load_queries, save_queries, synth_corpus, synth_extra_items, tokenize, QueryFilter, QueryRecord, SynthSpec,
};
use genindex::decode::{beam_search, DecodingTrie};
use genindex::embed_store::{CorpusFormat, Embedding, EmbeddingCorpus};
use genindex::pipeline::{
    bench_scaling, format_report_table, sweep, train_checkpoint, BenchQuery, Engine, SweepRow,
};
use genindex::semtree::SemTree;
use genindex::seq2seq::Checkpoint;

#[derive(Parser)]
#[command(name = "genindex", version, about = "Generative tree index for embedding retrieval")]
struct Cli {
    /// TOML file with tree, retrieval, model and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic clustered corpus with templated queries.
    Synth(SynthArgs),
    /// Cluster a corpus into a semantic tree.
    BuildTree(BuildTreeArgs),
    /// Print the SemId of every indexed item.
    AssignIds(AssignArgs),
    /// Train the identifier generator on a query file.
    Train(TrainArgs),
    /// Print the top SemIds for a query.
    Decode(DecodeArgs),
    /// Two-stage retrieval for one query.
    Retrieve(RetrieveArgs),
    /// Recall and latency over a query file, optionally sweeping top-k and checkpoints.
    Eval(EvalArgs),
    /// Latency of both stages and of a full scan as the corpus grows.
    BenchScaling(BenchArgs),
    /// Add items to an existing tree without retraining.
    Insert(InsertArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 40)]
    items_per_cluster: usize,
    #[arg(long, default_value_t = 10)]
    queries_per_item: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Queries held out of the training file.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Extra items per cluster written to extra.bin for scaling runs.
    #[arg(long, default_value_t = 0)]
    extra_per_cluster: usize,
}

#[derive(Args)]
struct CorpusArg {
    /// Item embeddings (.jsonl for the line format, anything else binary).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct BuildTreeArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    /// Only this item.
    #[arg(long)]
    item: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Query file (`item_id`, `text`) whose items define the targets.
    #[arg(long, alias = "pairs")]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Which query sources to train on.
    #[arg(long = "queries-filter", default_value = "all")]
    filter: QueryFilter,
    /// Spread each batch over all cores (same result as sequential).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    query: String,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    query: String,
    /// Line-format file of query embeddings keyed by query id.
    #[arg(long)]
    query_emb: PathBuf,
    #[arg(long)]
    query_id: String,
    /// Number of ranked items printed.
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// One checkpoint per truncation depth; each is evaluated at its own m.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_emb: PathBuf,
    #[arg(long = "queries-filter", default_value = "all")]
    filter: QueryFilter,
    #[arg(long)]
    topk: Option<usize>,
    /// Inclusive range such as 1..15; overrides --topk.
    #[arg(long)]
    topk_range: Option<String>,
    /// Fixed beam width; defaults to twice the largest top-k.
    #[arg(long)]
    beam: Option<usize>,
    /// Write the reports as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    /// Items inserted, in order, to reach the larger sizes.
    #[arg(long)]
    extra: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1000,3000,5000,10000")]
    sizes: Vec<usize>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_emb: PathBuf,
    /// Queries used per round.
    #[arg(long, default_value_t = 100)]
    num_queries: usize,
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InsertArgs {
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    /// Items to insert (same formats as --corpus).
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    out_tree: PathBuf,
    #[arg(long)]
    out_corpus: PathBuf,
}

fn load_store(path: &Path) -> Result<EmbeddingCorpus> {
    EmbeddingCorpus::load(path, CorpusFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn load_tree(path: &Path) -> Result<SemTree> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SemTree::from_bytes(&bytes)?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn query_embedding(store: &EmbeddingCorpus, qid: &str) -> Result<Embedding> {
    Ok(store
        .get(qid)
        .with_context(|| format!("no embedding for query {qid:?}"))?
        .rep
        .clone())
}

fn parse_range(s: &str) -> Result<Vec<usize>> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("expected a range like 1..15, got {s:?}"))?;
    let a: usize = a.trim().parse()?;
    let b: usize = b.trim_start_matches('=').trim().parse()?;
    if a == 0 || b < a {
        bail!("empty or zero-based range {s:?}");
    }
    Ok((a..=b).collect())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        clusters: args.clusters,
        items_per_cluster: args.items_per_cluster,
        queries_per_item: args.queries_per_item,
        dim: args.dim,
        seed: args.seed,
    };
    let s = synth_corpus(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    s.corpus.save(dir.join("corpus.bin"), CorpusFormat::Binary)?;
    s.query_embeddings.save(dir.join("query_emb.jsonl"), CorpusFormat::Lines)?;
    save_queries(&s.queries, dir.join("queries.jsonl"))?;
    if args.holdout > s.queries.len() {
        bail!("holdout {} exceeds {} queries", args.holdout, s.queries.len());
    }
    let mut order: Vec<usize> = (0..s.queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(args.seed ^ 0x0d0e));
    let mut is_test = vec![false; s.queries.len()];
    for &i in &order[..args.holdout] {
        is_test[i] = true;
    }
    let (mut train_q, mut test_q) = (Vec::new(), Vec::new());
    for (q, &t) in s.queries.iter().zip(&is_test) {
        if t { test_q.push(q.clone()) } else { train_q.push(q.clone()) }
    }
    save_queries(&train_q, dir.join("train_queries.jsonl"))?;
    save_queries(&test_q, dir.join("test_queries.jsonl"))?;
    if args.extra_per_cluster > 0 {
        synth_extra_items(&spec, args.extra_per_cluster)?.save(dir.join("extra.bin"), CorpusFormat::Binary)?;
    }
    println!(
        "wrote {} items, {} queries ({} train, {} test) to {}",
        s.corpus.len(),
        s.queries.len(),
        train_q.len(),
        test_q.len(),
        dir.display()
    );
    Ok(())
}

fn build_tree(cfg: &Config, args: BuildTreeArgs) -> Result<()> {
    let corpus = load_store(&args.corpus.corpus)?;
    let k = args.k.unwrap_or(cfg.tree.k);
    let c = args.c.unwrap_or(cfg.tree.c);
    let seed = args.seed.unwrap_or(cfg.tree.seed);
    let tree = SemTree::build(&corpus, k, c, seed)?;
    fs::write(&args.out, tree.to_bytes())?;
    println!(
        "{} items, {} leaves, depth {}..={}, fingerprint {}",
        tree.num_items(),
        tree.leaves().count(),
        tree.min_leaf_depth(),
        tree.max_depth(),
        tree.fingerprint()
    );
    let over = tree.capacity_violations();
    if !over.is_empty() {
        log::warn!("{} leaves exceed c={c} because their items could not be split", over.len());
    }
    Ok(())
}

fn assign_ids(cfg: &Config, args: AssignArgs) -> Result<()> {
    let tree = load_tree(&args.tree)?;
    let m = args.m.unwrap_or(cfg.retrieval.m);
    match args.item {
        Some(item) => println!("{item}\t{}", tree.assign_semid(&item, m)?),
        None => {
            let mut out = io::stdout().lock();
            for (id, members) in tree.groups(m)? {
                for item in members {
                    writeln!(out, "{item}\t{id}")?;
                }
            }
        }
    }
    Ok(())
}

fn train_cmd(cfg: &Config, args: TrainArgs) -> Result<()> {
    let tree = load_tree(&args.tree)?;
    let m = args.m.unwrap_or(cfg.retrieval.m);
    let queries: Vec<QueryRecord> = load_queries(&args.queries)?
        .into_iter()
        .filter(|q| args.filter.admits(q.source))
        .collect();
    let mut tc = cfg.train.clone();
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    tc.parallel |= args.parallel;
    let ck = train_checkpoint(&tree, &queries, m, &cfg.model, &tc)?;
    ck.save(&args.out)?;
    let last = ck.meta.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} parameters on {} queries for {} epochs, final loss {last:.6}",
        ck.model.num_params(),
        queries.len(),
        tc.epochs
    );
    Ok(())
}

fn decode(cfg: &Config, args: DecodeArgs) -> Result<()> {
    let tree = load_tree(&args.tree)?;
    let ck = load_ckpt(&args.ckpt)?;
    let m = args.m.unwrap_or(ck.meta.m);
    if m != ck.meta.m {
        bail!("checkpoint was trained with m={}, not {m}", ck.meta.m);
    }
    let trie = DecodingTrie::build(&tree, m)?;
    let top_k = args.search.topk.unwrap_or(cfg.retrieval.top_k);
    let beam = args.search.beam.unwrap_or(2 * top_k);
    let tokens = tokenize(&args.query, &ck.meta.vocab, ck.model.config().max_query_len);
    print!("{}", beam_search(&ck.model, &tokens, &trie, beam, top_k)?);
    Ok(())
}

fn engine(ckpt: &Path, tree: &Path, corpus: &Path) -> Result<Engine> {
    let ck = load_ckpt(ckpt)?;
    let m = ck.meta.m;
    Ok(Engine::new(load_store(corpus)?, load_tree(tree)?, ck, m)?)
}

fn retrieve(cfg: &Config, args: RetrieveArgs) -> Result<()> {
    let e = engine(&args.ckpt, &args.tree, &args.corpus.corpus)?;
    let store = load_store(&args.query_emb)?;
    let q = query_embedding(&store, &args.query_id)?;
    let top_k = args.search.topk.unwrap_or(cfg.retrieval.top_k);
    let beam = args.search.beam.unwrap_or(2 * top_k);
    let r = e.retrieve(&args.query, &q, top_k, beam)?;
    for (i, (item, s)) in r.ranked_items.iter().take(args.limit).enumerate() {
        println!("{}\t{item}\t{s:.6}", i + 1);
    }
    println!(
        "# candidates {} from {} SemIds, stage1 {:.3} ms, stage2 {:.3} ms",
        r.candidates.len(),
        r.candidates.semids.len(),
        r.stage1_time.as_secs_f64() * 1e3,
        r.stage2_time.as_secs_f64() * 1e3
    );
    Ok(())
}

fn eval_queries(path: &Path, emb: &Path, filter: QueryFilter) -> Result<(Vec<(String, String, Embedding)>, BTreeMap<String, String>)> {
    let store = load_store(emb)?;
    let mut qs = Vec::new();
    let mut gt = BTreeMap::new();
    for (i, q) in load_queries(path)?.into_iter().enumerate() {
        if !filter.admits(q.source) {
            continue;
        }
        let qid = q.id_or_index(i);
        qs.push((qid.clone(), q.text, query_embedding(&store, &qid)?));
        gt.insert(qid, q.item_id);
    }
    if qs.is_empty() {
        bail!("no queries left to evaluate");
    }
    Ok((qs, gt))
}

fn eval(cfg: &Config, args: EvalArgs) -> Result<()> {
    let (qs, gt) = eval_queries(&args.queries, &args.query_emb, args.filter)?;
    let top_ks = match &args.topk_range {
        Some(r) => parse_range(r)?,
        None => vec![args.topk.unwrap_or(cfg.retrieval.top_k)],
    };
    let beam = args
        .beam
        .or(cfg.retrieval.beam_width)
        .unwrap_or(2 * top_ks.iter().max().copied().unwrap_or(1));
    let tree = load_tree(&args.tree)?;
    let corpus = load_store(&args.corpus.corpus)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for path in &args.ckpt {
        let ck = load_ckpt(path)?;
        let m = ck.meta.m;
        let e = Engine::new(corpus.clone(), tree.clone(), ck, m)?;
        rows.extend(sweep(&[&e], &qs, &gt, &top_ks, beam)?);
    }
    rows.sort_by_key(|r| (r.m, r.top_k));
    print!("{}", format_report_table(&rows));
    if let Some(out) = args.json {
        fs::write(out, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn bench(cfg: &Config, args: BenchArgs) -> Result<()> {
    let ck = load_ckpt(&args.ckpt)?;
    let tree = load_tree(&args.tree)?;
    let base = load_store(&args.corpus.corpus)?;
    let extra = load_store(&args.extra)?;
    let store = load_store(&args.query_emb)?;
    let queries: Vec<BenchQuery> = load_queries(&args.queries)?
        .into_iter()
        .enumerate()
        .take(args.num_queries)
        .map(|(i, q)| {
            Ok(BenchQuery {
                embedding: query_embedding(&store, &q.id_or_index(i))?,
                text: q.text,
            })
        })
        .collect::<Result<_>>()?;
    let top_k = args.search.topk.unwrap_or(cfg.retrieval.top_k);
    let beam = args.search.beam.unwrap_or(2 * top_k);
    if !args.sizes.windows(2).all(|w| w[0] < w[1]) {
        bail!("sizes must be strictly ascending");
    }
    let mut engines = Vec::new();
    let m = ck.meta.m;
    let mut current = Engine::new(base, tree, ck, m)?;
    let mut next = extra.records().iter();
    for &size in &args.sizes {
        if size < current.corpus().len() {
            bail!("size {size} is below the base corpus of {}", current.corpus().len());
        }
        while current.corpus().len() < size {
            let rec = next.next().context("extra corpus too small for the requested sizes")?;
            current.insert(rec.clone())?;
        }
        let snapshot = Engine::from_parts(
            current.corpus().clone(),
            current.tree().clone(),
            current.model().clone(),
            current.vocab().clone(),
            current.m(),
        )?;
        engines.push(snapshot);
    }
    let refs: Vec<&Engine> = engines.iter().collect();
    let rows = bench_scaling(&refs, &queries, top_k, beam, args.rounds)?;
    println!(
        "{:>7} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "size", "stage1_ms", "stage2_ms", "total_ms", "brute_ms", "cands"
    );
    for r in &rows {
        println!(
            "{:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.1}",
            r.size, r.stage1_ms, r.stage2_ms, r.total_ms, r.brute_force_ms, r.mean_candidates
        );
    }
    if let Some(out) = args.json {
        fs::write(out, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn insert(cfg: &Config, args: InsertArgs) -> Result<()> {
    let mut tree = load_tree(&args.tree)?;
    let mut corpus = load_store(&args.corpus.corpus)?;
    let items = load_store(&args.items)?;
    let m = args.m.unwrap_or(cfg.retrieval.m);
    let mut lines = String::new();
    for rec in items.records() {
        let id = tree.insert_item(rec, m)?;
        corpus.push(rec.clone())?;
        lines.push_str(&format!("{}\t{id}\n", rec.item_id));
    }
    fs::write(&args.out_tree, tree.to_bytes())?;
    corpus.save(&args.out_corpus, CorpusFormat::from_path(&args.out_corpus))?;
    io::stdout().lock().write_all(lines.as_bytes())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::BuildTree(a) => build_tree(&cfg, a),
        Cmd::AssignIds(a) => assign_ids(&cfg, a),
        Cmd::Train(a) => train_cmd(&cfg, a),
        Cmd::Decode(a) => decode(&cfg, a),
        Cmd::Retrieve(a) => retrieve(&cfg, a),
        Cmd::Eval(a) => eval(&cfg, a),
        Cmd::BenchScaling(a) => bench(&cfg, a),
        Cmd::Insert(a) => insert(&cfg, a),
    };
    // A closed pipe (e.g. piping into `head`) is not a failure.
    match result {
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => Ok(()),
        other => other,
    }
}
