use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::TimeDelta;
use clap::{Args, Parser, Subcommand, ValueEnum};
use spanwork::report::{build_report, ReportOptions};
use spanwork::service::{ServiceConfig, StudyService};
use spanwork::setup::StudySetup;
use spanwork::store::{export_dump, log_path, read_dump, write_dump};
use spanwork_core::aggregation::{
    subsample_annotations, aggregate, AggregationMethod, DawidSkeneConfig, LabelMatrix, SampleSize,
};
use spanwork_core::agreement::evaluate_subsampled;
use spanwork_core::corpus::{
    load_gold, read_corpus, write_corpus, write_gold, Corpus, LineSegmenter, RuleSegmenter,
    Segmenter, Sentence, Subtask,
};
use spanwork_core::embedding::{write_table, EmbeddingProvider, HashedNgramEmbedder, ProviderSpec};
use spanwork_core::retrieval::ExampleIndex;
use spanwork_core::simulator::{run_synthetic_study, synthetic_corpus, NoiseModel};
use spanwork_core::study::{split_expert_set, ExpertCorpus, StudyConfig};

#[derive(Parser)]
#[command(name = "spanwork", version, about = "Crowdsourced span annotation with dynamic expert examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment and tokenize a corpus, or generate a synthetic one.
    Ingest(IngestArgs),
    /// Split the expert-labeled documents into training and test parts.
    Split(SplitArgs),
    /// Export sentence vectors, or query the example index.
    Index(IndexArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Run a study with synthetic workers and write the annotation dump.
    Simulate(SimulateArgs),
    /// Aggregate redundant annotations and score them against test gold.
    Aggregate(AggregateArgs),
    /// Per-worker, aggregated and feedback-conditioned agreement report.
    Evaluate(EvaluateArgs),
    /// Write the annotation dump of a store.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmenterKind {
    Rule,
    Line,
}

#[derive(Args)]
struct IngestArgs {
    /// JSON-lines corpus with raw `title`/`abstract` or tokenized `sentences`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Expert gold labels for `--input`, validated against the corpus.
    #[arg(long, requires = "input")]
    gold: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rule")]
    segmenter: SegmenterKind,
    /// Generate this many synthetic documents instead of reading input.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write gold labels (synthetic corpora, or validated `--gold`).
    #[arg(long)]
    gold_out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = 41)]
    test_docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProviderArgs {
    /// Precomputed embedding table; defaults to the built-in hashed embedder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = spanwork_core::embedding::DEFAULT_DIMENSION)]
    dimension: usize,
}

impl ProviderArgs {
    fn spec(&self) -> ProviderSpec {
        match &self.embeddings {
            Some(path) => ProviderSpec::PrecomputedTable { path: path.clone() },
            None => ProviderSpec::BuiltinHashedNgram {
                dimension: self.dimension,
                seed: spanwork_core::embedding::DEFAULT_HASH_SEED,
            },
        }
    }
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    expert: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Write vectors for every expert sentence to this table.
    #[arg(long, required_unless_present = "query")]
    out: Option<PathBuf>,
    /// Print the top-k training examples for this whitespace-tokenized text.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value = "P")]
    subtask: Subtask,
    #[arg(short, default_value_t = 3)]
    k: usize,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    redundancy: usize,
    #[arg(long, value_delimiter = ',', default_value = "P,I,O")]
    subtasks: Vec<Subtask>,
    #[arg(long, default_value_t = 0.90)]
    min_approval_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    qualification_threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    worker_filter_fraction: f64,
}

impl StudyArgs {
    fn config(&self) -> StudyConfig {
        StudyConfig {
            subtasks: self.subtasks.clone(),
            k: self.k,
            redundancy: self.redundancy,
            min_approval_rate: self.min_approval_rate,
            qualification_threshold: self.qualification_threshold,
            worker_filter_fraction: self.worker_filter_fraction,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "SPANWORK_STORE")]
    store: PathBuf,
    #[arg(long, env = "SPANWORK_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Expert split for a new study; ignored when the store already has one.
    #[arg(long)]
    expert: Option<PathBuf>,
    /// Corpus whose non-expert sentences form the unlabeled pool.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    study: StudyArgs,
    #[arg(long, default_value_t = 1800)]
    hit_timeout_secs: i64,
    #[arg(long, default_value_t = 60)]
    expiry_interval_secs: u64,
    /// Skip fsync after each event (faster, loses durability on power loss).
    #[arg(long)]
    no_fsync: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    expert: PathBuf,
    /// Worker models: gold-replay, adversarial, symmetric:FLIP,
    /// feedback:P_USEFUL:FLIP_USEFUL:FLIP_NOT_USEFUL. Repeat per worker.
    #[arg(long = "worker", required = true)]
    workers: Vec<String>,
    #[command(flatten)]
    study: StudyArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    expert: PathBuf,
    /// Corpus providing lengths of non-expert sentences in the dump.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "mv")]
    method: AggregationMethod,
    #[arg(long, default_value = "3")]
    n: SampleSize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write labels aggregated from one subsample (seeded by `--seed`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    expert: PathBuf,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    filter_fraction: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, env = "SPANWORK_STORE")]
    store: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_expert(path: &Path) -> Result<ExpertCorpus> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn segmenter(kind: SegmenterKind) -> Box<dyn Segmenter> {
    match kind {
        SegmenterKind::Rule => Box::new(RuleSegmenter),
        SegmenterKind::Line => Box::new(LineSegmenter),
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    if let Some(n) = args.synthetic {
        let (docs, gold) = synthetic_corpus(n, args.seed);
        let corpus = Corpus::new(docs)?;
        write_corpus(&args.out, &corpus)?;
        let gold_out = args.gold_out.context("--gold-out is required with --synthetic")?;
        write_gold(&gold_out, &gold)?;
        println!(
            "wrote {} documents, {} sentences",
            corpus.documents().len(),
            corpus.sentence_count()
        );
        return Ok(());
    }
    let input = args.input.expect("clap enforces input");
    let corpus = read_corpus(&input, segmenter(args.segmenter).as_ref())?;
    write_corpus(&args.out, &corpus)?;
    if let Some(gold_path) = args.gold {
        let gold = load_gold(&gold_path, &corpus)?;
        if let Some(out) = args.gold_out {
            write_gold(&out, &gold)?;
        }
        println!("{} gold-labeled sentences", gold.len());
    }
    println!(
        "wrote {} documents, {} sentences",
        corpus.documents().len(),
        corpus.sentence_count()
    );
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus, &RuleSegmenter)?;
    let gold = load_gold(&args.gold, &corpus)?;
    let expert = split_expert_set(corpus.documents(), &gold, args.test_docs, args.seed)?;
    serde_json::to_writer(BufWriter::new(File::create(&args.out)?), &expert)?;
    println!(
        "train: {} documents, {} sentences; test: {} documents, {} sentences",
        expert.train_docs.len(),
        expert.train.len(),
        expert.test_docs.len(),
        expert.test.len()
    );
    Ok(())
}

fn index(args: IndexArgs) -> Result<()> {
    let expert = read_expert(&args.expert)?;
    let provider = args.provider.spec().build()?;
    if let Some(out) = &args.out {
        let rows = write_table(out, provider.as_ref(), expert.train.iter().chain(&expert.test))?;
        println!("wrote {rows} vectors of dimension {}", provider.dimension());
    }
    if let Some(text) = &args.query {
        let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
        let query = Sentence::new("query", tokens)?;
        // A table only covers known sentences; queries use the built-in embedder.
        let provider: Arc<dyn EmbeddingProvider> = match args.provider.embeddings {
            Some(_) => Arc::new(HashedNgramEmbedder::default()),
            None => provider,
        };
        let index = ExampleIndex::build(&expert.train, provider, &expert.gold)?;
        for ex in index.query_top_k(&query, args.subtask, args.k)? {
            let spans: Vec<String> = ex
                .visible_spans
                .iter()
                .map(|s| ex.tokens[s.start..s.end].join(" "))
                .collect();
            println!(
                "{}\t{:.4}\t{}\t[{}]",
                ex.rank,
                ex.score,
                ex.tokens.join(" "),
                spans.join(" | ")
            );
        }
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        hit_timeout: TimeDelta::seconds(args.hit_timeout_secs),
        fsync: !args.no_fsync,
        ..ServiceConfig::default()
    };
    let service = if log_path(&args.store).exists() {
        tracing::info!(store = %args.store.display(), "replaying event log");
        StudyService::open(&args.store, config)?
    } else {
        let expert_path = args
            .expert
            .as_ref()
            .context("the store is empty; --expert is required to create a study")?;
        let expert = read_expert(expert_path)?;
        let known: BTreeSet<&str> = expert.gold.sentence_ids().collect();
        let unlabeled = match &args.unlabeled {
            Some(path) => read_corpus(path, &RuleSegmenter)?
                .sentences()
                .filter(|s| !known.contains(s.id.as_str()))
                .cloned()
                .collect(),
            None => Vec::new(),
        };
        let setup = StudySetup {
            config: args.study.config(),
            corpus: expert,
            unlabeled,
            provider: args.provider.spec(),
        };
        StudyService::create(&args.store, setup, config)?
    };
    let service = Arc::new(service);
    spanwork::http::spawn_expiry(service.clone(), Duration::from_secs(args.expiry_interval_secs.max(1)));
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    tracing::info!(addr = %args.bind, "listening");
    axum::serve(listener, spanwork::http::router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn parse_worker(spec: &str, seed: u64) -> Result<NoiseModel> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64> { s.parse().with_context(|| format!("bad number {s:?} in {spec:?}")) };
    Ok(match parts.as_slice() {
        ["gold-replay"] => NoiseModel::gold_replay(seed),
        ["adversarial"] => NoiseModel::adversarial(seed),
        ["symmetric", f] => NoiseModel::symmetric(num(f)?, seed)?,
        ["feedback", p, u, n] => NoiseModel::feedback_coupled(num(p)?, num(u)?, num(n)?, seed)?,
        _ => bail!("unknown worker model {spec:?}"),
    })
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let expert = read_expert(&args.expert)?;
    let workers = args
        .workers
        .iter()
        .enumerate()
        .map(|(i, w)| parse_worker(w, args.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let run = run_synthetic_study(&expert, args.study.config(), &workers, args.seed)?;
    write_dump(BufWriter::new(File::create(&args.out)?), &run.records)?;
    println!("{} records from {} workers", run.records.len(), run.worker_ids.len());
    Ok(())
}

fn aggregate_cmd(args: AggregateArgs) -> Result<()> {
    let expert = read_expert(&args.expert)?;
    let records = read_dump(&args.dump)?;
    let mut lengths: HashMap<String, usize> = expert
        .gold
        .sentence_ids()
        .map(|id| (id.to_string(), expert.gold.token_count(id).expect("listed")))
        .collect();
    if let Some(path) = &args.corpus {
        for s in read_corpus(path, &RuleSegmenter)?.sentences() {
            lengths.entry(s.id.clone()).or_insert(s.len());
        }
    }
    let test_gold = expert.gold.restrict(expert.test.iter().map(|s| s.id.as_str()));
    let ds = DawidSkeneConfig::default();
    let mut out = match &args.out {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    println!("{:<8}{:>8}{:>10}", "subtask", "method", "kappa");
    for subtask in Subtask::ALL {
        if !records.iter().any(|r| r.subtask == subtask) {
            continue;
        }
        let matrix = LabelMatrix::from_records(&records, subtask, |id| lengths.get(id).copied())?;
        if let Some(out) = out.as_mut() {
            let labels = aggregate(&subsample_annotations(&matrix, args.n, args.seed), args.method, &ds)?;
            for line in labels.lines() {
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        let scored: Vec<_> = records
            .iter()
            .filter(|r| r.subtask == subtask && test_gold.contains(&r.sentence_id))
            .cloned()
            .collect();
        if scored.is_empty() {
            continue;
        }
        let test_matrix = LabelMatrix::from_records(&scored, subtask, |id| test_gold.token_count(id))?;
        let eval = evaluate_subsampled(&test_matrix, &test_gold, args.n, args.method, args.repeats, args.seed, &ds)?;
        println!(
            "{:<8}{:>8}{:>10.3}",
            subtask.as_str(),
            format!("{}{}", args.method, args.n),
            eval.mean_kappa
        );
    }
    if let Some(mut out) = out {
        out.flush()?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let expert = read_expert(&args.expert)?;
    let records = read_dump(&args.dump)?;
    let test_gold = expert.gold.restrict(expert.test.iter().map(|s| s.id.as_str()));
    let options = ReportOptions {
        repeats: args.repeats,
        seed: args.seed,
        filter_fraction: args.filter_fraction,
        ..ReportOptions::default()
    };
    let report = build_report(&records, &test_gold, expert.test.len(), &options)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let records = export_dump(&args.store)?;
    match args.out {
        Some(path) => write_dump(BufWriter::new(File::create(path)?), &records)?,
        None => write_dump(io::stdout().lock(), &records)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Index(a) => index(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(serve(a)),
        Command::Simulate(a) => simulate(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export(a) => export(a),
    }
}
