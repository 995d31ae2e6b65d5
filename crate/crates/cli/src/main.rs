use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use lara_core::engine::{emit_report, run_sweep, write_text_table, BudgetRatio, ExperimentConfig, SweepOptions, SweepReport};
use lara_core::simulation::{generate_collection, SyntheticConfig};
use lara_core::strategies::{StrategyConfig, StrategyKind};
use lara_core::trec_io::{parse_qrels, read_documents, read_topics, write_probs, Manifest, PairKey};
use lara_core::Collection;
use lara_llm::{batch_annotate, BatchOptions, DecodingConfig, Fallback, GradeTokens, OpenAiClient, PromptTemplate, Texts};
use lara_service::{AppState, Manager, ServiceConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "lara", version, about = "LLM-assisted relevance assessment under a human judging budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a collection manifest, validate it and print a summary
    Ingest(IngestArgs),
    /// Query a completion endpoint for grade probabilities of every pooled pair
    Annotate(AnnotateArgs),
    /// Generate a synthetic collection on disk
    Synth(SynthArgs),
    /// Run every (method, budget ratio, seed) cell of an experiment
    Sweep(SweepArgs),
    /// Serve live annotation sessions over HTTP
    Serve(ServeArgs),
    /// Rebuild report tables from a sweep's report.json
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Collection manifest (TOML)
    #[arg(long, value_name = "MANIFEST")]
    config: PathBuf,
    /// Write the summary here instead of standard output
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Recorded in the summary; ingestion itself is deterministic
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Annotation config (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Completion endpoint URL, overriding the config
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Bearer token for the endpoint
    #[arg(long, env = "LARA_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Output probability file (JSONL)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Sampling seed forwarded to the endpoint
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config (TOML); the reference collection when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Run this seed only
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Budget ratios such as 1/64, replacing the config's list
    #[arg(long, value_name = "RATIO", value_delimiter = ',')]
    ratio: Vec<BudgetRatio>,
    /// Absolute budgets, added as ratios of the pool size
    #[arg(long, value_name = "N", value_delimiter = ',')]
    budget: Vec<usize>,
    /// Keep only these methods (kind or label); unknown kinds are added with defaults
    #[arg(long, value_name = "METHOD", value_delimiter = ',')]
    method: Vec<String>,
    /// Worker threads, 0 for one per core
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Recompute every cell instead of reusing cached results
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Listen address, overriding the config
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
    /// Shared bearer token required on every request
    #[arg(long, env = "LARA_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Seed for sessions created without one
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Session data directory, overriding the config
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by a sweep
    #[arg(value_name = "REPORT")]
    report: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Keep only rows for this seed
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only these budget ratios
    #[arg(long, value_name = "RATIO", value_delimiter = ',')]
    ratio: Vec<BudgetRatio>,
    /// Keep only these method labels
    #[arg(long, value_name = "METHOD", value_delimiter = ',')]
    method: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Annotate(a) => annotate(a),
        Command::Synth(a) => synth(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn load_collection(manifest: &Path) -> Result<Collection> {
    let m = Manifest::load(manifest)?;
    Collection::load(&m).with_context(|| format!("cannot load collection {}", manifest.display()))
}

#[derive(Serialize)]
struct IngestSummary {
    name: String,
    max_grade: u8,
    pairs: usize,
    topics: usize,
    systems: usize,
    pairs_with_probs: usize,
    grade_counts: BTreeMap<u8, usize>,
    fingerprint: String,
    seed: u64,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let c = load_collection(&a.config)?;
    let mut grade_counts = BTreeMap::new();
    for &g in c.truth_grades() {
        *grade_counts.entry(g).or_default() += 1;
    }
    let summary = IngestSummary {
        name: c.name.clone(),
        max_grade: c.max_grade,
        pairs: c.len(),
        topics: c.topic_count(),
        systems: c.systems().len(),
        pairs_with_probs: c.pair_ids().filter(|&id| c.grade_vector(id).is_some()).count(),
        grade_counts,
        fingerprint: c.fingerprint(),
        seed: a.seed,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    match a.out {
        Some(p) => std::fs::write(&p, json).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateConfig {
    manifest: PathBuf,
    model: String,
    #[serde(default)]
    endpoint: Option<String>,
    /// Built-in id (`base`, `rationale`, `utility`) or a template file.
    #[serde(default = "default_template")]
    template: String,
    #[serde(default)]
    answer_marker: Option<String>,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    fallback: Fallback,
    #[serde(default)]
    cache: Option<PathBuf>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    decoding: DecodingConfig,
    /// Surface forms per grade, replacing the digit defaults.
    #[serde(default)]
    grade_tokens: Option<BTreeMap<String, Vec<String>>>,
}

fn default_template() -> String {
    "base".into()
}

fn default_workers() -> usize {
    4
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let cfg: AnnotateConfig = read_toml(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    let manifest = Manifest::load(&resolve(base, &cfg.manifest))?;
    let qrels_path = manifest.resolve(&manifest.qrels);
    let qrels = parse_qrels(BufReader::new(
        File::open(&qrels_path).with_context(|| format!("cannot open {}", qrels_path.display()))?,
    ))?;
    let open = |p: &Option<PathBuf>, what: &str| -> Result<BufReader<File>> {
        let p = p.as_ref().with_context(|| format!("manifest lists no {what} file"))?;
        let p = manifest.resolve(p);
        Ok(BufReader::new(File::open(&p).with_context(|| format!("cannot open {}", p.display()))?))
    };
    let texts = Texts::new(read_topics(open(&manifest.topics, "topics")?)?, read_documents(open(&manifest.documents, "documents")?)?);
    let mut pairs: Vec<PairKey> = qrels.iter().map(|r| PairKey::new(&r.topic_id, &r.doc_id)).collect();
    pairs.sort();
    pairs.dedup();

    let mut template = match PromptTemplate::builtin(&cfg.template) {
        Some(t) => t,
        None => PromptTemplate::from_file(&resolve(base, Path::new(&cfg.template)))?,
    };
    if cfg.answer_marker.is_some() {
        template.answer_marker = cfg.answer_marker.clone();
    }
    let mut opts = BatchOptions::new(template, manifest.max_grade);
    opts.decoding = cfg.decoding.clone();
    if a.seed.is_some() {
        opts.decoding.seed = a.seed;
    }
    opts.fallback = cfg.fallback;
    opts.workers = cfg.workers.max(1);
    if let Some(tokens) = &cfg.grade_tokens {
        let mut variants = BTreeMap::new();
        for (g, v) in tokens {
            let g: u8 = g.parse().with_context(|| format!("grade_tokens key {g:?} is not a grade"))?;
            variants.insert(g, v.clone());
        }
        opts.grade_tokens = GradeTokens { variants };
    }
    let out = a
        .out
        .or(cfg.out.map(|p| resolve(base, &p)))
        .unwrap_or_else(|| PathBuf::from("probs.jsonl"));
    opts.cache = Some(cfg.cache.map(|p| resolve(base, &p)).unwrap_or_else(|| out.with_extension("partial.jsonl")));

    let endpoint = a.endpoint.or(cfg.endpoint).context("no endpoint given (config `endpoint` or --endpoint)")?;
    let client = OpenAiClient::new(endpoint, cfg.model, a.token);
    let report = batch_annotate(&pairs, &texts, &client, &opts)?;
    write_probs(&report.records, File::create(&out).with_context(|| format!("cannot write {}", out.display()))?)?;
    eprintln!(
        "{} records ({} cached, {} uniform fallbacks), {} failures -> {}",
        report.records.len(),
        report.cached,
        report.fallbacks.len(),
        report.failures.len(),
        out.display()
    );
    for f in report.failures.iter().take(20) {
        eprintln!("  {} {}: {}", f.topic, f.doc, f.error);
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_toml::<SyntheticConfig>(p)?,
        None => SyntheticConfig::default(),
    };
    cfg.seed = a.seed;
    let generated = generate_collection(&cfg)?;
    let manifest = generated.write_to(&a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn select_methods(methods: &[StrategyConfig], wanted: &[String]) -> Result<Vec<StrategyConfig>> {
    if wanted.is_empty() {
        return Ok(methods.to_vec());
    }
    let mut out: Vec<StrategyConfig> = Vec::new();
    for w in wanted {
        let matches: Vec<&StrategyConfig> = methods
            .iter()
            .filter(|m| m.label().eq_ignore_ascii_case(w) || kind_name(m.kind) == w.to_ascii_lowercase())
            .collect();
        if matches.is_empty() {
            let kind: StrategyKind = serde_json::from_value(serde_json::Value::String(w.to_ascii_lowercase()))
                .map_err(|_| anyhow::anyhow!("unknown method {w:?}"))?;
            out.push(StrategyConfig::new(kind));
        } else {
            out.extend(matches.into_iter().cloned());
        }
    }
    out.dedup();
    Ok(out)
}

fn kind_name(kind: StrategyKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if !a.ratio.is_empty() || !a.budget.is_empty() {
        let mut ratios = a.ratio.clone();
        if !a.budget.is_empty() {
            let pool = cfg.collection.load(cfg.seeds[0])?.len();
            for &b in &a.budget {
                if b == 0 || b > pool {
                    bail!("budget {b} is outside 1..={pool}");
                }
                ratios.push(BudgetRatio::new(b as u64, pool as u64)?);
            }
        }
        cfg.budget_ratios = ratios;
    }
    cfg.methods = select_methods(&cfg.methods, &a.method)?;
    let opts = SweepOptions {
        threads: a.threads,
        cache_dir: (!a.no_cache).then(|| cfg.output_dir.join("cache")),
        on_row: None,
    };
    let report = run_sweep(&cfg, &opts)?;
    let files = emit_report(&report, &cfg.output_dir)?;
    print!("{}", write_text_table(&report));
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: {} {} seed {}: {}", r.method, r.ratio, r.seed, r.error.as_deref().unwrap_or(""));
    }
    eprintln!("report written to {}", files.rows_csv.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeConfig {
    #[serde(default = "default_data_dir")]
    data_dir: PathBuf,
    #[serde(default)]
    listen: Option<String>,
    #[serde(default = "default_lease")]
    lease_minutes: i64,
    #[serde(default)]
    allow_cross_group: bool,
    /// Name to manifest path.
    collections: BTreeMap<String, PathBuf>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("sessions")
}

fn default_lease() -> i64 {
    30
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg: ServeConfig = read_toml(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    if cfg.lease_minutes <= 0 {
        bail!("lease_minutes must be positive");
    }
    let mut collections = HashMap::new();
    for (name, path) in &cfg.collections {
        collections.insert(name.clone(), Arc::new(load_collection(&resolve(base, path))?));
    }
    let data_dir = a.out.unwrap_or_else(|| resolve(base, &cfg.data_dir));
    let service = ServiceConfig {
        data_dir,
        lease: chrono::Duration::minutes(cfg.lease_minutes),
        allow_cross_group: cfg.allow_cross_group,
        default_seed: a.seed,
    };
    let manager = Manager::with_system_clock(service, collections)?;
    let listen = a.listen.or(cfg.listen).unwrap_or_else(|| "127.0.0.1:8080".into());
    lara_service::run(
        &listen,
        AppState {
            manager: Arc::new(manager),
            token: a.token,
        },
    )
    .with_context(|| format!("cannot serve on {listen}"))
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).with_context(|| format!("cannot read {}", a.report.display()))?;
    let mut r: SweepReport = serde_json::from_str(&text).with_context(|| format!("invalid report {}", a.report.display()))?;
    if let Some(s) = a.seed {
        r.rows.retain(|row| row.seed == s);
        r.seeds.retain(|&x| x == s);
    }
    if !a.ratio.is_empty() {
        r.rows.retain(|row| a.ratio.contains(&row.ratio));
        r.ratios.retain(|x| a.ratio.contains(x));
    }
    if !a.method.is_empty() {
        let keep = |m: &String| a.method.iter().any(|w| w.eq_ignore_ascii_case(m));
        r.rows.retain(|row| keep(&row.method));
        r.methods.retain(keep);
    }
    emit_report(&r, &a.out)?;
    print!("{}", write_text_table(&r));
    Ok(())
}
