use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{run_session, BudgetRatio, EngineError, ExperimentConfig, ScoringContext};
use crate::collection::Collection;
use crate::metrics::Metric;
use crate::strategies::StrategyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub ratio: BudgetRatio,
    pub seed: u64,
    pub tau: Option<f64>,
    pub max_drop: Option<usize>,
    pub overlap: Option<f64>,
    pub n_human: usize,
    pub n_llm: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wall time per cell, kept apart from the rows so reports stay
/// byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: String,
    pub ratio: BudgetRatio,
    pub seed: u64,
    pub wall_time_s: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub collection: String,
    pub metric: Metric,
    pub methods: Vec<String>,
    pub ratios: Vec<BudgetRatio>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    #[serde(skip)]
    pub timings: Vec<CellTiming>,
}

impl SweepReport {
    /// Number of cells that ran rather than coming from the cache.
    pub fn executed_cells(&self) -> usize {
        self.timings.iter().filter(|t| !t.cached).count()
    }

    pub fn rows_for<'a>(&'a self, method: &'a str, ratio: BudgetRatio) -> impl Iterator<Item = &'a SweepRow> {
        self.rows.iter().filter(move |r| r.method == method && r.ratio == ratio)
    }
}

#[derive(Default)]
pub struct SweepOptions<'a> {
    /// Worker threads; 0 means one per available core.
    pub threads: usize,
    /// Per-cell row cache; disabled when `None`.
    pub cache_dir: Option<PathBuf>,
    pub on_row: Option<&'a (dyn Fn(&SweepRow) + Sync)>,
}

/// Content hash identifying one cell.
pub fn cell_key(
    collection_fingerprint: &str,
    method: &StrategyConfig,
    ratio: BudgetRatio,
    seed: u64,
    metric: Metric,
    cutoff: usize,
) -> String {
    let mut h = Sha256::new();
    h.update(collection_fingerprint.as_bytes());
    h.update(serde_json::to_vec(method).expect("config serializes"));
    h.update(ratio.to_string().as_bytes());
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(&metric).expect("metric serializes"));
    h.update(cutoff.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_cached(path: &Path) -> Option<SweepRow> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_cached(path: &Path, row: &SweepRow) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(row).map_err(std::io::Error::other)?)?;
    std::fs::rename(tmp, path)
}

struct Cell {
    method: usize,
    ratio: usize,
    seed: usize,
}

fn run_cell(
    collection: &Arc<Collection>,
    scoring: &ScoringContext,
    method: &StrategyConfig,
    ratio: BudgetRatio,
    seed: u64,
) -> SweepRow {
    let mut row = SweepRow {
        method: method.label(),
        ratio,
        seed,
        tau: None,
        max_drop: None,
        overlap: None,
        n_human: 0,
        n_llm: 0,
        error: None,
    };
    let budget = ratio.budget(collection.len());
    let c = collection.clone();
    let outcome = run_session(collection, method, budget, seed, |k| {
        c.lookup(k).map(|id| c.truth(id)).ok_or("pair missing from qrels")
    })
    .and_then(|out| scoring.score(&out.labels));
    match outcome {
        Ok(score) => {
            row.tau = Some(score.comparison.tau);
            row.max_drop = Some(score.comparison.max_drop);
            row.overlap = score.overlap;
            row.n_human = score.n_human;
            row.n_llm = if method.kind.uses_llm() { score.n_predicted } else { 0 };
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every (method, ratio, seed) cell. Failing cells are recorded with
/// their error and the sweep continues.
pub fn run_sweep(config: &ExperimentConfig, options: &SweepOptions<'_>) -> Result<SweepReport, EngineError> {
    config.validate()?;
    let seeds = &config.seeds;
    // One collection per seed for generated sources, otherwise one shared.
    let collections: Vec<Arc<Collection>> = if config.collection.per_seed() {
        seeds
            .iter()
            .map(|&s| config.collection.load(s).map(Arc::new))
            .collect::<Result<_, _>>()?
    } else {
        vec![Arc::new(config.collection.load(0)?)]
    };
    let metric = config.metric_for(&collections[0]);
    let scoring: Vec<ScoringContext> = collections
        .iter()
        .map(|c| ScoringContext::new(c.clone(), metric, config.ndcg_cutoff))
        .collect();
    let fingerprints: Vec<String> = collections.iter().map(|c| c.fingerprint()).collect();
    if let Some(dir) = &options.cache_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut cells = Vec::new();
    for method in 0..config.methods.len() {
        for ratio in 0..config.budget_ratios.len() {
            for seed in 0..seeds.len() {
                cells.push(Cell { method, ratio, seed });
            }
        }
    }
    let results: Mutex<Vec<Option<(SweepRow, CellTiming)>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let threads = match options.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cells.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let ci = if collections.len() == 1 { 0 } else { cell.seed };
                let method = &config.methods[cell.method];
                let ratio = config.budget_ratios[cell.ratio];
                let seed = seeds[cell.seed];
                let start = Instant::now();
                let cache_path = options.cache_dir.as_ref().map(|d| {
                    d.join(format!(
                        "{}.json",
                        cell_key(&fingerprints[ci], method, ratio, seed, metric, config.ndcg_cutoff)
                    ))
                });
                let cached = cache_path.as_deref().and_then(read_cached);
                let was_cached = cached.is_some();
                let row = cached.unwrap_or_else(|| {
                    let row = run_cell(&collections[ci], &scoring[ci], method, ratio, seed);
                    if let (Some(p), None) = (&cache_path, &row.error) {
                        let _ = write_cached(p, &row);
                    }
                    row
                });
                if let Some(cb) = options.on_row {
                    cb(&row);
                }
                let timing = CellTiming {
                    method: row.method.clone(),
                    ratio,
                    seed,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    cached: was_cached,
                };
                results.lock().unwrap()[i] = Some((row, timing));
            });
        }
    });

    let (rows, timings) = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .unzip();
    Ok(SweepReport {
        collection: collections[0].name.clone(),
        metric,
        methods: config.methods.iter().map(StrategyConfig::label).collect(),
        ratios: config.budget_ratios.clone(),
        seeds: seeds.clone(),
        rows,
        timings,
    })
}
