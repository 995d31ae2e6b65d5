use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{BudgetRatio, EngineError, SweepReport};

/// Per-(method, ratio) means over the seeds that completed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRow {
    pub method: String,
    pub budget_ratio: BudgetRatio,
    pub ratio_value: f64,
    pub seeds: usize,
    pub mean_tau: Option<f64>,
    pub mean_max_drop: Option<f64>,
    pub mean_overlap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub rows_csv: PathBuf,
    pub means_csv: PathBuf,
    pub overlap_csv: PathBuf,
    pub table_txt: PathBuf,
    pub json: PathBuf,
    pub timings_csv: PathBuf,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SweepReport {
    pub fn means(&self) -> Vec<MeanRow> {
        let mut out = Vec::new();
        for method in &self.methods {
            for &ratio in &self.ratios {
                let ok: Vec<_> = self.rows_for(method, ratio).filter(|r| r.error.is_none()).collect();
                out.push(MeanRow {
                    method: method.clone(),
                    budget_ratio: ratio,
                    ratio_value: ratio.value(),
                    seeds: ok.len(),
                    mean_tau: mean(ok.iter().filter_map(|r| r.tau)),
                    mean_max_drop: mean(ok.iter().filter_map(|r| r.max_drop.map(|d| d as f64))),
                    mean_overlap: mean(ok.iter().filter_map(|r| r.overlap)),
                });
            }
        }
        out
    }
}

/// Methods as rows, ratios as columns, cells `tau (max_drop)`.
pub fn write_text_table(report: &SweepReport) -> String {
    let means = report.means();
    let mut header = vec![format!("{} [{:?}]", report.collection, report.metric).to_lowercase()];
    header.extend(report.ratios.iter().map(|r| r.to_string()));
    let mut table = vec![header];
    for method in &report.methods {
        let mut line = vec![method.clone()];
        for &ratio in &report.ratios {
            let m = means
                .iter()
                .find(|m| &m.method == method && m.budget_ratio == ratio)
                .expect("mean row per cell");
            line.push(match (m.mean_tau, m.mean_max_drop) {
                (Some(t), Some(d)) => format!("{t:.3} ({d:.1})"),
                _ => "-".into(),
            });
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

fn csv_err(e: csv::Error) -> EngineError {
    EngineError::Io(std::io::Error::other(e))
}

/// Writes the per-cell rows, per-ratio means, the overlap-vs-ratio series, an
/// aligned text table and a JSON dump into `dir`. Timings go to a separate
/// file; everything else is a pure function of the report.
pub fn emit_report(report: &SweepReport, dir: &Path) -> Result<ReportFiles, EngineError> {
    if report.rows.is_empty() {
        return Err(EngineError::Config("report has no rows".into()));
    }
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        rows_csv: dir.join("report.csv"),
        means_csv: dir.join("means.csv"),
        overlap_csv: dir.join("overlap_series.csv"),
        table_txt: dir.join("report.txt"),
        json: dir.join("report.json"),
        timings_csv: dir.join("timings.csv"),
    };

    let mut w = csv::Writer::from_path(&files.rows_csv).map_err(csv_err)?;
    w.write_record(["method", "budget_ratio", "seed", "tau", "max_drop", "overlap", "n_human", "n_llm", "error"])
        .map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.ratio.to_string(),
            r.seed.to_string(),
            fmt_opt(r.tau),
            r.max_drop.map(|d| d.to_string()).unwrap_or_default(),
            fmt_opt(r.overlap),
            r.n_human.to_string(),
            r.n_llm.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let means = report.means();
    let mut w = csv::Writer::from_path(&files.means_csv).map_err(csv_err)?;
    w.write_record(["method", "budget_ratio", "ratio_value", "seeds", "mean_tau", "mean_max_drop", "mean_overlap"])
        .map_err(csv_err)?;
    for m in &means {
        w.write_record([
            m.method.clone(),
            m.budget_ratio.to_string(),
            format!("{:.8}", m.ratio_value),
            m.seeds.to_string(),
            fmt_opt(m.mean_tau),
            fmt_opt(m.mean_max_drop),
            fmt_opt(m.mean_overlap),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.overlap_csv).map_err(csv_err)?;
    w.write_record(["method", "ratio_value", "mean_overlap"]).map_err(csv_err)?;
    for m in means.iter().filter(|m| m.mean_overlap.is_some()) {
        w.write_record([m.method.clone(), format!("{:.8}", m.ratio_value), fmt_opt(m.mean_overlap)])
            .map_err(csv_err)?;
    }
    w.flush()?;

    std::fs::write(&files.table_txt, write_text_table(report))?;
    let mut json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    json.push('\n');
    std::fs::write(&files.json, json)?;

    let mut w = csv::Writer::from_path(&files.timings_csv).map_err(csv_err)?;
    w.write_record(["method", "budget_ratio", "seed", "wall_time_s", "cached"]).map_err(csv_err)?;
    for t in &report.timings {
        w.write_record([
            t.method.clone(),
            t.ratio.to_string(),
            t.seed.to_string(),
            format!("{:.6}", t.wall_time_s),
            t.cached.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(files)
}
