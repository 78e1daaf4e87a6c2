//! Experiment grids: one report per (method, m, seed) cell, written
//! atomically, plus Table-1 style aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{train, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::signal::{split_dataset, FeatureDataset, Protocol};
use crate::ssl::Method;

pub const REPORTS_DIR: &str = "reports";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const FAILURES_JSON: &str = "failures.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub m: usize,
    pub seed: u64,
}

impl GridCell {
    pub fn file_name(&self) -> String {
        format!("{}_m{}_s{}.json", self.method, self.m, self.seed)
    }

    /// Cartesian product in method-major order.
    pub fn product(methods: &[Method], m_values: &[usize], seeds: &[u64]) -> Vec<GridCell> {
        let mut cells = Vec::with_capacity(methods.len() * m_values.len() * seeds.len());
        for &method in methods {
            for &m in m_values {
                for &seed in seeds {
                    cells.push(GridCell { method, m, seed });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub out_dir: PathBuf,
    /// Maximum number of cells trained concurrently.
    pub jobs: usize,
    /// Keep cells whose report already exists and parses.
    pub skip_existing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: GridCell,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    pub reports: Vec<TrainReport>,
    pub trained: usize,
    pub skipped: usize,
    pub failures: Vec<CellFailure>,
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_cell(
    cell: &GridCell,
    make_config: &(dyn Fn(&GridCell) -> Result<TrainConfig> + Sync),
    ds: &FeatureDataset,
    protocol: Protocol,
    dataset_name: &str,
    report_path: &Path,
) -> Result<TrainReport> {
    let cfg = make_config(cell)?;
    let split = split_dataset(ds, cell.m, cell.seed, protocol)?;
    let report = train(&cfg, &split, ds, dataset_name)?;
    write_atomic(
        report_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    log::info!(
        "{} m={} seed={}: test accuracy {:.4} ({:.1}s)",
        cell.method,
        cell.m,
        cell.seed,
        report.test_accuracy,
        report.wall_time_secs
    );
    Ok(report)
}

/// Trains every cell (in parallel up to `jobs`). A failing cell is recorded
/// and does not stop the others; failures are also written to
/// `failures.json`.
pub fn run_grid(
    cells: &[GridCell],
    make_config: &(dyn Fn(&GridCell) -> Result<TrainConfig> + Sync),
    ds: &FeatureDataset,
    protocol: Protocol,
    dataset_name: &str,
    opts: &GridOptions,
) -> Result<GridOutcome> {
    let reports_dir = opts.out_dir.join(REPORTS_DIR);
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::invalid("run_grid", e.to_string()))?;

    enum CellResult {
        Skipped(TrainReport),
        Trained(TrainReport),
        Failed(CellFailure),
    }
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let path = reports_dir.join(cell.file_name());
                if opts.skip_existing && path.exists() {
                    match read_report(&path) {
                        Ok(r) => return CellResult::Skipped(r),
                        Err(e) => {
                            log::warn!("{}: unreadable report, retraining ({e})", path.display())
                        }
                    }
                }
                match run_cell(cell, make_config, ds, protocol, dataset_name, &path) {
                    Ok(r) => CellResult::Trained(r),
                    Err(e) => {
                        log::error!(
                            "{} m={} seed={} failed: {e}",
                            cell.method,
                            cell.m,
                            cell.seed
                        );
                        CellResult::Failed(CellFailure {
                            cell: *cell,
                            error: e.to_string(),
                        })
                    }
                }
            })
            .collect()
    });

    let mut out = GridOutcome::default();
    for r in results {
        match r {
            CellResult::Skipped(rep) => {
                out.skipped += 1;
                out.reports.push(rep);
            }
            CellResult::Trained(rep) => {
                out.trained += 1;
                out.reports.push(rep);
            }
            CellResult::Failed(f) => out.failures.push(f),
        }
    }
    let failures_path = opts.out_dir.join(FAILURES_JSON);
    if out.failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        write_atomic(
            &failures_path,
            serde_json::to_string_pretty(&out.failures)?.as_bytes(),
        )?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub method: Method,
    pub m: usize,
    /// Test accuracy in percent.
    pub mean: f64,
    /// Population standard deviation across seeds, in percent.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub methods: Vec<Method>,
    pub m_values: Vec<usize>,
    pub cells: BTreeMap<(Method, usize), CellStats>,
}

impl Aggregate {
    pub fn from_reports(reports: &[TrainReport]) -> Self {
        let mut acc: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
        for r in reports {
            acc.entry((r.method, r.m))
                .or_default()
                .push(100.0 * r.test_accuracy);
        }
        let mut m_values: Vec<usize> = acc.keys().map(|(_, m)| *m).collect();
        m_values.sort_unstable();
        m_values.dedup();
        let methods: Vec<Method> = Method::ALL
            .into_iter()
            .filter(|m| acc.keys().any(|(x, _)| x == m))
            .collect();
        let cells = acc
            .into_iter()
            .map(|((method, m), mut v)| {
                // Summation order must not depend on report order.
                v.sort_by(f64::total_cmp);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (
                    (method, m),
                    CellStats {
                        method,
                        m,
                        mean,
                        std: var.sqrt(),
                        n: v.len(),
                    },
                )
            })
            .collect();
        Aggregate {
            methods,
            m_values,
            cells,
        }
    }

    pub fn get(&self, method: Method, m: usize) -> Option<&CellStats> {
        self.cells.get(&(method, m))
    }

    fn cell_text(&self, method: Method, m: usize) -> String {
        self.get(method, m)
            .map(|c| format!("{:.2}({:.2})", c.mean, c.std))
            .unwrap_or_else(|| "-".into())
    }

    /// Rows are methods, columns are m values, cells are `mean(std)`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for m in &self.m_values {
            let _ = write!(s, ",m={m}");
        }
        s.push('\n');
        for &method in &self.methods {
            s.push_str(method.name());
            for &m in &self.m_values {
                let _ = write!(s, ",{}", self.cell_text(method, m));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text_table(&self) -> String {
        let head: Vec<String> = std::iter::once("method".to_string())
            .chain(self.m_values.iter().map(|m| format!("m={m}")))
            .collect();
        let mut rows = vec![head];
        for &method in &self.methods {
            let mut r = vec![method.name().to_string()];
            r.extend(self.m_values.iter().map(|&m| self.cell_text(method, m)));
            rows.push(r);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    if c == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub aggregate: Aggregate,
    pub reports: usize,
    /// Report files that could not be read, with the reason.
    pub corrupt: Vec<(PathBuf, String)>,
}

/// Rebuilds `summary.csv` and `summary.txt` from the report files under
/// `out_dir`.
pub fn summarize(out_dir: &Path) -> Result<Summary> {
    let dir = out_dir.join(REPORTS_DIR);
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "no reports directory at {}",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    let mut corrupt = Vec::new();
    for p in paths {
        match read_report(&p) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                corrupt.push((p, e.to_string()));
            }
        }
    }
    let aggregate = Aggregate::from_reports(&reports);
    write_atomic(&out_dir.join(SUMMARY_CSV), aggregate.to_csv().as_bytes())?;
    let mut text = aggregate.to_text_table();
    for (p, e) in &corrupt {
        let _ = writeln!(text, "excluded {}: {e}", p.display());
    }
    write_atomic(&out_dir.join(SUMMARY_TXT), text.as_bytes())?;
    Ok(Summary {
        aggregate,
        reports: reports.len(),
        corrupt,
    })
}
