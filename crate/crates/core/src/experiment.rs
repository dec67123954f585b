//! Experiment sweeps: configuration, parallel execution of (τ × seed × arm)
//! runs, per-run artifacts and aggregate reports recomputed from them.
//!
//! Layout of an output directory:
//!
//! ```text
//! runs/<run id>/run.json     increment logs of one run
//! runs/<run id>/metrics.csv  metric rows of every increment
//! runs.csv                   one row per run
//! tau_sweep.csv              median final error per arm and τ
//! ablation.csv               per-domain medians per arm
//! summary.md                 the same tables, plus bookkeeping flags
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Dataset, SyntheticSpec};
use crate::error::{parse_toml, Error, Result};
use crate::ids::DomainId;
use crate::losses::LABEL_SMOOTHING;
use crate::metrics::write_metric_rows;
use crate::protocol::{final_forgetting, resolve_plan, run_plan, Arm, IncrementLog, IncrementPlan};

pub const RUN_SCHEMA_VERSION: u32 = 1;
/// Largest tolerated gap between a logged `l_il` and its weighted parts.
pub const BOOKKEEPING_TOLERANCE: f64 = 1e-9;
pub const RUNS_DIR: &str = "runs";
pub const RUN_FILE: &str = "run.json";

/// Exactly one of the two paths must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// TOML synthetic dataset spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<PathBuf>,
    /// CSV dataset in the `label,domain,split,f0..` layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_arms() -> Vec<Arm> {
    vec![Arm::WithMd]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    /// Temperatures overriding every increment's τ; empty keeps the plan's.
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            taus: Vec::new(),
            seeds: default_seeds(),
            arms: default_arms(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub plan: IncrementPlan,
    pub data: DataSource,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Parallel runs; 0 uses one worker per core.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = parse_toml(path, &text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut config.data.synthetic, &mut config.data.csv, &mut config.output]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => return Err(Error::Config("data: give either `synthetic` or `csv`, not both".into())),
            (None, None) => return Err(Error::Config("data: one of `synthetic` or `csv` is required".into())),
            _ => {}
        }
        if let Some(t) = self
            .sweep
            .taus
            .iter()
            .find(|t| !(**t > LABEL_SMOOTHING && t.is_finite()))
        {
            return Err(Error::Config(format!(
                "sweep: tau must exceed {LABEL_SMOOTHING}, got {t}"
            )));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep: at least one seed is required".into()));
        }
        if self.sweep.arms.is_empty() {
            return Err(Error::Config("sweep: at least one arm is required".into()));
        }
        let unique = |n: usize, m: usize, what: &str| {
            if n != m {
                Err(Error::Config(format!("sweep: repeated {what}")))
            } else {
                Ok(())
            }
        };
        let taus: BTreeSet<u64> = self.sweep.taus.iter().map(|t| t.to_bits()).collect();
        unique(taus.len(), self.sweep.taus.len(), "tau")?;
        let seeds: BTreeSet<u64> = self.sweep.seeds.iter().copied().collect();
        unique(seeds.len(), self.sweep.seeds.len(), "seed")?;
        let arms: BTreeSet<&str> = self.sweep.arms.iter().map(|a| a.name()).collect();
        unique(arms.len(), self.sweep.arms.len(), "arm")?;
        self.plan.validate()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => SyntheticSpec::load(spec)?.generate(),
            (None, Some(csv)) => load_dataset(csv),
            _ => Err(Error::Config("data: exactly one source is required".into())),
        }
    }

    /// Every sweep point, τ-major, then seed, then arm.
    pub fn runs(&self) -> Vec<RunSpec> {
        let taus: Vec<Option<f64>> = if self.sweep.taus.is_empty() {
            vec![None]
        } else {
            self.sweep.taus.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &tau in &taus {
            for &seed in &self.sweep.seeds {
                for &arm in &self.sweep.arms {
                    out.push(RunSpec { arm, tau, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub arm: Arm,
    pub tau: Option<f64>,
    pub seed: u64,
}

impl RunSpec {
    pub fn id(&self) -> String {
        match self.tau {
            Some(t) => format!("{}-tau{t}-seed{}", self.arm, self.seed),
            None => format!("{}-seed{}", self.arm, self.seed),
        }
    }

    pub fn plan(&self, base: &IncrementPlan) -> IncrementPlan {
        let p = base.with_seed(self.seed);
        match self.tau {
            Some(t) => p.with_tau(t),
            None => p,
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub arm: Arm,
    /// Sweep temperature; absent when the plan's own τ was used.
    pub tau: Option<f64>,
    pub seed: u64,
    pub plan: IncrementPlan,
    pub logs: Vec<IncrementLog>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn execute_one(spec: &RunSpec, base: &IncrementPlan, data: &Dataset, runs_dir: &Path) -> Result<RunRecord> {
    let plan = spec.plan(base);
    let outcome = run_plan(&plan, data, spec.arm)?;
    let record = RunRecord {
        schema_version: RUN_SCHEMA_VERSION,
        run_id: spec.id(),
        arm: spec.arm,
        tau: spec.tau,
        seed: spec.seed,
        plan,
        logs: outcome.logs,
    };
    let dir = runs_dir.join(&record.run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    write_file(&dir.join(RUN_FILE), &json)?;
    let rows: Vec<_> = record.logs.iter().flat_map(IncrementLog::metric_rows).collect();
    let path = dir.join("metrics.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_metric_rows(BufWriter::new(file), &rows)?;
    Ok(record)
}

/// Runs every sweep point on `data`, writes the per-run artifacts under
/// `out/runs/` and then the aggregate report. The first failing run (in
/// sweep order) is returned as [`Error::Run`].
pub fn run_experiment(config: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Report> {
    config.validate()?;
    resolve_plan(&config.plan, data)?;
    let runs_dir = out.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let specs = config.runs();
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| execute_one(s, &config.plan, data, &runs_dir))
            .collect()
    });
    for (spec, result) in specs.iter().zip(results) {
        if let Err(e) = result {
            let dir = runs_dir.join(spec.id());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("error.txt"), format!("{e}\n").as_bytes())?;
            return Err(Error::Run {
                run: spec.id(),
                source: Box::new(e),
            });
        }
    }
    report(out)
}

/// Summary of one run, recomputed from its logs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub run_id: String,
    pub arm: Arm,
    pub tau: Option<f64>,
    pub seed: u64,
    pub increments: usize,
    pub final_accuracy: Option<f64>,
    pub final_macro_f1: Option<f64>,
    pub final_forgetting: Option<f64>,
    pub bookkeeping_error: f64,
}

impl RunRow {
    pub fn bookkeeping_ok(&self) -> bool {
        self.bookkeeping_error <= BOOKKEEPING_TOLERANCE
    }

    fn from_record(r: &RunRecord) -> Result<Self> {
        let last = r.logs.last().map(|l| &l.evaluation);
        Ok(Self {
            run_id: r.run_id.clone(),
            arm: r.arm,
            tau: r.tau,
            seed: r.seed,
            increments: r.logs.len(),
            final_accuracy: last.map(|e| e.accuracy),
            final_macro_f1: last.map(|e| e.macro_.f1),
            final_forgetting: final_forgetting(&r.logs, None)?,
            bookkeeping_error: r.logs.iter().map(IncrementLog::bookkeeping_error).fold(0.0, f64::max),
        })
    }
}

/// Medians over seeds of one (arm, τ) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub tau: Option<f64>,
    pub runs: usize,
    pub median_accuracy: Option<f64>,
    pub median_forgetting: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridPosition {
    Interior,
    Boundary,
}

/// Median final error (1 − accuracy) per τ for one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub arm: Arm,
    pub errors: Vec<(Option<f64>, Option<f64>)>,
    pub argmin: Option<(Option<f64>, GridPosition)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub domain: DomainId,
    pub tau: Option<f64>,
    pub arm: Arm,
    pub runs: usize,
    pub median_accuracy: Option<f64>,
    pub median_macro_f1: Option<f64>,
    pub median_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunRow>,
    pub arms: Vec<ArmSummary>,
    pub tau_sweep: Vec<TauRow>,
    pub ablation: Vec<AblationRow>,
}

impl Report {
    /// Runs whose logged totals break the weighted-sum identity.
    pub fn flagged(&self) -> Vec<&RunRow> {
        self.runs.iter().filter(|r| !r.bookkeeping_ok()).collect()
    }

    pub fn arm(&self, arm: Arm, tau: Option<f64>) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm && a.tau == tau)
    }
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Reads every `runs/*/run.json` under `dir`, sorted by run id.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs_dir = dir.join(RUNS_DIR);
    let entries =
        fs::read_dir(&runs_dir).map_err(|e| Error::Report(format!("cannot read {}: {e}", runs_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for d in dirs {
        let path = d.join(RUN_FILE);
        let parsed = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<RunRecord>(&b).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) if r.schema_version != RUN_SCHEMA_VERSION => problems.push(format!(
                "{}: schema version {} (expected {RUN_SCHEMA_VERSION})",
                path.display(),
                r.schema_version
            )),
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Report(format!(
            "{} unreadable run log(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    if records.is_empty() {
        return Err(Error::Report(format!("no run logs under {}", runs_dir.display())));
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(records)
}

fn tau_key(t: Option<f64>) -> (bool, u64) {
    // orders "plan τ" first, then ascending temperatures (all positive)
    (t.is_some(), t.map_or(0, f64::to_bits))
}

/// Aggregates already-parsed run records.
pub fn aggregate(records: &[RunRecord]) -> Result<Report> {
    let runs: Vec<RunRow> = records.iter().map(RunRow::from_record).collect::<Result<_>>()?;
    let arm_order = |a: Arm| Arm::ALL.iter().position(|x| *x == a).unwrap_or(usize::MAX);

    let mut cells: BTreeMap<(usize, (bool, u64)), Vec<&RunRow>> = BTreeMap::new();
    for r in &runs {
        cells.entry((arm_order(r.arm), tau_key(r.tau))).or_default().push(r);
    }
    let arms: Vec<ArmSummary> = cells
        .values()
        .map(|rows| {
            let acc: Vec<f64> = rows.iter().filter_map(|r| r.final_accuracy).collect();
            let fgt: Vec<f64> = rows.iter().filter_map(|r| r.final_forgetting).collect();
            ArmSummary {
                arm: rows[0].arm,
                tau: rows[0].tau,
                runs: rows.len(),
                median_accuracy: median(&acc),
                median_forgetting: median(&fgt),
            }
        })
        .collect();

    let mut taus: Vec<Option<f64>> = arms.iter().map(|a| a.tau).collect();
    taus.sort_by_key(|t| tau_key(*t));
    taus.dedup();
    let mut arm_list: Vec<Arm> = arms.iter().map(|a| a.arm).collect();
    arm_list.dedup();
    let tau_sweep = arm_list
        .iter()
        .map(|&arm| {
            let errors: Vec<(Option<f64>, Option<f64>)> = taus
                .iter()
                .map(|&t| {
                    let err = arms
                        .iter()
                        .find(|a| a.arm == arm && a.tau == t)
                        .and_then(|a| a.median_accuracy)
                        .map(|acc| 1.0 - acc);
                    (t, err)
                })
                .collect();
            let best = errors
                .iter()
                .enumerate()
                .filter_map(|(i, (t, e))| e.map(|e| (i, *t, e)))
                .min_by(|a, b| a.2.total_cmp(&b.2));
            let argmin = best.map(|(i, t, _)| {
                let pos = if i > 0 && i + 1 < errors.len() {
                    GridPosition::Interior
                } else {
                    GridPosition::Boundary
                };
                (t, pos)
            });
            TauRow { arm, errors, argmin }
        })
        .collect();

    // (domain, tau, arm) -> arm, tau, per-run [accuracy, macro F1, forgetting]
    type Cell = (Arm, Option<f64>, Vec<[Option<f64>; 3]>);
    let mut by_domain: BTreeMap<(u32, (bool, u64), usize), Cell> = BTreeMap::new();
    for (rec, row) in records.iter().zip(&runs) {
        let Some(last) = rec.logs.last() else { continue };
        for d in &last.evaluation.per_domain {
            let fgt = final_forgetting(&rec.logs, Some(d.domain))?;
            by_domain
                .entry((d.domain.0, tau_key(row.tau), arm_order(row.arm)))
                .or_insert_with(|| (row.arm, row.tau, Vec::new()))
                .2
                .push([Some(d.accuracy), Some(d.macro_.f1), fgt]);
        }
    }
    let ablation = by_domain
        .into_iter()
        .map(|((domain, _, _), (arm, tau, vals))| {
            let col = |i: usize| median(&vals.iter().filter_map(|v| v[i]).collect::<Vec<_>>());
            AblationRow {
                domain: DomainId(domain),
                tau,
                arm,
                runs: vals.len(),
                median_accuracy: col(0),
                median_macro_f1: col(1),
                median_forgetting: col(2),
            }
        })
        .collect();

    Ok(Report {
        runs,
        arms,
        tau_sweep,
        ablation,
    })
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn tau_label(t: Option<f64>) -> String {
    t.map_or_else(|| "plan".to_string(), |t| t.to_string())
}

fn csv_bytes<I, R>(header: &[String], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Error::Report(format!("writing csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Report(format!("writing csv: {e}")))
}

impl Report {
    pub fn runs_csv(&self) -> Result<Vec<u8>> {
        let header = [
            "run_id",
            "arm",
            "tau",
            "seed",
            "increments",
            "final_accuracy",
            "final_error",
            "final_macro_f1",
            "final_forgetting",
            "bookkeeping_error",
            "bookkeeping_ok",
        ]
        .map(String::from);
        csv_bytes(
            &header,
            self.runs.iter().map(|r| {
                [
                    r.run_id.clone(),
                    r.arm.to_string(),
                    tau_label(r.tau),
                    r.seed.to_string(),
                    r.increments.to_string(),
                    num(r.final_accuracy),
                    num(r.final_accuracy.map(|a| 1.0 - a)),
                    num(r.final_macro_f1),
                    num(r.final_forgetting),
                    format!("{:?}", r.bookkeeping_error),
                    r.bookkeeping_ok().to_string(),
                ]
            }),
        )
    }

    pub fn tau_sweep_csv(&self) -> Result<Vec<u8>> {
        let taus: Vec<Option<f64>> = self
            .tau_sweep
            .first()
            .map(|r| r.errors.iter().map(|e| e.0).collect())
            .unwrap_or_default();
        let mut header = vec!["arm".to_string()];
        header.extend(taus.iter().map(|t| tau_label(*t)));
        header.extend(["argmin_tau".into(), "argmin_position".into()]);
        csv_bytes(
            &header,
            self.tau_sweep.iter().map(|r| {
                let mut row = vec![r.arm.to_string()];
                row.extend(r.errors.iter().map(|e| num(e.1)));
                match r.argmin {
                    Some((t, pos)) => {
                        row.push(tau_label(t));
                        row.push(position_name(pos).into());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
                row
            }),
        )
    }

    pub fn ablation_csv(&self) -> Result<Vec<u8>> {
        let header = [
            "domain",
            "tau",
            "arm",
            "runs",
            "median_accuracy",
            "median_macro_f1",
            "median_forgetting",
        ]
        .map(String::from);
        csv_bytes(
            &header,
            self.ablation.iter().map(|r| {
                [
                    r.domain.to_string(),
                    tau_label(r.tau),
                    r.arm.to_string(),
                    r.runs.to_string(),
                    num(r.median_accuracy),
                    num(r.median_macro_f1),
                    num(r.median_forgetting),
                ]
            }),
        )
    }

    /// Markdown tables; only the first line (the generation time) varies
    /// between identical runs.
    pub fn summary_markdown(&self, generated_unix_secs: u64) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "Generated at unix time {generated_unix_secs}");
        let _ = writeln!(s, "\n# Experiment summary\n");
        let _ = writeln!(s, "{} runs.\n", self.runs.len());

        let _ = writeln!(s, "## Final accuracy by arm\n");
        let _ = writeln!(s, "| arm | tau | runs | median accuracy | median forgetting |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for a in &self.arms {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                a.arm,
                tau_label(a.tau),
                a.runs,
                f(a.median_accuracy),
                f(a.median_forgetting)
            );
        }

        let _ = writeln!(s, "\n## Temperature sweep (median final error)\n");
        if let Some(first) = self.tau_sweep.first() {
            let cols: Vec<String> = first.errors.iter().map(|e| tau_label(e.0)).collect();
            let _ = writeln!(s, "| arm | {} | argmin |", cols.join(" | "));
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(cols.len()));
            for r in &self.tau_sweep {
                let vals: Vec<String> = r.errors.iter().map(|e| f(e.1)).collect();
                let arg = r.argmin.map_or_else(
                    || "-".to_string(),
                    |(t, p)| format!("{} ({})", tau_label(t), position_name(p)),
                );
                let _ = writeln!(s, "| {} | {} | {arg} |", r.arm, vals.join(" | "));
            }
        }

        let _ = writeln!(s, "\n## Per-domain results\n");
        let _ = writeln!(
            s,
            "| domain | tau | arm | runs | median accuracy | median macro F1 | median forgetting |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.ablation {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.domain,
                tau_label(r.tau),
                r.arm,
                r.runs,
                f(r.median_accuracy),
                f(r.median_macro_f1),
                f(r.median_forgetting)
            );
        }

        let _ = writeln!(s, "\n## Loss bookkeeping\n");
        let flagged = self.flagged();
        if flagged.is_empty() {
            let _ = writeln!(
                s,
                "All runs log L_IL equal to the weighted sum of its parts within {BOOKKEEPING_TOLERANCE:e}."
            );
        } else {
            let _ = writeln!(s, "FLAGGED: {} run(s) break the L_IL identity:\n", flagged.len());
            for r in flagged {
                let _ = writeln!(s, "- {} (max gap {:e})", r.run_id, r.bookkeeping_error);
            }
        }
        s
    }

    /// Writes the aggregate CSVs and `summary.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("runs.csv"), &self.runs_csv()?)?;
        write_file(&dir.join("tau_sweep.csv"), &self.tau_sweep_csv()?)?;
        write_file(&dir.join("ablation.csv"), &self.ablation_csv()?)?;
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        write_file(&dir.join("summary.md"), self.summary_markdown(now).as_bytes())
    }
}

fn position_name(p: GridPosition) -> &'static str {
    match p {
        GridPosition::Interior => "interior",
        GridPosition::Boundary => "boundary",
    }
}

/// Recomputes every aggregate from the raw run logs under `dir` and
/// rewrites the tables.
pub fn report(dir: &Path) -> Result<Report> {
    let report = aggregate(&read_runs(dir)?)?;
    report.write(dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
