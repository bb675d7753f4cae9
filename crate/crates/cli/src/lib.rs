//! Experiment commands behind the `consolidate` binary. Every command writes
//! its reports atomically and returns the in-memory result so tests can check
//! it without parsing files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use consolidate::analysis::{
    case_gradient_vanishing, case_redundant_protection, emit_heatmap_svg, probe_network, table_a_statistics,
    CaseStudyReport, ImportanceHeatmap, COMPARED,
};
use consolidate::gradcheck::{run_gradcheck, GradcheckReport, DEFAULT_INSTANCES};
use consolidate::importance::estimate;
use consolidate::io::write_atomic;
use consolidate::metrics::{MatrixReport, Weighting};
use consolidate::trainer::{run_stream, ContinualState};
use consolidate::{Execution, Sample, Tensor1};
use serde::{Deserialize, Serialize};

pub mod config;

pub use config::RunConfig;

/// Overrides the output directory of every command.
pub const OUTPUT_DIR_ENV: &str = "CONSOLIDATE_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or config; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<consolidate::Error> for CliError {
    fn from(e: consolidate::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// `$CONSOLIDATE_OUTPUT_DIR` if set, else `fallback`.
pub fn output_dir(env_value: Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    env_value.filter(|p| !p.as_os_str().is_empty()).unwrap_or(fallback)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub a_last: f64,
    pub a_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub lambda: f64,
    pub num_tasks: usize,
    pub runs: Vec<SeedResult>,
    pub mean_a_last: f64,
    pub mean_a_avg: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = v.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    s / n as f64
}

/// Trains every seed (on separate threads) and returns results in seed order.
fn run_seeds(cfg: &RunConfig, lambda: f64) -> CliResult<Vec<(u64, MatrixReport)>> {
    let mut train = cfg.train.clone();
    train.lambda = lambda;
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let train = &train;
                scope.spawn(move || -> CliResult<(u64, MatrixReport)> {
                    let stream = cfg.stream(seed)?;
                    let tc = train.to_train_config(seed)?;
                    let (_, m) = run_stream(&stream, &tc)?;
                    Ok((seed, MatrixReport::from_matrix(&m, Weighting::TaskBalanced)?))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| CliError::Runtime("worker thread panicked".into()))?)
            .collect()
    })
}

fn summary_text(report: &RunReport, per_seed: &[(u64, MatrixReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method {}  lambda {}  tasks {}", report.method, report.lambda, report.num_tasks);
    for (seed, m) in per_seed {
        let _ = writeln!(s, "\nseed {seed}: A_last {:.2}  A_avg {:.2}", m.a_last, m.a_avg);
        for (t, row) in m.table.iter().enumerate() {
            let _ = writeln!(s, "  t={}  {}", t + 1, row.join("  "));
        }
    }
    let _ = writeln!(
        s,
        "\nmean over {} seed(s): A_last {:.2}  A_avg {:.2}",
        report.runs.len(),
        report.mean_a_last,
        report.mean_a_avg
    );
    s
}

/// Runs the configured stream for every seed. Writes `accuracy_seed<N>.csv`,
/// `report.json` and `summary.txt` into `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> CliResult<RunReport> {
    cfg.validate()?;
    let per_seed = run_seeds(cfg, cfg.train.lambda)?;
    let runs: Vec<SeedResult> = per_seed
        .iter()
        .map(|(seed, m)| SeedResult {
            seed: *seed,
            a_last: m.a_last,
            a_avg: m.a_avg,
        })
        .collect();
    let report = RunReport {
        method: cfg.method()?.map_or("none".into(), |m| m.as_str().into()),
        lambda: cfg.train.lambda,
        num_tasks: per_seed.first().map_or(0, |(_, m)| m.matrix.len()),
        mean_a_last: mean(runs.iter().map(|r| r.a_last)),
        mean_a_avg: mean(runs.iter().map(|r| r.a_avg)),
        runs,
    };
    for (seed, m) in &per_seed {
        let mut csv = String::from("t");
        for j in 1..=m.matrix.len() {
            let _ = write!(csv, ",a_{j}");
        }
        csv.push('\n');
        for (t, row) in m.matrix.iter().enumerate() {
            let _ = write!(csv, "{}", t + 1);
            for j in 0..m.matrix.len() {
                match row.get(j) {
                    Some(v) => {
                        let _ = write!(csv, ",{v}");
                    }
                    None => csv.push(','),
                }
            }
            csv.push('\n');
        }
        write_text(&out.join(format!("accuracy_seed{seed}.csv")), &csv)?;
    }
    write_text(&out.join("report.json"), &to_json(&report)?)?;
    write_text(&out.join("summary.txt"), &summary_text(&report, &per_seed))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub a_avg: f64,
}

/// One seed-averaged run per λ; writes `lambda_sweep.csv` sorted by λ.
pub fn cmd_sweep_lambda(cfg: &RunConfig, lambdas: &[f64], out: &Path) -> CliResult<Vec<SweepPoint>> {
    cfg.validate()?;
    if lambdas.is_empty() {
        return Err(CliError::Usage("--lambdas needs at least one value".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::Usage(format!("lambda must be finite and >= 0, got {bad}")));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let results: Vec<CliResult<SweepPoint>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sorted
            .iter()
            .map(|&lambda| {
                scope.spawn(move || {
                    let runs = run_seeds(cfg, lambda)?;
                    Ok(SweepPoint {
                        lambda,
                        a_avg: mean(runs.iter().map(|(_, m)| m.a_avg)),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("worker thread panicked".into()))))
            .collect()
    });
    let points = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut csv = String::from("lambda,a_avg\n");
    for p in &points {
        let _ = writeln!(csv, "{},{}", p.lambda, p.a_avg);
    }
    write_text(&out.join("lambda_sweep.csv"), &csv)?;
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    GradientVanishing,
    RedundantProtection,
}

impl CaseKind {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "gradient-vanishing" => Ok(CaseKind::GradientVanishing),
            "redundant-protection" => Ok(CaseKind::RedundantProtection),
            other => Err(CliError::Usage(format!(
                "unknown case study '{other}' (expected gradient-vanishing or redundant-protection)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseKind::GradientVanishing => "gradient-vanishing",
            CaseKind::RedundantProtection => "redundant-protection",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOptions {
    pub margin: Option<f64>,
    pub logits: Option<Vec<f64>>,
    pub classes: Option<usize>,
    pub class: usize,
    pub h: Vec<f64>,
}

impl Default for CaseOptions {
    fn default() -> Self {
        Self {
            margin: None,
            logits: None,
            classes: None,
            class: 0,
            h: vec![1.0, 0.0],
        }
    }
}

pub const DEFAULT_MARGIN: f64 = 6.0;
pub const DEFAULT_CASE_CLASSES: usize = 10;
pub const DEFAULT_LOGITS: [f64; 3] = [5.0, 1.0, -8.0];

/// Parses a comma-separated list of numbers.
pub fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("'{v}' is not a number")))
        })
        .collect()
}

/// Writes `case_<kind>.csv` and one head-importance heatmap per estimator.
pub fn cmd_case_study(kind: CaseKind, opts: &CaseOptions, out: &Path) -> CliResult<CaseStudyReport> {
    let usage = |e: consolidate::Error| CliError::Usage(e.to_string());
    let h = Tensor1::new(opts.h.clone());
    let report = match kind {
        CaseKind::GradientVanishing => {
            if opts.logits.is_some() {
                return Err(CliError::Usage("--logits applies to redundant-protection only".into()));
            }
            let classes = opts.classes.unwrap_or(DEFAULT_CASE_CLASSES);
            if opts.class >= classes {
                return Err(CliError::Usage(format!("--class {} outside {classes} classes", opts.class)));
            }
            case_gradient_vanishing(&h, opts.margin.unwrap_or(DEFAULT_MARGIN), opts.class, classes).map_err(usage)?
        }
        CaseKind::RedundantProtection => {
            if opts.margin.is_some() || opts.classes.is_some() {
                return Err(CliError::Usage("--margin and --classes apply to gradient-vanishing only".into()));
            }
            let z = Tensor1::new(opts.logits.clone().unwrap_or_else(|| DEFAULT_LOGITS.to_vec()));
            case_redundant_protection(&z, opts.class, &h).map_err(usage)?
        }
    };
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&out.join(format!("case_{}.csv", kind.as_str())), &buf)?;

    let z = Tensor1::new(report.logits.clone());
    let net = probe_network(&z, &h)?;
    let sample = Sample {
        features: h,
        label: report.ground_truth,
    };
    for m in COMPARED {
        let omega = estimate(m, &net, std::slice::from_ref(&sample), Execution::Sequential)?;
        let hm = ImportanceHeatmap::from_map(&omega)?;
        emit_heatmap_svg(&hm, &out.join(format!("case_{}_{}.svg", kind.as_str(), m.as_str())))?;
    }
    Ok(report)
}

/// Runs the finite-difference suite and writes `gradcheck.json`.
pub fn cmd_gradcheck(seed: u64, perturb: f64, out: &Path) -> CliResult<GradcheckReport> {
    let report = run_gradcheck(seed, DEFAULT_INSTANCES, perturb)?;
    write_text(&out.join("gradcheck.json"), &to_json(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub method: String,
    /// `(original class id, head row sum)` in head order.
    pub row_sums: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStats {
    pub seed: u64,
    pub class: usize,
    pub samples: usize,
    pub methods: Vec<ClassStats>,
}

impl ImportanceStats {
    pub fn row(&self, method: consolidate::Method) -> Option<&[(usize, f64)]> {
        self.methods
            .iter()
            .find(|s| s.method == method.as_str())
            .map(|s| s.row_sums.as_slice())
    }
}

/// Trains task 1 of the first seed without consolidation, then reports the
/// per-class head importance of each estimator on the training samples of
/// `class` (an original class id that must belong to task 1). Writes
/// `importance_stats.csv` and one heatmap per estimator.
pub fn cmd_importance_stats(cfg: &RunConfig, class: usize, out: &Path) -> CliResult<ImportanceStats> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let stream = cfg.stream(seed)?;
    let task = stream.task(0).expect("validated stream has a first task");
    let Some(pos) = task.classes().iter().position(|&c| c == class) else {
        return Err(CliError::Usage(format!(
            "class {class} is not part of task 1 (classes {:?})",
            task.classes()
        )));
    };
    let tc = cfg.train.to_train_config(seed)?;
    let mut state = ContinualState::new(task.test().feature_dim(), stream.len(), &tc)?;
    state.train_task(&stream, 0, &tc)?;
    let head_class = task.head_classes().start + pos;
    let data: Vec<Sample> = stream.train_split(0).expect("task 1 exists").of_class(head_class);
    let table = table_a_statistics(&state.net, &data, tc.execution)?;

    let mut csv = String::from("method,class,row_sum\n");
    let mut methods = Vec::new();
    for ((m, sums), omega) in table.rows.iter().zip(&table.maps) {
        let row_sums: Vec<(usize, f64)> = sums.iter().enumerate().map(|(k, &v)| (task.classes()[k], v)).collect();
        for (c, v) in &row_sums {
            let _ = writeln!(csv, "{},{c},{v}", m.label());
        }
        let mut hm = ImportanceHeatmap::from_map(omega)?;
        hm.class_labels = task.classes().iter().map(|c| format!("class {c}")).collect();
        emit_heatmap_svg(&hm, &out.join(format!("importance_{}.svg", m.as_str())))?;
        methods.push(ClassStats {
            method: m.as_str().into(),
            row_sums,
        });
    }
    write_text(&out.join("importance_stats.csv"), &csv)?;
    Ok(ImportanceStats {
        seed,
        class,
        samples: data.len(),
        methods,
    })
}
