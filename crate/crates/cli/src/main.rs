use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use consolidate_cli::{
    cmd_case_study, cmd_gradcheck, cmd_importance_stats, cmd_run, cmd_sweep_lambda, output_dir, parse_list,
    CaseKind, CaseOptions, CliError, CliResult, RunConfig, OUTPUT_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "consolidate", version, about = "Continual-learning regularizer benchmarks and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured task stream for every seed and report accuracies.
    Run { config: PathBuf },
    /// Seed-averaged A_avg for each penalty strength.
    SweepLambda {
        config: PathBuf,
        /// Comma-separated values, e.g. 0,1,10,100.
        #[arg(long)]
        lambdas: String,
    },
    /// Closed-form importance case studies on a probe network.
    CaseStudy {
        /// gradient-vanishing or redundant-protection
        kind: String,
        #[arg(long)]
        margin: Option<f64>,
        /// Comma-separated logits.
        #[arg(long, allow_hyphen_values = true)]
        logits: Option<String>,
        /// Number of classes for gradient-vanishing.
        #[arg(long)]
        classes: Option<usize>,
        /// Ground-truth class.
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Head input, comma-separated.
        #[arg(long, default_value = "1,0", allow_hyphen_values = true)]
        h: String,
    },
    /// Finite-difference check of every hand-written gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Added to every analytic gradient entry; used to confirm the check can fail.
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Per-class head importance of a model trained on task 1.
    ImportanceStats {
        config: PathBuf,
        #[arg(long)]
        class: usize,
    },
}

fn env_dir() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)
}

fn config_out(cfg: &RunConfig) -> PathBuf {
    output_dir(env_dir(), cfg.resolve(&cfg.output_dir))
}

fn plain_out() -> PathBuf {
    output_dir(env_dir(), PathBuf::from("out"))
}

fn load(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let out = config_out(&cfg);
            let r = cmd_run(&cfg, &out)?;
            for run in &r.runs {
                println!("seed {}: A_last {:.2}  A_avg {:.2}", run.seed, run.a_last, run.a_avg);
            }
            println!("mean: A_last {:.2}  A_avg {:.2}", r.mean_a_last, r.mean_a_avg);
            println!("reports written to {}", out.display());
        }
        Command::SweepLambda { config, lambdas } => {
            let cfg = load(&config)?;
            let out = config_out(&cfg);
            for p in cmd_sweep_lambda(&cfg, &parse_list(&lambdas)?, &out)? {
                println!("lambda {:>12}  A_avg {:.2}", p.lambda, p.a_avg);
            }
        }
        Command::CaseStudy {
            kind,
            margin,
            logits,
            classes,
            class,
            h,
        } => {
            let opts = CaseOptions {
                margin,
                logits: logits.as_deref().map(parse_list).transpose()?,
                classes,
                class,
                h: parse_list(&h)?,
            };
            let r = cmd_case_study(CaseKind::parse(&kind)?, &opts, &plain_out())?;
            println!("class  z        p        p~       ewc          mas          ewc_dr");
            for k in 0..r.logits.len() {
                println!(
                    "{k:<6} {:<8.3} {:<8.4} {:<8.4} {:<12.4e} {:<12.4e} {:<12.4e}",
                    r.logits[k], r.p[k], r.p_tilde[k], r.omega_ewc[k], r.omega_mas[k], r.omega_ewc_dr[k]
                );
            }
            if !r.flagged.is_empty() {
                println!("redundantly protected by MAS: {:?}", r.flagged);
            }
        }
        Command::Gradcheck { seed, perturb } => {
            let r = cmd_gradcheck(seed, perturb, &plain_out())?;
            for l in &r.results {
                println!(
                    "{:<24} worst relative error {:.3e} ({}[{}]) {}",
                    l.loss.as_str(),
                    l.worst.error,
                    l.worst.block,
                    l.worst.index,
                    if l.passed { "ok" } else { "FAILED" }
                );
            }
            if !r.passed() {
                let failing: Vec<_> = r.results.iter().filter(|l| !l.passed).map(|l| l.worst.block.as_str()).collect();
                return Err(CliError::Runtime(format!("gradient check failed in {}", failing.join(", "))));
            }
        }
        Command::ImportanceStats { config, class } => {
            let cfg = load(&config)?;
            let s = cmd_importance_stats(&cfg, class, &config_out(&cfg))?;
            println!("class {} ({} training samples, seed {})", s.class, s.samples, s.seed);
            for m in &s.methods {
                let cells: Vec<String> = m.row_sums.iter().map(|(c, v)| format!("{c}:{v:.4e}")).collect();
                println!("{:<8} {}", m.method, cells.join("  "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
