//! Runs fine-tuning, EWC and EWC-DR on the reference stream and prints A_avg.
//!
//! `cargo run --release -p consolidate --example reference_benchmark [lambda] [seeds]`

use consolidate::metrics::{a_avg, a_last};
use consolidate::scenario::reference_stream;
use consolidate::trainer::run_stream;
use consolidate::{Method, TrainConfig};

fn main() -> consolidate::Result<()> {
    let mut args = std::env::args().skip(1);
    let lambda: f64 = args.next().map_or(100.0, |s| s.parse().expect("lambda"));
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seed count"));
    let methods = [
        ("finetune", None),
        ("ewc", Some(Method::Ewc)),
        ("ewc_dr", Some(Method::EwcDr)),
        ("mas", Some(Method::Mas)),
        ("online_ewc", Some(Method::OnlineEwc)),
        ("si", Some(Method::Si)),
    ];
    for (name, method) in methods {
        let mut avg = Vec::new();
        let mut last = Vec::new();
        for seed in 1..=seeds {
            let stream = reference_stream(seed)?;
            let cfg = TrainConfig {
                lambda,
                method,
                seed,
                ..TrainConfig::default()
            };
            let (_, m) = run_stream(&stream, &cfg)?;
            avg.push(a_avg(&m)?);
            last.push(a_last(&m)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{name:>10}  A_avg {:6.2}  A_last {:6.2}  per-seed A_avg {:?}",
            mean(&avg),
            mean(&last),
            avg.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
