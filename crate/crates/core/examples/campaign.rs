//! Small end-to-end campaign: simulate, estimate, fit and report.
//!
//! `cargo run --release --example campaign [out_dir]`

use std::f64::consts::FRAC_PI_2;
use std::path::PathBuf;

use frfkit::campaign::{run_all, CampaignConfig, Configurations, EstimatorEntry, Method};

fn main() -> frfkit::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("campaign-small"));
    let mut cfg = CampaignConfig {
        n_experiments: 6,
        configurations: Configurations::List(vec![vec![-FRAC_PI_2, 0.0, 0.0], vec![-1.0, 0.6, -0.5]]),
        ..CampaignConfig::default()
    };
    let defaults = cfg.estimators.clone();
    let pick = |m: Method, n_e: usize| defaults.iter().find(|e| e.method == m && e.n_e == n_e).cloned();
    cfg.estimators = [(Method::Log, 3), (Method::JioLrm, 3), (Method::LrmMimo, 3), (Method::JioLrm, 1)]
        .into_iter()
        .filter_map(|(m, n)| pick(m, n))
        .collect();
    let mut log6 = EstimatorEntry::new(Method::Log, 6);
    log6.m = Some(2);
    cfg.estimators.insert(0, log6);
    cfg.graybox.options.n_starts = 2;

    for s in run_all(&cfg, &out)? {
        println!("{}: {} done, {} failed", s.stage, s.completed.len(), s.failures.len());
    }
    println!("\namplitude bias:\n{}", std::fs::read_to_string(out.join("report/amplitude_bias.csv"))?);
    println!("parameter bias:\n{}", std::fs::read_to_string(out.join("report/parameter_bias.csv"))?);
    Ok(())
}
