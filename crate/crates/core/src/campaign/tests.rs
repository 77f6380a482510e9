use std::fs;

use super::*;
use crate::{CMatrix, FrfLine, LineStatus};

/// Short records and few lines so a full pipeline runs in seconds.
fn small() -> CampaignConfig {
    let mut cfg = CampaignConfig::default();
    cfg.multisine.period_samples = 500;
    cfg.multisine.n_lines = 200;
    cfg.n_experiments = 3;
    cfg.configurations = Configurations::List(vec![vec![-PI / 2.0, 0.0, 0.0], vec![-1.2, 0.4, -0.3]]);
    let mut jio = EstimatorEntry::new(Method::JioLrm, 1);
    jio.fit = true;
    let mut log = EstimatorEntry::new(Method::Log, 3);
    log.m = Some(1);
    cfg.estimators = vec![log, EstimatorEntry::new(Method::H1, 3), jio, EstimatorEntry::new(Method::LrmMiso, 3)];
    cfg.graybox.options.n_starts = 1;
    cfg
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_config_is_valid_and_round_trips() {
    let cfg = CampaignConfig::default();
    cfg.validate().unwrap();
    let text = cfg.to_toml().unwrap();
    let back = CampaignConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml().unwrap(), text);
}

#[test]
fn shipped_config_matches_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    assert_eq!(CampaignConfig::read(&path).unwrap(), CampaignConfig::default());
}

#[test]
fn unknown_keys_and_wrong_schema_are_rejected() {
    let text = CampaignConfig::default().to_toml().unwrap();
    let extra = format!("bogus = 1\n{text}");
    assert!(CampaignConfig::from_toml(&extra).is_err());
    let old = text.replacen("schema_version = 1", "schema_version = 0", 1);
    assert!(matches!(CampaignConfig::from_toml(&old), Err(Error::Config(_))));
}

#[test]
fn explicit_configuration_list_parses() {
    let mut cfg = CampaignConfig::default();
    cfg.configurations = Configurations::List(vec![vec![-1.0, 0.5, 0.25]]);
    let back = CampaignConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back.configurations.resolve(), vec![vec![-1.0, 0.5, 0.25]]);
}

#[test]
fn non_finite_configuration_is_rejected() {
    let mut cfg = small();
    cfg.configurations = Configurations::List(vec![vec![f64::NAN, 0.0, 0.0]]);
    assert!(cfg.validate().is_err());
}

#[test]
fn estimator_preconditions() {
    let n_u = 3;
    assert!(EstimatorEntry::new(Method::H1, 3).validate(n_u, 12).is_ok());
    assert!(EstimatorEntry::new(Method::H1, 4).validate(n_u, 12).is_err());
    assert!(EstimatorEntry::new(Method::Lpm, 1).validate(n_u, 12).is_ok());
    assert!(EstimatorEntry::new(Method::Lpm, 13).validate(n_u, 12).is_err());
    let mut log = EstimatorEntry::new(Method::Log, 12);
    log.m = Some(4);
    assert!(log.validate(n_u, 12).is_ok());
    log.m = Some(3);
    assert!(log.validate(n_u, 12).is_err());
    let mut lrm = EstimatorEntry::new(Method::LrmMimo, 3);
    lrm.m = Some(1);
    assert!(lrm.validate(n_u, 12).is_err());

    let mut cfg = CampaignConfig::default();
    cfg.estimators.push(cfg.estimators[0].clone());
    assert!(cfg.validate().is_err());
}

#[test]
fn random_configurations_are_reproducible_and_bounded() {
    let r = RandomConfigurations {
        count: 50,
        seed: 3,
        center: vec![1.0, -1.0],
        half_range: vec![0.5, 0.0],
    };
    let a = Configurations::Random(r.clone()).resolve();
    assert_eq!(a, Configurations::Random(r.clone()).resolve());
    assert!(a.iter().all(|q| (q[0] - 1.0).abs() < 0.5 && q[1] == -1.0));
    let b = Configurations::Random(RandomConfigurations { seed: 4, ..r }).resolve();
    assert_ne!(a, b);
}

fn bias(method: Method, n_e: usize, mean: f64) -> CellBias {
    CellBias {
        cell: String::new(),
        method,
        n_e,
        bias: BiasReport {
            method_tag: String::new(),
            per_configuration: vec![mean],
            mean,
            lines_used: 1,
            lines_excluded: 0,
        },
    }
}

#[test]
fn bias_table_rows_descend_in_n_e() {
    let cells = vec![
        bias(Method::JioLrm, 1, 3.0),
        bias(Method::Log, 12, 1.0),
        bias(Method::Log, 3, 2.0),
        bias(Method::JioLrm, 12, 0.5),
    ];
    let t = amplitude_bias_table(&cells, 3);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "n_e,M,LOG,JIO_LRM");
    assert_eq!(lines[1], "12,4,1.000000e0,5.000000e-1");
    assert_eq!(lines[2], "3,1,2.000000e0,");
    assert_eq!(lines[3], "1,,,3.000000e0");
    let single = amplitude_bias_table(&cells[..1], 3);
    assert_eq!(single.lines().next().unwrap(), "n_e,M,JIO_LRM");
}

#[test]
fn curve_table_has_one_row_per_line() {
    let g = |v: f64| CMatrix::from_element(2, 2, crate::C64::new(v, v));
    let truth = FrfEstimate::from_matrices(vec![1.0, 2.0, 3.0], vec![g(1.0), g(2.0), g(3.0)], "truth", 0);
    let mut est = truth.clone();
    est.lines[1] = FrfLine::invalid(2, 2, LineStatus::SingularInput);
    let t = curve_table(&truth, &[("a".into(), est)], 1, 0);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "freq_hz,abs_truth,abs_a,arg_truth,arg_a");
    assert_eq!(lines[2].split(',').nth(2), Some(""));
    assert_eq!(lines[1].split(',').count(), 5);
}

#[test]
fn fit_is_refused_when_most_lines_are_invalid() {
    let cfg = small();
    let q = vec![-PI / 2.0, 0.0, 0.0];
    let mut est = truth(&cfg, &q).unwrap();
    let n = est.n_lines();
    for line in est.lines.iter_mut().take(n / 2 + 1) {
        *line = FrfLine::invalid(3, 3, LineStatus::SingularInput);
    }
    let err = fit_cell(&cfg, 0, &[q], &[est]).unwrap_err();
    assert!(err.to_string().contains("refused"));
}

#[test]
fn pipeline_outputs_are_counted_reproducible_and_seeded() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for s in run_all(&cfg, a.path()).unwrap() {
        assert!(s.ok(), "{s:?}");
    }
    let files = tree(a.path());
    let csv = files.keys().filter(|p| p.starts_with("simulate") && p.extension().is_some_and(|e| e == "csv"));
    assert_eq!(csv.count(), 6);
    let truths = files.keys().filter(|p| p.ends_with("truth.json")).count();
    assert_eq!(truths, 2);
    assert!(files.contains_key(Path::new("fit/JIO_LRM_ne1.json")));
    let table = String::from_utf8(files[Path::new("report/amplitude_bias.csv")].clone()).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(files.keys().filter(|p| p.starts_with("report/curves")).count(), 18);

    run_all(&cfg, b.path()).unwrap();
    assert!(files == tree(b.path()), "same seed must give identical trees");

    let other = CampaignConfig { seed: 99, ..cfg };
    run_simulate(&other, c.path()).unwrap();
    let rel = Path::new("simulate/c0");
    assert_eq!(
        fs::read(a.path().join(rel).join("truth.json")).unwrap(),
        fs::read(c.path().join(rel).join("truth.json")).unwrap()
    );
    assert_ne!(
        fs::read(a.path().join(rel).join("e0.csv")).unwrap(),
        fs::read(c.path().join(rel).join("e0.csv")).unwrap()
    );
}

#[test]
fn failed_configuration_is_listed_and_skipped() {
    let mut cfg = small();
    cfg.estimators.truncate(2);
    let dir = tempfile::tempdir().unwrap();
    // a directory in place of a record makes that configuration fail
    fs::create_dir_all(dir.path().join("simulate/c1/e0.csv")).unwrap();
    let sim = run_simulate(&cfg, dir.path()).unwrap();
    assert_eq!(sim.completed, vec!["c0".to_string()]);
    assert_eq!(sim.failures.len(), 1);
    assert_eq!(sim.failures[0].scope, "c1");
    let est = run_estimate(&cfg, dir.path()).unwrap();
    assert!(est.ok());
    assert_eq!(est.completed.len(), 2);
}

#[test]
fn estimate_without_simulation_reports_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_estimate(&small(), dir.path()), Err(Error::MissingInput(_))));
}
