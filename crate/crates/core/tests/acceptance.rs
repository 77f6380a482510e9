//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! Arguments select criteria by number (`cargo test --test acceptance -- 5 6`).

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use frfkit::campaign::{self, CampaignConfig, EstimatorEntry, Method};
use frfkit::classical::{self, ExperimentBlocks};
use frfkit::graybox::{self, FitData, FitOptions, WeightScheme};
use frfkit::local::{self, LocalFitConfig, Parametrization};
use frfkit::matfun;
use frfkit::metrics;
use frfkit::plant::{truth_frf, PlantModel};
use frfkit::sigproc::{design_multisine, to_spectral, AmplitudeProfile, LineSelection, MultisineSpec, SpectralRecord, TimeRecord};
use frfkit::{linalg, CMatrix, FrfEstimate, C64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn unit_phase(rng: &mut ChaCha8Rng) -> C64 {
    C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))
}

fn rel(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Single experiment with `Y_k = G_k U_k`, random unit-modulus inputs.
fn record(rng: &mut ChaCha8Rng, g: &[CMatrix]) -> SpectralRecord {
    let n_u = g[0].ncols();
    let u: Vec<CMatrix> = g.iter().map(|_| CMatrix::from_fn(n_u, 1, |_, _| unit_phase(rng))).collect();
    let y = g.iter().zip(&u).map(|(g, u)| g * u).collect();
    let freqs = (1..=g.len()).map(|k| k as f64).collect();
    SpectralRecord::new(freqs, u, y, None).unwrap()
}

fn desk_spec(period_samples: usize, n_lines: usize) -> MultisineSpec {
    MultisineSpec {
        sample_rate: 500.0,
        period_samples,
        f_min: 2.0,
        f_max: 50.0,
        n_lines,
        line_selection: LineSelection::LogSpacedOdd,
        amplitude_profile: AmplitudeProfile::Uniform(0.05),
        phase_seed: 11,
        n_inputs: 3,
        orthogonal_blocks: true,
        offset_sine: None,
    }
}

/// Open-loop H1 on the exact periodic steady state of the sampled
/// linearization.
fn criterion_1() -> Outcome {
    let model = PlantModel::default_three_axis();
    let q = [-PI / 2.0, 0.0, 0.0];
    let spec = desk_spec(1000, 60);
    let ts = 1.0 / spec.sample_rate;
    let dm = model.linearize(&q).unwrap().discretize(ts);
    let n = spec.period_samples;
    let nx = dm.phi.nrows();
    let mut phi_n = DMatrix::<f64>::identity(nx, nx);
    for _ in 0..n {
        phi_n = &dm.phi * phi_n;
    }
    let lu = (DMatrix::<f64>::identity(nx, nx) - phi_n).lu();
    let records: Vec<SpectralRecord> = design_multisine(&spec, 3)
        .unwrap()
        .iter()
        .map(|ex| {
            let u = ex.synthesize();
            // response of one period from rest, then x0 = (I - Phi^N)^-1 x_N
            let mut x = DVector::zeros(nx);
            for k in 0..n {
                x = dm.step(&x, &u.column(k).into_owned());
            }
            let mut x = lu.solve(&x).unwrap();
            let mut y = DMatrix::zeros(3, n);
            for k in 0..n {
                y.set_column(k, &(&dm.c * &x));
                x = dm.step(&x, &u.column(k).into_owned());
            }
            let rec = TimeRecord {
                u,
                y,
                r: None,
                sample_rate: spec.sample_rate,
                period_samples: n,
                n_periods: 1,
                settle_periods: 0,
            };
            to_spectral(&rec, &spec).unwrap()
        })
        .collect();
    let rec = SpectralRecord::concat(&records).unwrap();
    let h1 = classical::h1_estimate(&rec, &ExperimentBlocks::contiguous(3, 3).unwrap()).unwrap();
    let truth = truth_frf(&model, &q, &rec.freqs, Some(ts)).unwrap();
    let mut worst = 0.0f64;
    for (e, t) in h1.lines.iter().zip(&truth.lines) {
        for (a, b) in e.g.iter().zip(t.g.iter()) {
            worst = worst.max((a - b).norm() / b.norm());
        }
    }
    outcome(
        worst < 1e-6 && h1.valid_count() == h1.n_lines(),
        format!("max elementwise relative error {worst:.2e} over {} lines (< 1e-6)", h1.n_lines()),
    )
}

/// Constructed local polynomial and local rational data.
fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40;
    let rand_m = |rng: &mut ChaCha8Rng, s: f64| CMatrix::from_fn(2, 2, |_, _| c(rng.random_range(-s..s), rng.random_range(-s..s)));
    let (p0, p1, p2) = (rand_m(&mut rng, 1.0), rand_m(&mut rng, 0.05), rand_m(&mut rng, 0.002));
    let poly: Vec<CMatrix> = (0..n)
        .map(|k| {
            let r = k as f64;
            &p0 + &p1 * c(r, 0.0) + &p2 * c(r * r, 0.0)
        })
        .collect();
    // common denominator with roots well off the real axis
    let rat: Vec<CMatrix> = (0..n)
        .map(|k| {
            let r = k as f64;
            let d = c(1.0 + 0.01 * r * r, 0.2 * r);
            (&p0 + &p1 * c(r, 0.0) + &p2 * c(r * r, 0.0)) / d
        })
        .collect();
    let worst = |est: &FrfEstimate, g: &[CMatrix]| {
        est.lines
            .iter()
            .zip(g)
            .map(|(l, g)| if l.is_valid() { rel(&l.g, g) } else { f64::INFINITY })
            .fold(0.0, f64::max)
    };
    let lpm = local::lpm_fit(&record(&mut rng, &poly), &LocalFitConfig::default()).unwrap();
    let rec = record(&mut rng, &rat);
    let miso = local::lrm_miso_fit(&rec, &LocalFitConfig::default()).unwrap();
    let mimo = local::lrm_mimo_fit(&rec, &LocalFitConfig::default()).unwrap();
    let e = [worst(&lpm, &poly), worst(&miso, &rat), worst(&mimo, &rat)];
    outcome(
        e.iter().all(|&v| v < 1e-8),
        format!("max relative error LPM {:.1e}, LRM-MISO {:.1e}, LRM-MIMO {:.1e} (< 1e-8)", e[0], e[1], e[2]),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g: Vec<CMatrix> = (0..30)
        .map(|_| CMatrix::from_fn(3, 3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
        .collect();
    let records: Vec<SpectralRecord> = (0..3).map(|_| record(&mut rng, &g)).collect();
    let rec = SpectralRecord::concat(&records).unwrap();
    let blocks = ExperimentBlocks::contiguous(3, 3).unwrap();
    let log = classical::log_estimate(&rec, &blocks).unwrap();
    let h1 = classical::h1_estimate(&rec, &blocks).unwrap();
    let d_h1 = log.lines.iter().zip(&h1.lines).map(|(a, b)| (&a.g - &b.g).norm()).fold(0.0, f64::max);

    let scalar = |v: C64| CMatrix::from_element(1, 1, v);
    let avg = classical::log_average(&[scalar(c(2.0, 0.0)), scalar(c(8.0, 0.0))]).unwrap().g[(0, 0)];
    let deg = PI / 180.0;
    let wrap = classical::log_average(&[scalar(C64::from_polar(1.0, 170.0 * deg)), scalar(C64::from_polar(1.0, -170.0 * deg))])
        .unwrap()
        .g[(0, 0)];
    let phase = wrap.arg().abs() / deg;
    let pass = d_h1 < 1e-10 && (avg - c(4.0, 0.0)).norm() < 1e-12 && (phase - 180.0).abs() < 1e-9 && (wrap.norm() - 1.0).abs() < 1e-12;
    outcome(
        pass,
        format!("|LOG - H1| {d_h1:.1e}; {{2, 8}} -> {:.12}; {{+170, -170}} deg -> {phase:.9} deg", avg.re),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let diag = |v: &[C64]| CMatrix::from_diagonal(&DVector::from_column_slice(v));
    let basis = |rng: &mut ChaCha8Rng, n: usize| {
        CMatrix::identity(n, n) + CMatrix::from_fn(n, n, |_, _| c(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)))
    };
    let (mut e_res, mut e_trip, mut e_sim) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let n = 1 + i % 6;
        let a = CMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let e = matfun::eig(&a).unwrap();
        e_res = e_res.max((&a * &e.vectors - &e.vectors * diag(&e.values)).norm() / a.norm());

        let v = basis(&mut rng, n);
        let lambda: Vec<C64> = (0..n).map(|_| c(rng.random_range(0.2..3.0), rng.random_range(-2.0..2.0))).collect();
        let b = linalg::right_divide(&(&v * diag(&lambda)), &v).unwrap();
        let log_b = matfun::mat_log(&b).unwrap();
        e_trip = e_trip.max(rel(&matfun::mat_exp(&log_b).unwrap(), &b));

        let s = basis(&mut rng, n);
        let lhs = matfun::mat_log(&linalg::right_divide(&(&s * &b), &s).unwrap()).unwrap();
        let rhs = linalg::right_divide(&(&s * &log_b), &s).unwrap();
        e_sim = e_sim.max(rel(&lhs, &rhs));
    }
    outcome(
        e_res < 1e-8 && e_trip < 1e-8 && e_sim < 1e-7,
        format!("eig residual {e_res:.1e} (< 1e-8), exp(log A) {e_trip:.1e} (< 1e-8), similarity {e_sim:.1e} (< 1e-7)"),
    )
}

/// Simulated campaign data for one noise seed.
struct SeedRun {
    cfg: CampaignConfig,
    qs: Vec<Vec<f64>>,
    truths: Vec<FrfEstimate>,
    spectra: Vec<SpectralRecord>,
}

const SEEDS_TABLE_I: u64 = 20;
const SEEDS_TABLE_II: u64 = 10;

fn seed_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..SEEDS_TABLE_I)
            .map(|s| {
                let cfg = CampaignConfig { seed: 1 + s, ..CampaignConfig::default() };
                let excitations = cfg.excitations().unwrap();
                let qs = cfg.configurations.resolve();
                let (truths, spectra) = qs
                    .par_iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let records = campaign::simulate_configuration(&cfg, i, q, &excitations).unwrap();
                        (campaign::truth(&cfg, q).unwrap(), campaign::spectra(&cfg, &records).unwrap())
                    })
                    .unzip();
                SeedRun { cfg, qs, truths, spectra }
            })
            .collect()
    })
}

fn entry(cfg: &CampaignConfig, method: Method, n_e: usize) -> EstimatorEntry {
    cfg.estimators
        .iter()
        .find(|e| e.method == method && e.n_e == n_e)
        .cloned()
        .unwrap_or_else(|| panic!("default campaign lacks {method:?} n_e = {n_e}"))
}

fn cell_estimates(run: &SeedRun, method: Method, n_e: usize) -> Vec<FrfEstimate> {
    let e = entry(&run.cfg, method, n_e);
    run.spectra.iter().map(|rec| campaign::estimate_cell(&e, rec).unwrap()).collect()
}

fn amplitude_bias(run: &SeedRun, estimates: &[FrfEstimate]) -> f64 {
    let w: Vec<_> = run
        .truths
        .iter()
        .zip(&run.qs)
        .map(|(t, q)| campaign::bias_weights(&run.cfg, t, q).unwrap())
        .collect();
    metrics::frf_amplitude_bias(&run.truths, estimates, &w).unwrap().mean
}

fn share(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

fn criterion_5() -> Outcome {
    let runs = seed_runs();
    let cells = [(Method::JioLrm, 3), (Method::LrmMimo, 3), (Method::LrmMiso, 3), (Method::Log, 12), (Method::Log, 3)];
    let mut hits = [0usize; 3];
    let mut sums = [0.0; 5];
    for (s, run) in runs.iter().enumerate() {
        let b: Vec<f64> = cells.iter().map(|&(m, n)| amplitude_bias(run, &cell_estimates(run, m, n))).collect();
        hits[0] += (b[0] < b[1]) as usize;
        hits[1] += (b[1] < b[2]) as usize;
        hits[2] += (b[3] < b[4]) as usize;
        sums.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
        eprintln!(
            "  seed {s:2}: JIO-LRM {:.2}  MIMO {:.2}  MISO {:.2}  LOG M=4 {:.2}  LOG M=1 {:.2}",
            b[0], b[1], b[2], b[3], b[4]
        );
    }
    let n = runs.len();
    let f: Vec<f64> = hits.iter().map(|&h| share(h, n)).collect();
    let m: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    outcome(
        f.iter().all(|&v| v >= 0.8),
        format!(
            "{n} seeds x {} configurations: JIO-LRM < MIMO-LRM in {:.0}%, MIMO-LRM < MISO-LRM in {:.0}%, LOG(M=4) < LOG(M=1) in {:.0}% (>= 80%); mean bias JIO {:.2} MIMO {:.2} MISO {:.2} LOG4 {:.2} LOG1 {:.2}",
            runs[0].qs.len(),
            100.0 * f[0],
            100.0 * f[1],
            100.0 * f[2],
            m[0],
            m[1],
            m[2],
            m[3],
            m[4]
        ),
    )
}

fn parameter_bias(run: &SeedRun, method: Method, n_e: usize, cell: usize) -> f64 {
    let est = cell_estimates(run, method, n_e);
    let fit = campaign::fit_cell(&run.cfg, cell, &run.qs, &est).unwrap();
    metrics::parameter_bias(&run.cfg.plant.theta.free(), &fit.theta_hat.free()).unwrap().mean
}

fn criterion_6() -> Outcome {
    let runs = &seed_runs()[..SEEDS_TABLE_II as usize];
    let mut hits = [0usize; 2];
    let mut sums = [0.0; 3];
    for (s, run) in runs.iter().enumerate() {
        let b = [
            parameter_bias(run, Method::Log, 12, 0),
            parameter_bias(run, Method::JioLrm, 12, 1),
            parameter_bias(run, Method::JioLrm, 1, 2),
        ];
        hits[0] += (b[1] <= b[0]) as usize;
        hits[1] += (b[1] < b[2]) as usize;
        sums.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
        eprintln!(
            "  seed {s:2}: parameter bias LOG(12) {:.2}%  JIO-LRM(12) {:.2}%  JIO-LRM(1) {:.2}%",
            100.0 * b[0],
            100.0 * b[1],
            100.0 * b[2]
        );
    }
    let n = runs.len();
    let (f0, f1) = (share(hits[0], n), share(hits[1], n));
    outcome(
        f0 >= 0.8 && f1 >= 0.8,
        format!(
            "{n} seeds: JIO-LRM <= LOG at n_e = 12 in {:.0}%, JIO-LRM n_e = 12 < n_e = 1 in {:.0}% (>= 80%); mean bias LOG {:.2}% JIO-LRM(12) {:.2}% JIO-LRM(1) {:.2}%",
            100.0 * f0,
            100.0 * f1,
            100.0 * sums[0] / n as f64,
            100.0 * sums[1] / n as f64,
            100.0 * sums[2] / n as f64
        ),
    )
}

/// Velocity over torque of a two-mass drive with the spring between motor
/// and load.
fn criterion_7() -> Outcome {
    let (jm, ja, k): (f64, f64, f64) = (1e-3, 4e-3, 400.0);
    let jt = jm + ja;
    let wr = (k * jt / (jm * ja)).sqrt();
    let zeta = 0.005;
    let d = 2.0 * zeta * wr * jm * ja / jt;
    let g = |w: f64| {
        let s = c(0.0, w);
        (s * s * ja + s * d + k) / (s * (s * s * jm * ja + s * d * jt + k * jt))
    };
    let freqs: Vec<f64> = (0..400).map(|i| wr * (0.5 + i as f64 * 1.0 / 400.0)).collect();
    let gs: Vec<CMatrix> = freqs.iter().map(|&w| CMatrix::from_element(1, 1, g(w))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rec = record(&mut rng, &gs);
    rec.freqs = freqs.clone();
    let cfg = LocalFitConfig {
        half_width: Some(4),
        ..LocalFitConfig::default()
    };
    let near = |w: f64| (w - wr).abs() <= 0.1 * wr;
    let err = |p: Parametrization| {
        let est = local::local_fit(&rec, &LocalFitConfig { parametrization: p, ..cfg.clone() }).unwrap();
        est.lines
            .iter()
            .zip(&freqs)
            .filter(|(_, &w)| near(w))
            .map(|(l, &w)| (l.g[(0, 0)].norm() - g(w).norm()).abs())
            .fold(0.0, f64::max)
    };
    let (lpm, lrm) = (err(Parametrization::Lpm), err(Parametrization::LrmMiso));
    outcome(
        lpm >= 5.0 * lrm,
        format!("damping ratio {zeta}, b = 4: max amplitude error LPM {lpm:.3e}, LRM {lrm:.3e}, ratio {:.1} (>= 5)", lpm / lrm),
    )
}

fn criterion_8() -> Outcome {
    let cfg = CampaignConfig::default();
    let qs = cfg.configurations.resolve();
    let truths: Vec<FrfEstimate> = qs.iter().map(|q| campaign::truth(&cfg, q).unwrap()).collect();
    let model = &cfg.plant;
    let weights = truths
        .iter()
        .zip(&qs)
        .map(|(t, q)| graybox::build_weights(t, model, q, &WeightScheme::default()).unwrap())
        .collect();
    let data = FitData {
        configurations: qs.clone(),
        estimates: truths,
        weights,
        sample_time: Some(cfg.sample_time()),
    };
    let theta0 = model.theta.free();
    let start: Vec<f64> = theta0.iter().map(|v| 2.0 * v).collect();
    let perturbed = model.with_theta(model.theta.with_free(&start));
    let opts = FitOptions { n_starts: 1, ..FitOptions::default() };
    let fit = graybox::fit_parameters(&perturbed, &data, &opts).unwrap();
    let worst = fit
        .theta_hat
        .free()
        .iter()
        .zip(&theta0)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    outcome(
        worst < 0.01,
        format!("{} parameters from 2x start over {} configurations: max relative error {worst:.2e} (< 1%)", theta0.len(), qs.len()),
    )
}

fn tree(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let cfg = CampaignConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ok_a = campaign::run_all(&cfg, a.path()).unwrap().iter().all(|s| s.ok());
    let ok_b = campaign::run_all(&cfg, b.path()).unwrap().iter().all(|s| s.ok());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let bytes: usize = ta.iter().map(|(_, v)| v.len()).sum();
    outcome(
        ok_a && ok_b && ta == tb,
        format!("two `all` runs: {} files, {:.1} MB, identical = {}", ta.len(), bytes as f64 / 1e6, ta == tb),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "noise-free H1 exactness", Duration::from_secs(10), criterion_1),
        (2, "local model exactness", Duration::from_secs(5), criterion_2),
        (3, "LOG identities", Duration::from_secs(1), criterion_3),
        (4, "matrix functions", Duration::from_secs(10), criterion_4),
        (5, "amplitude bias ordering", Duration::from_secs(30 * 60), criterion_5),
        (6, "parameter bias ordering", Duration::from_secs(60 * 60), criterion_6),
        (7, "resonance advantage of LRM", Duration::from_secs(60), criterion_7),
        (8, "gray-box self-consistency", Duration::from_secs(10 * 60), criterion_8),
        (9, "reproducibility", Duration::from_secs(60 * 60), criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let t = start.elapsed();
        let pass = o.pass && t <= limit;
        println!(
            "criterion {id} {}: {name}: {}; {:.1} s (limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            t.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
