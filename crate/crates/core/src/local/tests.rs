use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn random_phase(rng: &mut ChaCha8Rng) -> C64 {
    C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))
}

/// Single-experiment record with `y_k = g(k) u_k + v_k`.
fn record(
    rng: &mut ChaCha8Rng,
    n_lines: usize,
    n_u: usize,
    g: impl Fn(usize) -> CMatrix,
    noise: f64,
) -> SpectralRecord {
    let nd = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut u = Vec::new();
    let mut y = Vec::new();
    for k in 0..n_lines {
        let uk = CMatrix::from_fn(n_u, 1, |_, _| random_phase(rng));
        let gk = g(k);
        let mut yk = &gk * &uk;
        if noise > 0.0 {
            yk += CMatrix::from_fn(gk.nrows(), 1, |_, _| c(nd.sample(rng), nd.sample(rng)));
        }
        u.push(uk);
        y.push(yk);
    }
    let freqs = (1..=n_lines).map(|k| k as f64).collect();
    SpectralRecord::new(freqs, u, y, None).unwrap()
}

fn window_at(center: usize, b: usize, n: usize) -> LocalWindow {
    build_windows(n, b).unwrap().swap_remove(center)
}

#[test]
fn windows_shift_at_borders() {
    let w = build_windows(10, 2).unwrap();
    assert_eq!(w[0].lines, vec![0, 1, 2, 3]);
    assert_eq!(w[0].offsets, vec![0, 1, 2, 3]);
    assert_eq!(w[5].lines, vec![3, 4, 5, 6]);
    assert_eq!(w[5].offsets, vec![-2, -1, 0, 1]);
    assert_eq!(w[9].lines, vec![6, 7, 8, 9]);
    assert!(matches!(build_windows(3, 2), Err(Error::TooFewLines { .. })));
}

#[test]
fn all_windows_are_full_and_contain_their_center() {
    for (n, b) in [(300, 4), (8, 4), (9, 4), (50, 1)] {
        for (k, win) in build_windows(n, b).unwrap().iter().enumerate() {
            assert_eq!(win.center, k);
            assert_eq!(win.lines.len(), 2 * b);
            assert!(win.lines.iter().all(|&l| l < n));
            assert!(win.lines.windows(2).all(|p| p[1] == p[0] + 1));
            assert!(win.offsets.contains(&0));
            let expected_start = k.saturating_sub(b).min(n - 2 * b);
            assert_eq!(win.lines[0], expected_start);
        }
    }
}

#[test]
fn minimum_widths_and_default_half_width() {
    let mut cfg = LocalFitConfig::with(Parametrization::Lpm);
    assert_eq!(cfg.min_width(3, 3), 9);
    cfg.parametrization = Parametrization::LrmMiso;
    assert_eq!(cfg.min_width(3, 3), 11);
    cfg.parametrization = Parametrization::LrmMimo;
    assert_eq!(cfg.min_width(3, 3), 15);
    // ceil((15 + 2) / 2)
    assert_eq!(cfg.resolve_half_width(3, 3).unwrap(), 9);
    cfg.half_width = Some(7);
    assert!(matches!(cfg.resolve_half_width(3, 3), Err(Error::WindowTooNarrow { width: 14, required: 15 })));
}

#[test]
fn lpm_constant_frf_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g0 = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.2), c(-0.5, 0.0), c(0.3, 0.3), c(2.0, -1.0)]);
    let rec = record(&mut rng, 30, 2, |_| g0.clone(), 0.0);
    let est = lpm_fit(&rec, &LocalFitConfig::default()).unwrap();
    for l in &est.lines {
        assert!((&l.g - &g0).norm() < 1e-9);
    }
    let win = window_at(10, 4, 30);
    let (u_w, y_w) = window_data(&rec, &win);
    let th = fit_window(&win, &u_w, &y_w, &LocalFitConfig::with(Parametrization::Lpm));
    assert!(th.numerator[1].norm() < 1e-9 && th.numerator[2].norm() < 1e-9);
}

#[test]
fn lpm_recovers_constructed_polynomial() {
    // G(r) = 1 + 0.1 r + 0.01 r^2 around center 10
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rec = record(&mut rng, 20, 1, |k| {
        let r = k as f64 - 10.0;
        CMatrix::from_element(1, 1, c(1.0 + 0.1 * r + 0.01 * r * r, 0.0))
    }, 0.0);
    for scaling in [OffsetScaling::Raw, OffsetScaling::Normalized] {
        let cfg = LocalFitConfig { parametrization: Parametrization::Lpm, offset_scaling: scaling, ..Default::default() };
        let win = window_at(10, 3, 20);
        let (u_w, y_w) = window_data(&rec, &win);
        let th = fit_window(&win, &u_w, &y_w, &cfg);
        let got: Vec<C64> = th.numerator.iter().map(|n| n[(0, 0)]).collect();
        for (g, e) in got.iter().zip([1.0, 0.1, 0.01]) {
            assert!((g - c(e, 0.0)).norm() < 1e-10, "{got:?}");
        }
    }
}

#[test]
fn lpm_degrees_of_freedom() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rec = record(&mut rng, 20, 2, |_| CMatrix::identity(2, 2), 0.1);
    let win = window_at(10, 4, 20);
    let (u_w, y_w) = window_data(&rec, &win);
    let th = fit_window(&win, &u_w, &y_w, &LocalFitConfig::with(Parametrization::Lpm));
    assert_eq!(th.rank, 6);
    assert_eq!(th.dof, 2);
    assert!(th.residual_cov.is_some());
}

#[test]
fn lrm_constant_frf_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g0 = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.2), c(-0.5, 0.0), c(0.3, 0.3), c(2.0, -1.0)]);
    let rec = record(&mut rng, 40, 2, |_| g0.clone(), 0.0);
    for p in [Parametrization::LrmMiso, Parametrization::LrmMimo] {
        let cfg = LocalFitConfig::with(p);
        let est = local_fit(&rec, &cfg).unwrap();
        assert_eq!(est.valid_count(), 40, "{p:?}");
        for l in &est.lines {
            assert!((&l.g - &g0).norm() < 1e-9);
        }
        let win = window_at(20, 6, 40);
        let (u_w, y_w) = window_data(&rec, &win);
        let th = fit_window(&win, &u_w, &y_w, &cfg);
        assert!(th.numerator.iter().skip(1).all(|n| n.norm() < 1e-9));
        assert!(th.denominator.iter().all(|d| d.norm() < 1e-9));
    }
}

#[test]
fn lrm_recovers_constructed_rational() {
    // G(r) = (1 + 0.5 r) / (1 + 0.3 r) around center 12
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rec = record(&mut rng, 25, 1, |k| {
        let r = k as f64 - 12.0;
        CMatrix::from_element(1, 1, c(1.0 + 0.5 * r, 0.0) / c(1.0 + 0.3 * r, 0.0))
    }, 0.0);
    for p in [Parametrization::LrmMiso, Parametrization::LrmMimo] {
        let cfg = LocalFitConfig { order: 1, parametrization: p, ..Default::default() };
        let win = window_at(12, 3, 25);
        let (u_w, y_w) = window_data(&rec, &win);
        let th = fit_window(&win, &u_w, &y_w, &cfg);
        assert!((th.numerator[0][(0, 0)] - c(1.0, 0.0)).norm() < 1e-8);
        assert!((th.numerator[1][(0, 0)] - c(0.5, 0.0)).norm() < 1e-8);
        assert!((th.denominator[0][(0, 0)] - c(0.3, 0.0)).norm() < 1e-8);
        assert_eq!(th.status, LineStatus::Valid);
    }
}

#[test]
fn lrm_beats_lpm_at_sharp_resonance() {
    // lightly damped second-order mode sampled around its peak
    let wn = 40.0;
    let zeta = 0.005;
    let freqs: Vec<f64> = (0..60).map(|k| 30.0 + 0.35 * k as f64).collect();
    let g = |w: f64| c(wn * wn, 0.0) / c(wn * wn - w * w, 2.0 * zeta * wn * w);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rec = record(&mut rng, freqs.len(), 1, |k| CMatrix::from_element(1, 1, g(freqs[k])), 0.0);
    rec.freqs = freqs.clone();
    let b = 4;
    let lpm = lpm_fit(&rec, &LocalFitConfig { half_width: Some(b), ..Default::default() }).unwrap();
    let lrm = lrm_miso_fit(&rec, &LocalFitConfig { half_width: Some(b), ..Default::default() }).unwrap();
    let max_err = |est: &FrfEstimate| {
        est.lines
            .iter()
            .zip(&freqs)
            .map(|(l, &w)| (l.g[(0, 0)].norm() - g(w).norm()).abs())
            .fold(0.0, f64::max)
    };
    assert!(max_err(&lrm) < 1e-6 * g(wn).norm());
    assert!(max_err(&lrm) < max_err(&lpm));
}

#[test]
fn mimo_decoupled_plant_has_no_cross_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rec = record(&mut rng, 40, 2, |k| {
        let s = c(0.0, 0.1 * k as f64);
        CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0) / (s + 1.0), c(2.0, 0.0) / (s + 3.0)]))
    }, 0.0);
    let est = lrm_mimo_fit(&rec, &LocalFitConfig::default()).unwrap();
    for l in &est.lines {
        assert!(l.g[(0, 1)].norm() < 1e-8 && l.g[(1, 0)].norm() < 1e-8);
    }
}

#[test]
fn mimo_recovers_shared_regressor_solution() {
    // construct Theta_0, generate Y_w = K_w Theta_0 row by row, refit
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n_u, n_y, order) = (2, 2, 1);
    let cfg = LocalFitConfig { order, parametrization: Parametrization::LrmMimo, offset_scaling: OffsetScaling::Raw, ..Default::default() };
    let b = cfg.resolve_half_width(n_u, n_y).unwrap();
    let win = window_at(10, b, 30);
    let n0 = CMatrix::from_fn(n_y, n_u, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let n1 = CMatrix::from_fn(n_y, n_u, |_, _| c(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)));
    let d1 = CMatrix::from_fn(n_y, n_y, |_, _| c(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
    let w = win.offsets.len();
    let u_w = CMatrix::from_fn(w, n_u, |_, _| random_phase(&mut rng));
    // D(r) y = N(r) u  =>  y = D(r)^-1 N(r) u
    let mut y_w = CMatrix::zeros(w, n_y);
    for (i, &r) in win.offsets.iter().enumerate() {
        let r = C64::new(r as f64, 0.0);
        let d = CMatrix::identity(n_y, n_y) + &d1 * r;
        let n = &n0 + &n1 * r;
        let rhs = n * CMatrix::from_fn(n_u, 1, |j, _| u_w[(i, j)]);
        let y = linalg::solve(&d, &rhs).unwrap();
        for j in 0..n_y {
            y_w[(i, j)] = y[(j, 0)];
        }
    }
    let th = fit_window(&win, &u_w, &y_w, &cfg);
    assert!((&th.numerator[0] - &n0).norm() < 1e-8);
    assert!((&th.numerator[1] - &n1).norm() < 1e-8);
    assert!((&th.denominator[0] - &d1).norm() < 1e-8);
}

#[test]
fn rational_regressor_extends_polynomial_regressor() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let win = window_at(10, 5, 30);
    let (powers, _) = offset_powers(&win.offsets, 2, OffsetScaling::Normalized);
    let u_w = CMatrix::from_fn(10, 2, |_, _| random_phase(&mut rng));
    let y_w = CMatrix::from_fn(10, 2, |_, _| random_phase(&mut rng));
    let kp = regressor(Parametrization::Lpm, &powers, &u_w, &y_w);
    let kr = regressor(Parametrization::LrmMimo, &powers, &u_w, &y_w);
    assert_eq!(kr.columns(0, kp.ncols()), kp.columns(0, kp.ncols()));
    // dropping the denominator columns reproduces the LPM fit
    let a = linalg::least_squares(&kp, &y_w, 1e-10);
    let b = linalg::least_squares(&kr.columns(0, kp.ncols()).into_owned(), &y_w, 1e-10);
    assert!((a.solution - b.solution).norm() < 1e-10);
}

#[test]
fn vanishing_denominator_is_flagged() {
    // pole exactly on an offset inside the window: D(r) = 1 - r / 2 vanishes at r = 2
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let win = window_at(10, 3, 30);
    // the input vanishes where the denominator does
    let u_w = CMatrix::from_fn(6, 1, |i, _| if win.offsets[i] == 2 { c(0.0, 0.0) } else { random_phase(&mut rng) });
    let y_w = CMatrix::from_fn(6, 1, |i, _| {
        let r = win.offsets[i] as f64;
        if (r - 2.0).abs() < 0.5 {
            c(0.0, 0.0)
        } else {
            u_w[(i, 0)] / c(1.0 - r / 2.0, 0.0)
        }
    });
    let cfg = LocalFitConfig { order: 1, parametrization: Parametrization::LrmMiso, ..Default::default() };
    let th = fit_window(&win, &u_w, &y_w, &cfg);
    assert_eq!(th.status, LineStatus::UnstableLocalFit);
}

#[test]
fn rank_deficient_input_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // both inputs identical: the zero-order block is not identifiable
    let mut rec = record(&mut rng, 30, 2, |_| CMatrix::identity(2, 2), 0.0);
    for u in rec.u.iter_mut() {
        let first = u[(0, 0)];
        u[(1, 0)] = first;
    }
    let est = lpm_fit(&rec, &LocalFitConfig::default()).unwrap();
    assert!(est.lines.iter().all(|l| l.status == LineStatus::RankDeficient));
}

#[test]
fn jio_lrm_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // open loop with unity actuator: u = r
    let g0 = |k: usize| CMatrix::from_fn(2, 2, |i, j| c(1.0, 0.0) / c(1.0 + i as f64 + j as f64, 0.05 * k as f64));
    let mut rec = record(&mut rng, 40, 2, g0, 0.0);
    rec.r = Some(rec.u.clone());
    let jio = jio_lrm(&rec, &LocalFitConfig::default()).unwrap();
    let mimo = lrm_mimo_fit(&rec, &LocalFitConfig::default()).unwrap();
    for (a, b) in jio.lines.iter().zip(&mimo.lines) {
        assert!((&a.g - &b.g).norm() < 1e-8 * b.g.norm());
    }

    // scalar closed loop u = C (r - y), noise-free
    let g = |k: usize| c(1.0, 0.0) / c(1.0, 0.04 * k as f64);
    let ctrl = |k: usize| c(3.0, 0.0) + c(0.0, 0.02 * k as f64);
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut r = Vec::new();
    for k in 0..40 {
        let rk = random_phase(&mut rng);
        let s = c(1.0, 0.0) / (c(1.0, 0.0) + g(k) * ctrl(k));
        u.push(CMatrix::from_element(1, 1, s * ctrl(k) * rk));
        y.push(CMatrix::from_element(1, 1, s * g(k) * ctrl(k) * rk));
        r.push(CMatrix::from_element(1, 1, rk));
    }
    let rec = SpectralRecord::new((1..=40).map(|k| k as f64).collect(), u, y, Some(r)).unwrap();
    let est = jio_lrm(&rec, &LocalFitConfig::default()).unwrap();
    for (k, l) in est.lines.iter().enumerate() {
        assert!((l.g[(0, 0)] - g(k)).norm() < 1e-8, "line {k}");
    }

    let no_ref = SpectralRecord { r: None, ..rec };
    assert!(matches!(jio_lrm(&no_ref, &LocalFitConfig::default()), Err(Error::MissingInput(_))));
}

#[test]
fn singular_reference_to_input_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rec = record(&mut rng, 40, 2, |_| CMatrix::identity(2, 2), 0.0);
    // actuator ignores the second reference
    rec.r = Some(rec.u.iter().map(|u| CMatrix::from_fn(2, 1, |i, _| if i == 0 { u[(0, 0)] } else { u[(1, 0)] })).collect());
    for u in rec.u.iter_mut() {
        u[(1, 0)] = c(0.0, 0.0);
    }
    let est = jio_lrm(&rec, &LocalFitConfig::default()).unwrap();
    assert!(est.lines.iter().all(|l| !l.is_valid()));
}

#[test]
fn log_average_of_local_estimates() {
    let mk = |v: f64| FrfEstimate::from_matrices(vec![1.0, 2.0], vec![CMatrix::from_element(1, 1, c(v, 0.0)); 2], "LRM-MIMO", 1);
    let one = log_average_local(&[mk(3.0)]).unwrap();
    assert_eq!(one, mk(3.0));
    let same = log_average_local(&[mk(3.0), mk(3.0)]).unwrap();
    assert!((same.g(0)[(0, 0)] - c(3.0, 0.0)).norm() < 1e-14);
    assert!(same.lines[0].cov.as_ref().unwrap().matrix().norm() < 1e-20);
    let geo = log_average_local(&[mk(2.0), mk(8.0)]).unwrap();
    assert!((geo.g(1)[(0, 0)] - c(4.0, 0.0)).norm() < 1e-14);
    assert_eq!(geo.n_e_used, 2);
}

#[test]
fn wider_windows_trade_variance_for_interpolation_error() {
    // curved SISO FRF
    let g = |k: usize| {
        let x = k as f64 / 10.0;
        CMatrix::from_element(1, 1, c(x.sin() + 2.0, x.cos()))
    };
    let n = 80;
    let center = 40;
    let narrow = LocalFitConfig { parametrization: Parametrization::Lpm, half_width: Some(3), ..Default::default() };
    let wide = LocalFitConfig { half_width: Some(12), ..narrow.clone() };

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let clean = record(&mut rng, n, 1, g, 0.0);
    let bias = |cfg: &LocalFitConfig| (lpm_fit(&clean, cfg).unwrap().g(center) - g(center)).norm();
    assert!(bias(&wide) > bias(&narrow));

    let mut var = [0.0; 2];
    for _ in 0..300 {
        let rec = record(&mut rng, n, 1, g, 0.1);
        for (slot, cfg) in [&narrow, &wide].iter().enumerate() {
            let est = lpm_fit(&rec, cfg).unwrap();
            var[slot] += (est.g(center) - g(center)).norm_squared();
        }
    }
    assert!(var[1] < var[0], "{var:?}");
}

#[test]
fn input_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rec = record(&mut rng, 5, 3, |_| CMatrix::identity(3, 3), 0.0);
    assert!(matches!(local_fit(&rec, &LocalFitConfig::default()), Err(Error::TooFewLines { .. })));
    let two = SpectralRecord::concat(&[rec.clone(), rec.clone()]).unwrap();
    assert!(matches!(local_fit(&two, &LocalFitConfig::default()), Err(Error::Dimension(_))));
    let bad = LocalFitConfig { rank_tol: 0.0, ..Default::default() };
    assert!(local_fit(&rec, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn local_rational_data_is_recovered(seed in 0u64..10_000, mimo in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = if mimo { Parametrization::LrmMimo } else { Parametrization::LrmMiso };
        let cfg = LocalFitConfig { order: 1, parametrization: p, ..Default::default() };
        let b = cfg.resolve_half_width(2, 2).unwrap();
        let win = window_at(15, b, 30);
        let w = win.offsets.len();
        let n0 = CMatrix::from_fn(2, 2, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let n1 = CMatrix::from_fn(2, 2, |_, _| c(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)));
        let d = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        let u_w = CMatrix::from_fn(w, 2, |_, _| random_phase(&mut rng));
        let y_w = CMatrix::from_fn(w, 2, |i, row| {
            let r = win.offsets[i] as f64;
            let n = &n0 + &n1 * c(r, 0.0);
            (n.row(row) * u_w.row(i).transpose())[(0, 0)] / c(1.0 + d[row] * r, 0.0)
        });
        let th = fit_window(&win, &u_w, &y_w, &cfg);
        prop_assert!((th.g() - &n0).norm() < 1e-8);
    }

    #[test]
    fn center_estimate_ignores_offset_scaling(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = record(&mut rng, 30, 2, |k| CMatrix::from_fn(2, 2, |i, j| c(1.0 + (i * j) as f64, 0.02 * k as f64)), 0.05);
        let raw = LocalFitConfig { offset_scaling: OffsetScaling::Raw, ..Default::default() };
        let a = lrm_mimo_fit(&rec, &raw).unwrap();
        let b = lrm_mimo_fit(&rec, &LocalFitConfig::default()).unwrap();
        for (x, y) in a.lines.iter().zip(&b.lines) {
            prop_assert!((&x.g - &y.g).norm() < 1e-8 * (1.0 + y.g.norm()));
        }
        prop_assert!(b.validate().is_ok());
    }
}


