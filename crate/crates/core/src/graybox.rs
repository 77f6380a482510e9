//! Gray-box fitting of stiffness and damping parameters to FRF estimates.
//!
//! The cost is `sum_i sum_l E^H W E` with `E = log vec(G_hat) - log vec(G(theta))`
//! taken elementwise, phase differences wrapped to `(-pi, pi]`, and a
//! diagonal `W` stored as one weight per entry of `vec(G)` (column-major).
//! Parameters are optimized in `ln(theta)` with BFGS and a central-difference
//! gradient, from several log-normally perturbed starts.

use std::f64::consts::PI;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frf::{Covariance, FrfEstimate};
use crate::plant::{truth_frf, PlantModel, ThetaVector};
use crate::{Error, Result, C64};

const MIN_MAGNITUDE: f64 = 1e-300;
const DENSE_GRID_POINTS: usize = 4000;

/// How per-line weights are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightScheme {
    /// Factor on diagonal entries `G_ii`.
    pub diagonal_boost: f64,
    /// Factor on `G_ii` inside the bands around its first antiresonance and resonance.
    pub band_boost: f64,
    /// Half-width of those bands relative to the center frequency.
    pub band_fraction: f64,
    /// Multiply by `|G_hat|^2 / var(G_hat)` where a covariance is available.
    pub inverse_variance: bool,
    /// Lines outside `[lo, hi]` Hz get zero weight.
    pub band_hz: Option<[f64; 2]>,
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme {
            diagonal_boost: 10.0,
            band_boost: 5.0,
            band_fraction: 0.2,
            inverse_variance: false,
            band_hz: None,
        }
    }
}

impl WeightScheme {
    pub fn uniform() -> Self {
        WeightScheme {
            diagonal_boost: 1.0,
            band_boost: 1.0,
            ..WeightScheme::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.diagonal_boost) && ok(self.band_boost) && ok(self.band_fraction)) {
            return Err(Error::Config("weight factors must be finite and non-negative".into()));
        }
        if let Some([lo, hi]) = self.band_hz {
            if !(lo < hi) {
                return Err(Error::Config("band_hz needs lo < hi".into()));
            }
        }
        Ok(())
    }
}

/// Weights for every line of one configuration; entry `l` holds the
/// diagonal of `W(omega_l)` over `vec(G)`.
pub type LineWeights = Vec<DVector<f64>>;

/// First antiresonance and first following resonance of `|G_ii|` (rad/s),
/// searched on a dense log grid over `[w_lo, w_hi]`.
pub fn first_antiresonance_resonance(
    model: &PlantModel,
    q_a0: &[f64],
    w_lo: f64,
    w_hi: f64,
) -> Result<Vec<(Option<f64>, Option<f64>)>> {
    let lin = model.linearize(q_a0)?;
    let ratio = (w_hi / w_lo).ln();
    let grid: Vec<f64> = (0..DENSE_GRID_POINTS)
        .map(|i| w_lo * (ratio * i as f64 / (DENSE_GRID_POINTS - 1) as f64).exp())
        .collect();
    let g = lin.frf_continuous(&grid)?;
    let n = model.n_axes();
    Ok((0..n)
        .map(|i| {
            let mag: Vec<f64> = g.iter().map(|m| m[(i, i)].norm()).collect();
            let is_min = |k: usize| mag[k] < mag[k - 1] && mag[k] <= mag[k + 1];
            let is_max = |k: usize| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1];
            let ar = (1..mag.len() - 1).find(|&k| is_min(k));
            let res = ar.and_then(|a| (a + 1..mag.len() - 1).find(|&k| is_max(k)));
            (ar.map(|k| grid[k]), res.map(|k| grid[k]))
        })
        .collect())
}

/// Realizes `scheme` on the lines of `estimate` for configuration `q_a0`,
/// locating bands on the response of `model` (carrying `theta0`).
pub fn build_weights(
    estimate: &FrfEstimate,
    model: &PlantModel,
    q_a0: &[f64],
    scheme: &WeightScheme,
) -> Result<LineWeights> {
    scheme.validate()?;
    let (ny, nu) = (estimate.n_y(), estimate.n_u());
    let freqs = &estimate.freqs;
    let needs_bands = scheme.band_boost != 1.0;
    let bands = if needs_bands && !freqs.is_empty() {
        let lo = freqs[0] * 0.5;
        let hi = freqs[freqs.len() - 1];
        first_antiresonance_resonance(model, q_a0, lo, hi)?
    } else {
        vec![(None, None); ny.min(nu)]
    };
    for (i, (ar, res)) in bands.iter().enumerate() {
        if needs_bands && (ar.is_none() || res.is_none()) {
            warn!("no antiresonance/resonance pair below f_max on channel {}; band boost skipped", i + 1);
        }
    }
    let in_band = |w: f64, c: Option<f64>| c.is_some_and(|c| (w - c).abs() <= scheme.band_fraction * c);

    Ok(freqs
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            let mut v = DVector::from_element(ny * nu, 1.0);
            if let Some([lo, hi]) = scheme.band_hz {
                let f = w / (2.0 * PI);
                if f < lo || f > hi {
                    v.fill(0.0);
                    return v;
                }
            }
            for i in 0..ny.min(nu) {
                let idx = i + i * ny;
                v[idx] *= scheme.diagonal_boost;
                let (ar, res) = bands.get(i).copied().unwrap_or((None, None));
                if ar.is_some() && res.is_some() && (in_band(w, ar) || in_band(w, res)) {
                    v[idx] *= scheme.band_boost;
                }
            }
            if scheme.inverse_variance {
                if let Some(Covariance::Vec(cov)) = &estimate.lines[l].cov {
                    let g = &estimate.lines[l].g;
                    for k in 0..ny * nu {
                        let var = cov[(k, k)].re;
                        if var > 0.0 && var.is_finite() {
                            v[k] *= g[k].norm_sqr() / var;
                        }
                    }
                }
            }
            v
        })
        .collect())
}

/// Scales each line's weights to unit matrix 2-norm (largest entry 1).
pub fn normalize_weights(w: &LineWeights) -> LineWeights {
    w.iter()
        .map(|v| {
            let m = v.amax();
            if m > 0.0 {
                v / m
            } else {
                v.clone()
            }
        })
        .collect()
}

/// Everything a fit compares against.
#[derive(Debug, Clone)]
pub struct FitData {
    pub configurations: Vec<Vec<f64>>,
    pub estimates: Vec<FrfEstimate>,
    pub weights: Vec<LineWeights>,
    /// Compare against the zero-order-hold response at this sample time;
    /// `None` uses the continuous-time response.
    pub sample_time: Option<f64>,
}

impl FitData {
    pub fn validate(&self) -> Result<()> {
        let q = self.configurations.len();
        if q == 0 || self.estimates.len() != q || self.weights.len() != q {
            return Err(Error::Dimension(
                "need one estimate and one weight set per configuration".into(),
            ));
        }
        for (e, w) in self.estimates.iter().zip(&self.weights) {
            if w.len() != e.n_lines() || w.iter().any(|v| v.len() != e.n_y() * e.n_u()) {
                return Err(Error::Dimension("weights do not match the estimate lines".into()));
            }
            if w.iter().flat_map(|v| v.iter()).any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Cost value and bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub cost: f64,
    /// Lines skipped because the estimate flagged them invalid.
    pub skipped_lines: usize,
    /// Entries dropped because a magnitude vanished.
    pub excluded_entries: usize,
}

/// Phase wrapped to `(-pi, pi]`.
pub fn wrap_phase(p: f64) -> f64 {
    let w = p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// `|log g_hat - log g|^2` with wrapped phase; `None` for vanishing magnitudes.
pub fn log_error_sq(g_hat: C64, g: C64) -> Option<f64> {
    if g_hat.norm() < MIN_MAGNITUDE || g.norm() < MIN_MAGNITUDE {
        return None;
    }
    let re = g_hat.norm().ln() - g.norm().ln();
    let im = wrap_phase(g_hat.arg() - g.arg());
    Some(re * re + im * im)
}

/// Weighted log-error cost of `theta` on `data`.
pub fn log_error_cost(model: &PlantModel, theta: &ThetaVector, data: &FitData) -> Result<CostTerms> {
    let m = model.with_theta(theta.clone());
    m.validate()?;
    let mut out = CostTerms {
        cost: 0.0,
        skipped_lines: 0,
        excluded_entries: 0,
    };
    for ((q, est), w) in data.configurations.iter().zip(&data.estimates).zip(&data.weights) {
        let model_frf = truth_frf(&m, q, &est.freqs, data.sample_time)?;
        for (l, line) in est.lines.iter().enumerate() {
            if !line.is_valid() {
                out.skipped_lines += 1;
                continue;
            }
            let g = model_frf.g(l);
            for k in 0..line.g.len() {
                if w[l][k] == 0.0 {
                    continue;
                }
                match log_error_sq(line.g[k], g[k]) {
                    Some(e) => out.cost += w[l][k] * e,
                    None => out.excluded_entries += 1,
                }
            }
        }
    }
    if out.excluded_entries > 0 {
        warn!("{} FRF entries with vanishing magnitude excluded from the cost", out.excluded_entries);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub n_starts: usize,
    /// Standard deviation of `ln` perturbations of the starts after the first.
    pub perturbation: f64,
    pub seed: u64,
    pub max_iterations: usize,
    /// Relative step of the central-difference gradient.
    pub gradient_step: f64,
    /// Stop when the gradient norm (in `ln theta`) falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative cost decrease per iteration falls below this.
    pub cost_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 4,
            perturbation: 0.3,
            seed: 0,
            max_iterations: 300,
            gradient_step: 1e-6,
            gradient_tolerance: 1e-10,
            cost_tolerance: 1e-14,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 || self.max_iterations == 0 {
            return Err(Error::Config("n_starts and max_iterations must be positive".into()));
        }
        if !(self.perturbation >= 0.0 && self.gradient_step > 0.0 && self.gradient_tolerance >= 0.0) {
            return Err(Error::Config("invalid optimizer tolerances".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub initial: Vec<f64>,
    pub converged: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged_ok: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub cost: f64,
    pub names: Vec<String>,
    pub units: Vec<String>,
    /// Cost after each accepted iteration of the best start.
    pub cost_trace: Vec<f64>,
    pub starts: Vec<StartRecord>,
    /// Not persisted so that reruns produce identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Descent {
    x: Vec<f64>,
    cost: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    message: String,
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// BFGS with Armijo backtracking on a smooth objective.
fn bfgs(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], opts: &FitOptions) -> Descent {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x0);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Descent {
            x: x0.to_vec(),
            cost: fx,
            trace,
            iterations: 0,
            converged: false,
            message: "non-finite cost at start".into(),
        };
    }
    let grad = |x: &DVector<f64>| DVector::from_vec(numerical_gradient(f, x.as_slice(), opts.gradient_step));
    let mut g = grad(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut message = "iteration limit".to_string();
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iterations {
        if g.norm() <= opts.gradient_tolerance || fx == 0.0 {
            converged = true;
            message = "gradient below tolerance".into();
            break;
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = -g.norm_squared();
        }
        // bound the first trial step in ln(theta)
        let pmax = p.amax();
        let mut alpha = if pmax > 1.0 { 1.0 / pmax } else { 1.0 };
        let mut accepted = None;
        while alpha > 1e-12 {
            let xn = &x + &p * alpha;
            let fnew = f(xn.as_slice());
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            converged = true;
            message = "line search made no progress".into();
            break;
        };
        it += 1;
        let gn = grad(&xn);
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * yv.transpose() * rho;
            let right = &i - &yv * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        let decrease = fx - fnew;
        x = xn;
        g = gn;
        fx = fnew;
        trace.push(fx);
        if decrease <= opts.cost_tolerance * fx.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            message = "cost decrease below tolerance".into();
            break;
        }
    }
    Descent {
        x: x.as_slice().to_vec(),
        cost: fx,
        trace,
        iterations: it,
        converged,
        message,
    }
}

/// Multi-start fit of the free parameters of `model.theta`, which also
/// serves as the initial guess.
pub fn fit_parameters(model: &PlantModel, data: &FitData, opts: &FitOptions) -> Result<FitResult> {
    let started = Instant::now();
    data.validate()?;
    opts.validate()?;
    let theta0 = model.theta.clone();
    let p0 = theta0.free();
    if p0.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("initial stiffness and damping values must be positive".into()));
    }
    let ln0: Vec<f64> = p0.iter().map(|v| v.ln()).collect();
    let objective = |lp: &[f64]| -> f64 {
        let theta = theta0.with_free(&lp.iter().map(|v| v.exp()).collect::<Vec<_>>());
        match log_error_cost(model, &theta, data) {
            Ok(c) => c.cost,
            Err(_) => f64::INFINITY,
        }
    };
    let c0 = objective(&ln0);
    if !c0.is_finite() {
        return Err(Error::Optimization(format!("cost at the initial guess is not finite ({c0})")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vec<f64>> = (0..opts.n_starts)
        .map(|s| {
            ln0.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if s == 0 {
                        v
                    } else {
                        v + opts.perturbation * z
                    }
                })
                .collect()
        })
        .collect();
    let runs: Vec<Descent> = starts.par_iter().map(|s| bfgs(&objective, s, opts)).collect();

    let records: Vec<StartRecord> = starts
        .iter()
        .zip(&runs)
        .map(|(s, r)| StartRecord {
            initial: s.iter().map(|v| v.exp()).collect(),
            converged: r.x.iter().map(|v| v.exp()).collect(),
            cost: r.cost,
            iterations: r.iterations,
            converged_ok: r.converged,
            message: r.message.clone(),
        })
        .collect();
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.cost.is_finite())
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .map(|(i, _)| i)
        .ok_or_else(|| {
            let diag: Vec<String> = records.iter().map(|r| format!("{} (cost {})", r.message, r.cost)).collect();
            Error::Optimization(format!("all starts diverged: {}", diag.join("; ")))
        })?;
    let theta_hat = theta0.with_free(&records[best].converged);
    Ok(FitResult {
        names: theta0.free_names(),
        units: theta0.free_units().iter().map(|u| u.to_string()).collect(),
        cost: runs[best].cost,
        cost_trace: runs[best].trace.clone(),
        theta_hat,
        starts: records,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
