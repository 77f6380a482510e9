//! Local polynomial (LPM) and local rational (LRM) FRF estimation.
//!
//! Around every excited line a window of `w = 2b` neighbouring lines is fitted
//! by a low-order model in the line offset `r`. The estimate at the center is
//! the zero-order numerator coefficient. Windows slide over the excited-line
//! index; near the borders they are shifted so that `w` stays constant.
//!
//! | parametrization | model per window                      | `w_min`                 |
//! |-----------------|---------------------------------------|-------------------------|
//! | `Lpm`           | `Y = N(r) U`                          | `(R+1) n_u`             |
//! | `LrmMiso`       | `d_i(r) Y_i = N_i(r) U` per output    | `(R+1) n_u + R`         |
//! | `LrmMimo`       | `D(r) Y = N(r) U`, `D` is `n_y x n_y` | `(R+1) n_u + R n_y`     |
//!
//! Denominators are monic (`D(0) = I`), so the rational fits are linear
//! least-squares (Levy) problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical;
use crate::frf::{Covariance, FrfEstimate, FrfLine, LineStatus};
use crate::linalg;
use crate::sigproc::SpectralRecord;
use crate::{CMatrix, Error, Result, C64};

/// Denominator magnitude (or smallest singular value) below which a local
/// rational fit is rejected.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Condition number of `G_ru` above which the JIO-LRM ratio is rejected.
pub const JIO_COND_LIMIT: f64 = 1e10;

/// Share of a null-space vector allowed in the zero-order block before the
/// center estimate is considered undetermined.
const IDENTIFIABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Lpm,
    LrmMiso,
    LrmMimo,
}

impl Parametrization {
    pub fn tag(self) -> &'static str {
        match self {
            Parametrization::Lpm => "LPM",
            Parametrization::LrmMiso => "LRM-MISO",
            Parametrization::LrmMimo => "LRM-MIMO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetScaling {
    /// Integer offsets.
    Raw,
    /// Offsets divided by their largest magnitude in the window.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalFitConfig {
    /// Polynomial degree `R`.
    pub order: usize,
    /// Half width `b`; `None` picks `ceil((w_min + 2) / 2)`.
    pub half_width: Option<usize>,
    pub parametrization: Parametrization,
    pub offset_scaling: OffsetScaling,
    /// Relative singular-value threshold for the rank decision.
    pub rank_tol: f64,
}

impl Default for LocalFitConfig {
    fn default() -> Self {
        LocalFitConfig {
            order: 2,
            half_width: None,
            parametrization: Parametrization::LrmMimo,
            offset_scaling: OffsetScaling::Normalized,
            rank_tol: 1e-10,
        }
    }
}

impl LocalFitConfig {
    pub fn with(parametrization: Parametrization) -> Self {
        LocalFitConfig {
            parametrization,
            ..Default::default()
        }
    }

    /// Smallest window width that determines every parameter.
    pub fn min_width(&self, n_u: usize, n_y: usize) -> usize {
        let r = self.order;
        match self.parametrization {
            Parametrization::Lpm => (r + 1) * n_u,
            Parametrization::LrmMiso => (r + 1) * n_u + r,
            Parametrization::LrmMimo => (r + 1) * n_u + r * n_y,
        }
    }

    /// Unknowns per regression (per output row for LPM and MISO).
    pub fn n_params(&self, n_u: usize, n_y: usize) -> usize {
        self.min_width(n_u, n_y)
    }

    /// Half width in use, after checking it against `w_min`.
    pub fn resolve_half_width(&self, n_u: usize, n_y: usize) -> Result<usize> {
        let w_min = self.min_width(n_u, n_y);
        let b = self.half_width.unwrap_or(w_min.div_ceil(2) + 1);
        if 2 * b < w_min || b == 0 {
            return Err(Error::WindowTooNarrow {
                width: 2 * b,
                required: w_min,
            });
        }
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::Config(format!("rank_tol must lie in (0, 1), got {}", self.rank_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalWindow {
    pub center: usize,
    /// Line offsets relative to the center; contains 0.
    pub offsets: Vec<i64>,
    /// Absolute excited-line indices, `center + offsets`.
    pub lines: Vec<usize>,
}

/// One window of width `2 b` per line; border windows are shifted inwards.
pub fn build_windows(n_lines: usize, half_width: usize) -> Result<Vec<LocalWindow>> {
    let w = 2 * half_width;
    if w == 0 || n_lines < w {
        return Err(Error::TooFewLines { lines: n_lines, width: w });
    }
    Ok((0..n_lines)
        .map(|k| {
            let start = k.saturating_sub(half_width).min(n_lines - w);
            let lines: Vec<usize> = (start..start + w).collect();
            let offsets = lines.iter().map(|&l| l as i64 - k as i64).collect();
            LocalWindow {
                center: k,
                offsets,
                lines,
            }
        })
        .collect())
}

/// Fitted local model of one window, on the raw integer offset scale.
#[derive(Debug, Clone)]
pub struct LocalTheta {
    /// `N_s`, `s = 0..=R`, each `n_y x n_u`; `N_0` is the FRF estimate.
    pub numerator: Vec<CMatrix>,
    /// `D_s`, `s = 1..=R`, each `n_y x n_y` (diagonal for MISO, empty for LPM).
    pub denominator: Vec<CMatrix>,
    /// Residual covariance `V^H V / q`, `n_y x n_y`; `None` when `q = 0`.
    pub residual_cov: Option<CMatrix>,
    /// Degrees of freedom `w - rank(K)` (smallest over output rows).
    pub dof: usize,
    /// Rank of the regressor (smallest over output rows).
    pub rank: usize,
    pub status: LineStatus,
}

impl LocalTheta {
    pub fn g(&self) -> &CMatrix {
        &self.numerator[0]
    }

    /// `D(r) = I + sum_s D_s r^s`.
    pub fn denominator_at(&self, r: f64) -> CMatrix {
        let n_y = self.numerator[0].nrows();
        let mut d = CMatrix::identity(n_y, n_y);
        for (s, ds) in self.denominator.iter().enumerate() {
            d += ds * C64::new(r.powi(s as i32 + 1), 0.0);
        }
        d
    }

    /// `N(r) = sum_s N_s r^s`.
    pub fn numerator_at(&self, r: f64) -> CMatrix {
        let mut n = self.numerator[0].clone();
        for (s, ns) in self.numerator.iter().enumerate().skip(1) {
            n += ns * C64::new(r.powi(s as i32), 0.0);
        }
        n
    }
}

/// Regressor rows `[r^0 u^T .. r^R u^T, -r^1 y^T .. -r^R y^T]`.
///
/// `powers[i][s]` is `r_i^s`; `y_w` holds the outputs entering the
/// denominator and is ignored for LPM.
pub fn regressor(parametrization: Parametrization, powers: &[Vec<f64>], u_w: &CMatrix, y_w: &CMatrix) -> CMatrix {
    let w = powers.len();
    let order = powers[0].len() - 1;
    let n_u = u_w.ncols();
    let n_d = match parametrization {
        Parametrization::Lpm => 0,
        _ => y_w.ncols(),
    };
    let p = (order + 1) * n_u + order * n_d;
    let mut k = CMatrix::zeros(w, p);
    for i in 0..w {
        for s in 0..=order {
            for j in 0..n_u {
                k[(i, s * n_u + j)] = u_w[(i, j)] * powers[i][s];
            }
        }
        for s in 1..=order {
            for j in 0..n_d {
                k[(i, (order + 1) * n_u + (s - 1) * n_d + j)] = -y_w[(i, j)] * powers[i][s];
            }
        }
    }
    k
}

fn offset_powers(offsets: &[i64], order: usize, scaling: OffsetScaling) -> (Vec<Vec<f64>>, f64) {
    let scale = match scaling {
        OffsetScaling::Raw => 1.0,
        OffsetScaling::Normalized => offsets.iter().map(|r| r.unsigned_abs()).max().unwrap_or(1).max(1) as f64,
    };
    let powers = offsets
        .iter()
        .map(|&r| {
            let x = r as f64 / scale;
            (0..=order).map(|s| x.powi(s as i32)).collect()
        })
        .collect();
    (powers, scale)
}

/// Whether the first `n` unknowns are fixed by the data.
fn identifiable(ls: &linalg::LeastSquares, n: usize) -> bool {
    ls.null_space
        .column_iter()
        .all(|v| v.rows(0, n).norm() <= IDENTIFIABILITY_TOL * v.norm())
}

/// Fits one window. `u_w` is `w x n_u`, `y_w` is `w x n_y`.
pub fn fit_window(window: &LocalWindow, u_w: &CMatrix, y_w: &CMatrix, config: &LocalFitConfig) -> LocalTheta {
    let order = config.order;
    let (n_u, n_y) = (u_w.ncols(), y_w.ncols());
    let w = window.offsets.len();
    let (powers, scale) = offset_powers(&window.offsets, order, config.offset_scaling);
    let unscale = |s: usize| C64::new(scale.powi(s as i32).recip(), 0.0);

    let mut numerator = vec![CMatrix::zeros(n_y, n_u); order + 1];
    let mut denominator = match config.parametrization {
        Parametrization::Lpm => Vec::new(),
        _ => vec![CMatrix::zeros(n_y, n_y); order],
    };
    let mut residual = CMatrix::zeros(w, n_y);
    let mut rank = usize::MAX;
    let mut determined = true;

    // (regressor, rhs, output rows it serves)
    let problems: Vec<(CMatrix, CMatrix, Vec<usize>)> = match config.parametrization {
        Parametrization::Lpm | Parametrization::LrmMimo => {
            vec![(regressor(config.parametrization, &powers, u_w, y_w), y_w.clone(), (0..n_y).collect())]
        }
        Parametrization::LrmMiso => (0..n_y)
            .map(|i| {
                let yi = y_w.columns(i, 1).into_owned();
                (regressor(config.parametrization, &powers, u_w, &yi), yi, vec![i])
            })
            .collect(),
    };

    for (k, rhs, rows) in &problems {
        let ls = linalg::least_squares(k, rhs, config.rank_tol);
        rank = rank.min(ls.rank);
        determined &= identifiable(&ls, n_u);
        for (c, &i) in rows.iter().enumerate() {
            let theta = ls.solution.column(c);
            for s in 0..=order {
                for j in 0..n_u {
                    numerator[s][(i, j)] = theta[s * n_u + j] * unscale(s);
                }
            }
            if config.parametrization != Parametrization::Lpm {
                let n_d = if config.parametrization == Parametrization::LrmMimo { n_y } else { 1 };
                for s in 1..=order {
                    for j in 0..n_d {
                        let col = if n_d == 1 { i } else { j };
                        denominator[s - 1][(i, col)] = theta[(order + 1) * n_u + (s - 1) * n_d + j] * unscale(s);
                    }
                }
            }
            residual.set_column(i, &ls.residual.column(c));
        }
    }

    let dof = w.saturating_sub(rank);
    let residual_cov = (dof > 0).then(|| {
        let c = residual.adjoint() * &residual / C64::new(dof as f64, 0.0);
        (&c + c.adjoint()) * C64::new(0.5, 0.0)
    });

    let mut theta = LocalTheta {
        numerator,
        denominator,
        residual_cov,
        dof,
        rank,
        status: LineStatus::Valid,
    };
    if !determined {
        theta.status = LineStatus::RankDeficient;
    } else if config.parametrization != Parametrization::Lpm {
        let unstable = window.offsets.iter().any(|&r| {
            let d = theta.denominator_at(r as f64);
            let smallest = if n_y == 1 || config.parametrization == Parametrization::LrmMiso {
                d.diagonal().iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min)
            } else {
                linalg::singular_values(&d).min()
            };
            !(smallest >= DENOMINATOR_FLOOR)
        });
        if unstable {
            theta.status = LineStatus::UnstableLocalFit;
        }
    }
    theta
}

fn window_data(rec: &SpectralRecord, window: &LocalWindow) -> (CMatrix, CMatrix) {
    let w = window.lines.len();
    let u_w = CMatrix::from_fn(w, rec.n_u(), |i, j| rec.u[window.lines[i]][(j, 0)]);
    let y_w = CMatrix::from_fn(w, rec.n_y(), |i, j| rec.y[window.lines[i]][(j, 0)]);
    (u_w, y_w)
}

fn single_experiment(rec: &SpectralRecord) -> Result<()> {
    if rec.n_e() != 1 {
        return Err(Error::Dimension(format!(
            "local fits take one experiment, got {}",
            rec.n_e()
        )));
    }
    Ok(())
}

/// Local fit of a single-experiment record with the configured parametrization.
pub fn local_fit(rec: &SpectralRecord, config: &LocalFitConfig) -> Result<FrfEstimate> {
    rec.validate()?;
    config.validate()?;
    single_experiment(rec)?;
    let (n_u, n_y) = (rec.n_u(), rec.n_y());
    let b = config.resolve_half_width(n_u, n_y)?;
    let windows = build_windows(rec.n_lines(), b)?;
    let lines = windows
        .par_iter()
        .map(|win| {
            let (u_w, y_w) = window_data(rec, win);
            let theta = fit_window(win, &u_w, &y_w, config);
            if theta.status == LineStatus::Valid {
                FrfLine {
                    g: theta.numerator[0].clone(),
                    cov: theta.residual_cov.map(Covariance::Residual),
                    status: LineStatus::Valid,
                    blocks_used: 1,
                }
            } else {
                FrfLine::invalid(n_y, n_u, theta.status)
            }
        })
        .collect();
    Ok(FrfEstimate {
        freqs: rec.freqs.clone(),
        lines,
        method_tag: config.parametrization.tag().to_string(),
        n_e_used: 1,
    })
}

pub fn lpm_fit(rec: &SpectralRecord, config: &LocalFitConfig) -> Result<FrfEstimate> {
    local_fit(rec, &LocalFitConfig { parametrization: Parametrization::Lpm, ..config.clone() })
}

pub fn lrm_miso_fit(rec: &SpectralRecord, config: &LocalFitConfig) -> Result<FrfEstimate> {
    local_fit(rec, &LocalFitConfig { parametrization: Parametrization::LrmMiso, ..config.clone() })
}

pub fn lrm_mimo_fit(rec: &SpectralRecord, config: &LocalFitConfig) -> Result<FrfEstimate> {
    local_fit(rec, &LocalFitConfig { parametrization: Parametrization::LrmMimo, ..config.clone() })
}

/// Joint input-output LRM: `G = G_ry G_ru^-1`, both factors by MIMO LRM with
/// the reference as regressor input. The window follows the wider of the two
/// fits so both use the same lines.
pub fn jio_lrm(rec: &SpectralRecord, config: &LocalFitConfig) -> Result<FrfEstimate> {
    single_experiment(rec)?;
    let n_r = rec
        .n_r()
        .ok_or_else(|| Error::MissingInput("JIO-LRM needs the reference spectrum".into()))?;
    let (n_u, n_y) = (rec.n_u(), rec.n_y());
    if n_r != n_u {
        return Err(Error::Dimension(format!("JIO-LRM needs one reference per input, got {n_r} for {n_u}")));
    }
    let mut cfg = LocalFitConfig {
        parametrization: Parametrization::LrmMimo,
        ..config.clone()
    };
    let b = cfg.resolve_half_width(n_r, n_y.max(n_u))?;
    cfg.half_width = Some(b);
    let ry = local_fit(&rec.reference_to_output().expect("reference present"), &cfg)?;
    let ru = local_fit(&rec.reference_to_input().expect("reference present"), &cfg)?;
    let lines = ry
        .lines
        .par_iter()
        .zip(&ru.lines)
        .map(|(a, b)| {
            if !a.is_valid() {
                return FrfLine::invalid(n_y, n_u, a.status);
            }
            if !b.is_valid() {
                return FrfLine::invalid(n_y, n_u, b.status);
            }
            if !(linalg::cond2(&b.g) <= JIO_COND_LIMIT) {
                return FrfLine::invalid(n_y, n_u, LineStatus::IllConditioned);
            }
            match linalg::right_divide(&a.g, &b.g) {
                Some(g) => FrfLine::valid(g, 1),
                None => FrfLine::invalid(n_y, n_u, LineStatus::IllConditioned),
            }
        })
        .collect();
    Ok(FrfEstimate {
        freqs: rec.freqs.clone(),
        lines,
        method_tag: "JIO-LRM (G_ry G_ru^-1)".to_string(),
        n_e_used: 1,
    })
}

/// Runs `fit` on every experiment column separately.
pub fn per_experiment(
    rec: &SpectralRecord,
    config: &LocalFitConfig,
    fit: fn(&SpectralRecord, &LocalFitConfig) -> Result<FrfEstimate>,
) -> Result<Vec<FrfEstimate>> {
    (0..rec.n_e()).map(|e| fit(&rec.experiments(&[e])?, config)).collect()
}

/// Logarithmic average of per-experiment local estimates.
pub fn log_average_local(estimates: &[FrfEstimate]) -> Result<FrfEstimate> {
    classical::log_average_estimates(estimates)
}

#[cfg(test)]
mod tests;
