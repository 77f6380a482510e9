//! Classical multi-experiment FRF estimators.
//!
//! The `n_e = M n_u` experiments of a [`SpectralRecord`] are partitioned into
//! `M` blocks of `n_u` experiments. Every estimator works line by line; a
//! line that cannot be estimated is flagged instead of failing the whole
//! estimate.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frf::{Covariance, FrfEstimate, FrfLine, LineStatus};
use crate::linalg::{self, SINGULAR_COND};
use crate::matfun;
use crate::sigproc::SpectralRecord;
use crate::{CMatrix, Error, Result, C64};

/// Relative size of the perturbation applied before retrying a failed
/// eigendecomposition.
pub const PERTURBATION: f64 = 1e-10;

/// Partition of experiment columns into blocks of `n_u` experiments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentBlocks {
    blocks: Vec<Vec<usize>>,
}

impl ExperimentBlocks {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() || blocks[0].is_empty() {
            return Err(Error::Dimension("at least one non-empty block is required".into()));
        }
        if blocks.iter().any(|b| b.len() != blocks[0].len()) {
            return Err(Error::Dimension("blocks differ in size".into()));
        }
        Ok(ExperimentBlocks { blocks })
    }

    /// Consecutive blocks `[0..n_u), [n_u..2 n_u), ...`.
    pub fn contiguous(n_e: usize, n_u: usize) -> Result<Self> {
        if n_u == 0 || n_e == 0 || n_e % n_u != 0 {
            return Err(Error::Dimension(format!(
                "{n_e} experiments cannot be split into blocks of {n_u}"
            )));
        }
        Self::new((0..n_e / n_u).map(|m| (m * n_u..(m + 1) * n_u).collect()).collect())
    }

    /// Number of blocks `M`.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn n_experiments(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    fn check(&self, rec: &SpectralRecord) -> Result<()> {
        let nu = rec.n_u();
        if self.blocks[0].len() != nu {
            return Err(Error::Dimension(format!(
                "blocks hold {} experiments but the system has {nu} inputs",
                self.blocks[0].len()
            )));
        }
        if let Some(&c) = self.blocks.iter().flatten().find(|&&c| c >= rec.n_e()) {
            return Err(Error::Dimension(format!("experiment {c} not in record")));
        }
        Ok(())
    }
}

fn columns(m: &CMatrix, cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Deterministic relative perturbation of size [`PERTURBATION`].
pub fn perturbed(m: &CMatrix, seed: u64) -> CMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = PERTURBATION * m.norm().max(f64::MIN_POSITIVE);
    m + CMatrix::from_fn(m.nrows(), m.ncols(), |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
    })
}

/// `G = [sum Y U^H] [sum U U^H]^-1` at every line.
pub fn h1_estimate(rec: &SpectralRecord, blocks: &ExperimentBlocks) -> Result<FrfEstimate> {
    blocks.check(rec)?;
    cross_spectral_estimate(rec, blocks, &rec.u, "H1")
}

/// `G = [sum Y R^H] [sum U R^H]^-1` at every line.
pub fn jio_classical(rec: &SpectralRecord, blocks: &ExperimentBlocks) -> Result<FrfEstimate> {
    blocks.check(rec)?;
    let r = rec
        .r
        .as_ref()
        .ok_or_else(|| Error::MissingInput("JIO estimation needs the reference spectra".into()))?;
    if r[0].nrows() != rec.n_u() {
        return Err(Error::Dimension(format!(
            "JIO needs one reference per input ({} references, {} inputs)",
            r[0].nrows(),
            rec.n_u()
        )));
    }
    cross_spectral_estimate(rec, blocks, r, "JIO")
}

fn cross_spectral_estimate(
    rec: &SpectralRecord,
    blocks: &ExperimentBlocks,
    instrument: &[CMatrix],
    tag: &str,
) -> Result<FrfEstimate> {
    let (ny, nu) = (rec.n_y(), rec.n_u());
    let mut lines = Vec::with_capacity(rec.n_lines());
    for k in 0..rec.n_lines() {
        let mut syx = CMatrix::zeros(ny, instrument[k].nrows());
        let mut sux = CMatrix::zeros(nu, instrument[k].nrows());
        for b in blocks.blocks() {
            let x = columns(&instrument[k], b);
            syx += columns(&rec.y[k], b) * x.adjoint();
            sux += columns(&rec.u[k], b) * x.adjoint();
        }
        let line = if linalg::cond2(&sux) > SINGULAR_COND {
            FrfLine::invalid(ny, nu, LineStatus::SingularInput)
        } else {
            match linalg::right_divide(&syx, &sux) {
                Some(g) => FrfLine::valid(g, blocks.len()),
                None => FrfLine::invalid(ny, nu, LineStatus::SingularInput),
            }
        };
        lines.push(line);
    }
    Ok(FrfEstimate {
        freqs: rec.freqs.clone(),
        lines,
        method_tag: tag.to_string(),
        n_e_used: blocks.n_experiments(),
    })
}

/// Per-block estimates `Y[m] U[m]^-1`; `None` where `U[m]` is singular.
pub fn block_estimates(rec: &SpectralRecord, blocks: &ExperimentBlocks) -> Result<Vec<Vec<Option<CMatrix>>>> {
    blocks.check(rec)?;
    Ok((0..rec.n_lines())
        .map(|k| {
            blocks
                .blocks()
                .iter()
                .map(|b| {
                    let u = columns(&rec.u[k], b);
                    if linalg::cond2(&u) > SINGULAR_COND {
                        None
                    } else {
                        linalg::right_divide(&columns(&rec.y[k], b), &u)
                    }
                })
                .collect()
        })
        .collect())
}

/// `(1/M^2) sum vec(G_m - center) vec(G_m - center)^H`.
pub fn spread_covariance(gs: &[&CMatrix], center: &CMatrix) -> CMatrix {
    let n = center.len();
    let m = gs.len() as f64;
    let mut cov = CMatrix::zeros(n, n);
    for g in gs {
        let d = linalg::vec(&(*g - center));
        cov += &d * d.adjoint();
    }
    cov / C64::new(m * m, 0.0)
}

/// Arithmetic mean of the per-block estimates.
pub fn ari_estimate(rec: &SpectralRecord, blocks: &ExperimentBlocks) -> Result<FrfEstimate> {
    let per_line = block_estimates(rec, blocks)?;
    let (ny, nu) = (rec.n_y(), rec.n_u());
    let lines = per_line
        .iter()
        .map(|gs| {
            let valid: Vec<&CMatrix> = gs.iter().flatten().collect();
            if valid.is_empty() {
                return FrfLine::invalid(ny, nu, LineStatus::NoValidBlocks);
            }
            let mean = valid.iter().fold(CMatrix::zeros(ny, nu), |acc, g| acc + *g)
                / C64::new(valid.len() as f64, 0.0);
            let cov = (valid.len() >= 2).then(|| Covariance::Vec(spread_covariance(&valid, &mean)));
            FrfLine {
                g: mean,
                cov,
                status: LineStatus::Valid,
                blocks_used: valid.len(),
            }
        })
        .collect();
    Ok(FrfEstimate {
        freqs: rec.freqs.clone(),
        lines,
        method_tag: "ARI".into(),
        n_e_used: blocks.n_experiments(),
    })
}

/// Phase-alignment matrix `P = V diag(exp(-i arg lambda)) V^-1` of `g1`.
///
/// A defective `g1` is retried once after a tiny deterministic perturbation.
pub fn phase_align_matrix(g1: &CMatrix) -> Result<CMatrix> {
    if !g1.is_square() {
        return Err(Error::Dimension("phase alignment needs n_u = n_y".into()));
    }
    let try_once = |m: &CMatrix| -> Result<CMatrix> {
        let e = matfun::eig(m)?;
        if e.is_defective() {
            return Err(Error::Defective { cond: e.cond_v });
        }
        e.apply(|l| C64::from_polar(1.0, -l.arg()))
    };
    try_once(g1).or_else(|_| try_once(&perturbed(g1, 0x5eed)))
}

fn log_with_retry(m: &CMatrix) -> Result<CMatrix> {
    match matfun::mat_log(m) {
        Err(Error::Defective { .. }) => matfun::mat_log(&perturbed(m, 0x106)),
        other => other,
    }
}

fn exp_with_retry(m: &CMatrix) -> Result<CMatrix> {
    match matfun::mat_exp(m) {
        Err(Error::Defective { .. }) => matfun::mat_exp(&perturbed(m, 0xe4e)),
        other => other,
    }
}

/// Result of logarithmic averaging at one line.
#[derive(Debug, Clone)]
pub struct LogAverage {
    pub g: CMatrix,
    /// Spread covariance; `None` with fewer than two contributing blocks.
    pub cov: Option<CMatrix>,
    /// Index (into the supplied list) of the block that produced `P`.
    pub p_block: usize,
    pub used: usize,
}

/// `P^-1 exp(mean log(P G_m))` with `P` from the first block that admits an
/// eigendecomposition. A single block is returned unchanged.
pub fn log_average(gs: &[CMatrix]) -> Result<LogAverage> {
    let first = gs
        .first()
        .ok_or_else(|| Error::Dimension("no blocks to average".into()))?;
    if !first.is_square() {
        return Err(Error::Dimension("logarithmic averaging needs n_u = n_y".into()));
    }
    if gs.len() == 1 {
        return Ok(LogAverage {
            g: first.clone(),
            cov: None,
            p_block: 0,
            used: 1,
        });
    }
    let (p_block, p) = gs
        .iter()
        .enumerate()
        .find_map(|(i, g)| phase_align_matrix(g).ok().map(|p| (i, p)))
        .ok_or(Error::Defective { cond: f64::INFINITY })?;
    let mut sum = CMatrix::zeros(first.nrows(), first.ncols());
    let mut used = Vec::with_capacity(gs.len());
    let mut last_err = None;
    for g in gs {
        match log_with_retry(&(&p * g)) {
            Ok(l) => {
                sum += l;
                used.push(g);
            }
            Err(e) => {
                debug!("block excluded from logarithmic average: {e}");
                last_err = Some(e);
            }
        }
    }
    if used.is_empty() {
        return Err(last_err.unwrap_or(Error::Defective { cond: f64::INFINITY }));
    }
    let mean = sum / C64::new(used.len() as f64, 0.0);
    let e = exp_with_retry(&mean)?;
    let g = linalg::solve(&p, &e).ok_or(Error::Defective { cond: f64::INFINITY })?;
    let cov = (used.len() >= 2).then(|| spread_covariance(&used, &g));
    Ok(LogAverage {
        g,
        cov,
        p_block,
        used: used.len(),
    })
}

fn log_average_lines(
    freqs: &[f64],
    per_line: &[Vec<Option<CMatrix>>],
    ny: usize,
    nu: usize,
    base_tag: &str,
    n_e_used: usize,
) -> FrfEstimate {
    let mut fallback = 0usize;
    let lines = per_line
        .iter()
        .map(|gs| {
            let valid: Vec<CMatrix> = gs.iter().flatten().cloned().collect();
            if valid.is_empty() {
                return FrfLine::invalid(ny, nu, LineStatus::NoValidBlocks);
            }
            let first_valid_is_block_one = gs[0].is_some();
            match log_average(&valid) {
                Ok(avg) => {
                    if avg.p_block != 0 || !first_valid_is_block_one {
                        fallback += 1;
                    }
                    FrfLine {
                        g: avg.g,
                        cov: avg.cov.map(Covariance::Vec),
                        status: LineStatus::Valid,
                        blocks_used: avg.used,
                    }
                }
                Err(Error::BranchCut { .. }) => FrfLine::invalid(ny, nu, LineStatus::BranchCut),
                Err(_) => FrfLine::invalid(ny, nu, LineStatus::Defective),
            }
        })
        .collect();
    let method_tag = if fallback > 0 {
        format!("{base_tag} (P from a later block at {fallback} lines)")
    } else {
        base_tag.to_string()
    };
    FrfEstimate {
        freqs: freqs.to_vec(),
        lines,
        method_tag,
        n_e_used,
    }
}

/// Logarithmic averaging of the per-block estimates `Y[m] U[m]^-1`.
pub fn log_estimate(rec: &SpectralRecord, blocks: &ExperimentBlocks) -> Result<FrfEstimate> {
    if rec.n_u() != rec.n_y() {
        return Err(Error::Dimension("logarithmic averaging needs n_u = n_y".into()));
    }
    let per_line = block_estimates(rec, blocks)?;
    Ok(log_average_lines(
        &rec.freqs,
        &per_line,
        rec.n_y(),
        rec.n_u(),
        "LOG",
        blocks.n_experiments(),
    ))
}

/// Logarithmic averaging of independent estimates on a shared grid, one
/// estimate per experiment. Invalid lines of an input are skipped.
pub fn log_average_estimates(estimates: &[FrfEstimate]) -> Result<FrfEstimate> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Dimension("no estimates to average".into()))?;
    if estimates.iter().any(|e| !e.same_grid(first)) {
        return Err(Error::Dimension("estimates use different frequency grids".into()));
    }
    if estimates.len() == 1 {
        return Ok(first.clone());
    }
    let (ny, nu) = (first.n_y(), first.n_u());
    if ny != nu {
        return Err(Error::Dimension("logarithmic averaging needs n_u = n_y".into()));
    }
    let per_line: Vec<Vec<Option<CMatrix>>> = (0..first.n_lines())
        .map(|k| {
            estimates
                .iter()
                .map(|e| e.lines[k].is_valid().then(|| e.lines[k].g.clone()))
                .collect()
        })
        .collect();
    let tag = format!("{}+LOG", first.method_tag);
    let n_e = estimates.iter().map(|e| e.n_e_used).sum();
    Ok(log_average_lines(&first.freqs, &per_line, ny, nu, &tag, n_e))
}
