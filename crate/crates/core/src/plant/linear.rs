//! Equilibria, linearization and the resulting frequency responses.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::PlantModel;
use crate::frf::FrfEstimate;
use crate::{linalg, matfun, CMatrix, Error, Result, C64};

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

/// Static operating point for a given arm configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    /// Arm vector `[q_a, q_e]`.
    pub q_arm: Vec<f64>,
    pub q_m: Vec<f64>,
    /// Gear deflections `r_g q_m - q_a`.
    pub deflection: Vec<f64>,
    /// Holding torques.
    pub u: Vec<f64>,
    /// Full state with zero velocities.
    pub x: Vec<f64>,
}

/// `M z'' + D z' + K z = B u` around an equilibrium, with `z = [q_m, q_a, q_e]`,
/// and its first-order form `x' = A x + B u`, `y = C x`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub equilibrium: Equilibrium,
}

/// Zero-order-hold sampled model `x[n+1] = Phi x[n] + Gamma u[n]`.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sample_time: f64,
}

impl PlantModel {
    /// Equilibrium with actuated joints at `q_a0`; elastic coordinates and
    /// gear deflections balance gravity.
    pub fn equilibrium(&self, q_a0: &[f64]) -> Result<Equilibrium> {
        self.validate()?;
        let n = self.n_axes();
        let ne = self.n_elastic();
        if q_a0.len() != n {
            return Err(Error::Dimension(format!("configuration needs {n} joint angles, got {}", q_a0.len())));
        }
        let chain = self.chain();
        let mut q_arm: Vec<f64> = q_a0.iter().copied().chain(std::iter::repeat_n(0.0, ne)).collect();
        let k_e = &self.theta.k_e;

        let residual = |q: &[f64]| -> DVector<f64> {
            let g = chain.gravity_torque(q);
            DVector::from_fn(ne, |e, _| g[n + e] + k_e[e] * q[n + e])
        };
        let scale = chain.gravity_torque(&q_arm).amax().max(1.0);
        let mut f = residual(&q_arm);
        let mut iter = 0;
        while f.amax() > NEWTON_TOL * scale {
            if iter == NEWTON_MAX_ITER {
                return Err(Error::Equilibrium { residual: f.amax() });
            }
            iter += 1;
            let h = chain.gravity_hessian(&q_arm);
            let jac = DMatrix::from_fn(ne, ne, |i, j| h[(n + i, n + j)] + if i == j { k_e[i] } else { 0.0 });
            let step = jac
                .lu()
                .solve(&(-&f))
                .ok_or(Error::Equilibrium { residual: f.amax() })?;
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = q_arm
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| if i >= n { q + alpha * step[i - n] } else { q })
                    .collect();
                let ft = residual(&trial);
                if ft.amax() < f.amax() || alpha < 1e-6 {
                    q_arm = trial;
                    f = ft;
                    break;
                }
                alpha *= 0.5;
            }
        }

        let g = chain.gravity_torque(&q_arm);
        let mut deflection = vec![0.0; n];
        let mut q_m = vec![0.0; n];
        let mut u = vec![0.0; n];
        for i in 0..n {
            let (k, k3) = (self.theta.k_g[i], self.theta.cubic(i));
            let tau = g[i];
            // k d + k3 d^3 = tau is monotone in d
            let mut d = tau / k;
            for _ in 0..NEWTON_MAX_ITER {
                let r = k * d + k3 * d * d * d - tau;
                if r.abs() <= NEWTON_TOL * scale {
                    break;
                }
                d -= r / (k + 3.0 * k3 * d * d);
            }
            deflection[i] = d;
            q_m[i] = (q_a0[i] + d) / self.gear_ratio[i];
            u[i] = self.gear_ratio[i] * tau;
        }
        let mut x = q_m.clone();
        x.extend(&q_arm);
        x.extend(std::iter::repeat_n(0.0, self.n_coords()));
        Ok(Equilibrium {
            q_arm,
            q_m,
            deflection,
            u,
            x,
        })
    }

    /// Linearization at the equilibrium for `q_a0`.
    pub fn linearize(&self, q_a0: &[f64]) -> Result<LinearModel> {
        let eq = self.equilibrium(q_a0)?;
        let n = self.n_axes();
        let nc = self.n_coords();
        let t = &self.theta;
        let chain = self.chain();

        let mut mass = DMatrix::zeros(nc, nc);
        let mut damping = DMatrix::zeros(nc, nc);
        let mut stiffness = DMatrix::zeros(nc, nc);
        let mut input = DMatrix::zeros(nc, n);
        mass.view_mut((n, n), (nc - n, nc - n)).copy_from(&chain.mass_matrix(&eq.q_arm));
        stiffness
            .view_mut((n, n), (nc - n, nc - n))
            .copy_from(&chain.gravity_hessian(&eq.q_arm));
        for i in 0..n {
            let r = self.gear_ratio[i];
            let k = t.k_g[i] + 3.0 * t.cubic(i) * eq.deflection[i].powi(2);
            let d = t.d_g[i];
            let (m, a) = (i, n + i);
            mass[(m, m)] = self.motor_inertia[i];
            input[(m, i)] = 1.0;
            stiffness[(m, m)] += r * r * k;
            stiffness[(m, a)] -= r * k;
            stiffness[(a, m)] -= r * k;
            stiffness[(a, a)] += k;
            damping[(m, m)] += self.viscous[i] + r * r * d;
            damping[(m, a)] -= r * d;
            damping[(a, m)] -= r * d;
            damping[(a, a)] += d;
        }
        for e in 0..self.n_elastic() {
            let j = 2 * n + e;
            stiffness[(j, j)] += t.k_e[e];
            damping[(j, j)] += t.d_e[e];
        }

        let chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidPlant("mass matrix is not positive definite".into()))?;
        let mut a = DMatrix::zeros(2 * nc, 2 * nc);
        a.view_mut((0, nc), (nc, nc)).fill_with_identity();
        a.view_mut((nc, 0), (nc, nc)).copy_from(&(-chol.solve(&stiffness)));
        a.view_mut((nc, nc), (nc, nc)).copy_from(&(-chol.solve(&damping)));
        let mut b = DMatrix::zeros(2 * nc, n);
        b.view_mut((nc, 0), (nc, n)).copy_from(&chol.solve(&input));
        let mut c = DMatrix::zeros(n, 2 * nc);
        for i in 0..n {
            c[(i, nc + i)] = 1.0;
        }
        Ok(LinearModel {
            mass,
            damping,
            stiffness,
            input,
            a,
            b,
            c,
            equilibrium: eq,
        })
    }
}

impl LinearModel {
    /// `G(jw) = jw S (-w^2 M + jw D + K)^-1 B`, with `S` selecting `q_m`.
    pub fn frf_continuous(&self, omegas: &[f64]) -> Result<Vec<CMatrix>> {
        let n = self.input.ncols();
        let to_c = |m: &DMatrix<f64>| m.map(|v| C64::new(v, 0.0));
        let (m, d, k, b) = (to_c(&self.mass), to_c(&self.damping), to_c(&self.stiffness), to_c(&self.input));
        omegas
            .iter()
            .map(|&w| {
                let s = C64::new(0.0, w);
                let z = &m * (s * s) + &d * s + &k;
                let q = linalg::solve(&z, &b).ok_or_else(|| Error::InvalidPlant(format!("singular dynamic stiffness at {w} rad/s")))?;
                Ok(q.rows(0, n) * s)
            })
            .collect()
    }

    /// Eigenvalues of `A`.
    pub fn poles(&self) -> Result<Vec<C64>> {
        Ok(matfun::eig(&self.a.map(|v| C64::new(v, 0.0)))?.values)
    }

    /// Zero-order-hold discretization with sample time `ts`.
    pub fn discretize(&self, ts: f64) -> DiscreteModel {
        let (nx, nu) = (self.a.nrows(), self.b.ncols());
        let mut aug = DMatrix::zeros(nx + nu, nx + nu);
        aug.view_mut((0, 0), (nx, nx)).copy_from(&(&self.a * ts));
        aug.view_mut((0, nx), (nx, nu)).copy_from(&(&self.b * ts));
        let e = aug.exp();
        DiscreteModel {
            phi: e.view((0, 0), (nx, nx)).into_owned(),
            gamma: e.view((0, nx), (nx, nu)).into_owned(),
            c: self.c.clone(),
            sample_time: ts,
        }
    }
}

impl DiscreteModel {
    /// `G(z) = C (z I - Phi)^-1 Gamma` at `z = exp(j w Ts)`.
    pub fn frf(&self, omegas: &[f64]) -> Result<Vec<CMatrix>> {
        let phi = self.phi.map(|v| C64::new(v, 0.0));
        let gamma = self.gamma.map(|v| C64::new(v, 0.0));
        let c = self.c.map(|v| C64::new(v, 0.0));
        let zs: Vec<C64> = omegas.iter().map(|&w| C64::from_polar(1.0, w * self.sample_time)).collect();
        if let Some(g) = modal_frf(&phi, &gamma, &c, &zs) {
            return Ok(g);
        }
        let nx = phi.nrows();
        zs.iter()
            .zip(omegas)
            .map(|(&z, w)| {
                let lhs = CMatrix::identity(nx, nx) * z - &phi;
                let x = linalg::solve(&lhs, &gamma)
                    .ok_or_else(|| Error::InvalidPlant(format!("pole on the unit circle at {w} rad/s")))?;
                Ok(&c * x)
            })
            .collect()
    }

    /// One step of the sampled model.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.phi * x + &self.gamma * u
    }
}

/// True FRF at `omegas` (rad/s) for configuration `q_a0`. With a sample
/// time the zero-order-hold sampled response is returned, which is what a
/// sampled experiment measures; otherwise the continuous-time response.
pub fn truth_frf(model: &PlantModel, q_a0: &[f64], omegas: &[f64], sample_time: Option<f64>) -> Result<FrfEstimate> {
    let lin = model.linearize(q_a0)?;
    let g = match sample_time {
        Some(ts) => {
            if omegas.iter().any(|&w| w * ts >= PI) {
                return Err(Error::Dimension("frequencies above Nyquist".into()));
            }
            lin.discretize(ts).frf(omegas)?
        }
        None => lin.frf_continuous(omegas)?,
    };
    Ok(FrfEstimate::from_matrices(omegas.to_vec(), g, "truth", 0))
}

/// `C (z I - A)^-1 B` through an eigendecomposition of `A`; `None` when
/// the eigenvectors are too ill-conditioned or a pole sits on a point.
fn modal_frf(a: &CMatrix, b: &CMatrix, c: &CMatrix, points: &[C64]) -> Option<Vec<CMatrix>> {
    const MODAL_COND_LIMIT: f64 = 1e8;
    let e = matfun::eig(a).ok()?;
    if !(e.cond_v < MODAL_COND_LIMIT) {
        return None;
    }
    let cv = c * &e.vectors;
    let vb = linalg::solve(&e.vectors, b)?;
    let n = a.nrows();
    let mut out = Vec::with_capacity(points.len());
    for &z in points {
        let mut scaled = vb.clone();
        for k in 0..n {
            let d = z - e.values[k];
            if d.norm() < 1e-14 * z.norm().max(1.0) {
                return None;
            }
            let inv = d.inv();
            scaled.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
        out.push(&cv * scaled);
    }
    Some(out)
}
