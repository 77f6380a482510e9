//! Flexible-joint manipulator: a planar serial chain in a vertical plane,
//! driven through elastic gears, with optional elastic joints inside links.
//!
//! State layout is `x = [q_m, q_a, q_e, dq_m, dq_a, dq_e]`:
//! motor angles, actuated arm joint angles and elastic coordinates. The
//! measured output is the motor velocity `dq_m`.
//!
//! Gear torque on axis `i`, with deflection `delta = r_g q_m - q_a`:
//! `tau_g = k_g delta + k3 delta^3 + d_g d(delta)/dt`.
//! Motor side: `J_m ddq_m = u - f_v dq_m - r_g tau_g`.
//! Arm side: `M(q) ddq + c(q, dq) + g(q) = [tau_g; -k_e q_e - d_e dq_e]`.

mod chain;
mod linear;
mod sim;

use serde::{Deserialize, Serialize};

pub use chain::Chain;
pub use linear::{truth_frf, DiscreteModel, Equilibrium, LinearModel};
pub use sim::{simulate_closed_loop, ControllerConfig, DisturbanceConfig, Harmonic, SimulationSettings};

use crate::{Error, Result};

/// Rigid body carried by a joint; lengths are measured along the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Body {
    /// kg
    pub mass: f64,
    /// Distance from this joint to the next one (m).
    pub length: f64,
    /// Distance from this joint to the center of mass (m).
    pub com: f64,
    /// Inertia about the center of mass (kg m^2).
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    /// Gear-driven joint of the given axis.
    Actuated(usize),
    /// Passive spring-damper joint with the given elastic index.
    Elastic(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainJoint {
    pub kind: JointKind,
    pub body: Body,
}

/// Stiffness and damping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaVector {
    /// Gear stiffness per axis (N m/rad).
    pub k_g: Vec<f64>,
    /// Gear damping per axis (N m s/rad).
    pub d_g: Vec<f64>,
    /// Elastic-joint stiffness (N m/rad).
    #[serde(default)]
    pub k_e: Vec<f64>,
    /// Elastic-joint damping (N m s/rad).
    #[serde(default)]
    pub d_e: Vec<f64>,
    /// Cubic gear stiffness per axis (N m/rad^3); zero for linear gears.
    #[serde(default)]
    pub k3: Vec<f64>,
}

impl ThetaVector {
    /// Parameters that a gray-box fit estimates, in a fixed order:
    /// `k_g, d_g, k_e, d_e`.
    pub fn free(&self) -> Vec<f64> {
        [&self.k_g, &self.d_g, &self.k_e, &self.d_e]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Inverse of [`ThetaVector::free`]; cubic terms are kept.
    pub fn with_free(&self, values: &[f64]) -> ThetaVector {
        let mut it = values.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        ThetaVector {
            k_g: take(self.k_g.len()),
            d_g: take(self.d_g.len()),
            k_e: take(self.k_e.len()),
            d_e: take(self.d_e.len()),
            k3: self.k3.clone(),
        }
    }

    /// Names matching [`ThetaVector::free`], 1-based.
    pub fn free_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, v) in [("k_g", &self.k_g), ("d_g", &self.d_g), ("k_e", &self.k_e), ("d_e", &self.d_e)] {
            names.extend((1..=v.len()).map(|i| format!("{prefix}{i}")));
        }
        names
    }

    /// Units matching [`ThetaVector::free`].
    pub fn free_units(&self) -> Vec<&'static str> {
        let mut units = Vec::new();
        units.extend(std::iter::repeat_n("N m/rad", self.k_g.len()));
        units.extend(std::iter::repeat_n("N m s/rad", self.d_g.len()));
        units.extend(std::iter::repeat_n("N m/rad", self.k_e.len()));
        units.extend(std::iter::repeat_n("N m s/rad", self.d_e.len()));
        units
    }

    pub fn cubic(&self, axis: usize) -> f64 {
        self.k3.get(axis).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantModel {
    /// Motor rotor inertias (kg m^2).
    pub motor_inertia: Vec<f64>,
    /// Inverse gear ratios `r_g` (arm angle per motor angle).
    pub gear_ratio: Vec<f64>,
    /// Motor viscous friction (N m s/rad).
    pub viscous: Vec<f64>,
    /// Joints from base to tip.
    pub chain: Vec<ChainJoint>,
    /// m/s^2, acting along -y.
    pub gravity: f64,
    pub theta: ThetaVector,
}

impl PlantModel {
    /// Three axes in a vertical plane with an elastic joint inside the first
    /// link and cubic gear stiffness on axes 1 and 2.
    pub fn default_three_axis() -> PlantModel {
        let body = |mass: f64, length: f64| Body {
            mass,
            length,
            com: length / 2.0,
            inertia: mass * length * length / 12.0,
        };
        PlantModel {
            motor_inertia: vec![2e-4, 5e-5, 5e-6],
            gear_ratio: vec![0.01, 0.01, 0.01],
            viscous: vec![2e-4, 1e-4, 2e-5],
            chain: vec![
                ChainJoint { kind: JointKind::Actuated(0), body: body(4.0, 0.25) },
                ChainJoint { kind: JointKind::Elastic(0), body: body(4.0, 0.25) },
                ChainJoint { kind: JointKind::Actuated(1), body: body(5.0, 0.4) },
                ChainJoint { kind: JointKind::Actuated(2), body: body(2.0, 0.2) },
            ],
            gravity: 9.81,
            theta: ThetaVector {
                k_g: vec![1.6e4, 5e3, 5e2],
                d_g: vec![15.0, 4.0, 0.3],
                k_e: vec![5e3],
                d_e: vec![4.0],
                k3: vec![1.6e8, 5e7, 0.0],
            },
        }
    }

    /// One axis driving one body; a two-mass drive train.
    pub fn single_axis(motor_inertia: f64, gear_ratio: f64, body: Body, k_g: f64, d_g: f64) -> PlantModel {
        PlantModel {
            motor_inertia: vec![motor_inertia],
            gear_ratio: vec![gear_ratio],
            viscous: vec![0.0],
            chain: vec![ChainJoint { kind: JointKind::Actuated(0), body }],
            gravity: 0.0,
            theta: ThetaVector {
                k_g: vec![k_g],
                d_g: vec![d_g],
                k_e: Vec::new(),
                d_e: Vec::new(),
                k3: Vec::new(),
            },
        }
    }

    pub fn n_axes(&self) -> usize {
        self.motor_inertia.len()
    }

    pub fn n_elastic(&self) -> usize {
        self.chain.len() - self.n_axes()
    }

    /// Position coordinates `[q_m, q_a, q_e]`.
    pub fn n_coords(&self) -> usize {
        self.n_axes() + self.chain.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_coords()
    }

    /// Index of chain joint `j` in the arm vector `[q_a, q_e]`.
    pub fn arm_index(&self, j: usize) -> usize {
        match self.chain[j].kind {
            JointKind::Actuated(i) => i,
            JointKind::Elastic(e) => self.n_axes() + e,
        }
    }

    pub fn with_theta(&self, theta: ThetaVector) -> PlantModel {
        PlantModel { theta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlant(m));
        let n = self.n_axes();
        if n == 0 {
            return bad("at least one axis is required".into());
        }
        if self.gear_ratio.len() != n || self.viscous.len() != n {
            return bad("motor_inertia, gear_ratio and viscous must have one entry per axis".into());
        }
        if self.motor_inertia.iter().any(|&j| !(j > 0.0)) {
            return bad("motor inertias must be positive".into());
        }
        if self.gear_ratio.iter().any(|&r| r == 0.0 || !r.is_finite()) {
            return bad("gear ratios must be finite and nonzero".into());
        }
        if self.viscous.iter().any(|&f| !(f >= 0.0)) {
            return bad("viscous friction must be non-negative".into());
        }
        if self.chain.len() < n {
            return bad("chain has fewer joints than axes".into());
        }
        let mut seen_a = vec![false; n];
        let mut seen_e = vec![false; self.n_elastic()];
        for j in &self.chain {
            let b = &j.body;
            if !(b.mass > 0.0 && b.inertia > 0.0 && b.length >= 0.0 && b.com.is_finite()) {
                return bad("bodies need positive mass and inertia".into());
            }
            let slot = match j.kind {
                JointKind::Actuated(i) => seen_a.get_mut(i),
                JointKind::Elastic(e) => seen_e.get_mut(e),
            };
            match slot {
                Some(s) if !*s => *s = true,
                _ => return bad("joint indices must be unique and contiguous".into()),
            }
        }
        let t = &self.theta;
        if t.k_g.len() != n || t.d_g.len() != n {
            return bad("k_g and d_g need one entry per axis".into());
        }
        if t.k_e.len() != self.n_elastic() || t.d_e.len() != self.n_elastic() {
            return bad("k_e and d_e need one entry per elastic joint".into());
        }
        if !t.k3.is_empty() && t.k3.len() != n {
            return bad("k3 must be empty or have one entry per axis".into());
        }
        if t.k_g.iter().chain(&t.k_e).any(|&k| !(k > 0.0)) {
            return bad("stiffnesses must be positive".into());
        }
        if t.d_g.iter().chain(&t.d_e).chain(&t.k3).any(|&d| !(d >= 0.0)) {
            return bad("dampings and cubic stiffnesses must be non-negative".into());
        }
        if !self.gravity.is_finite() {
            return bad("gravity must be finite".into());
        }
        Ok(())
    }

    pub fn chain(&self) -> Chain<'_> {
        Chain::new(self)
    }

    /// State derivative `dx/dt` for motor torques `u`.
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut dx = vec![0.0; x.len()];
        self.dynamics_into(x, u, &mut dx)?;
        Ok(dx)
    }

    pub(crate) fn dynamics_into(&self, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<()> {
        let n = self.n_axes();
        let nc = self.n_coords();
        let na = self.chain.len();
        if x.len() != 2 * nc || u.len() != n {
            return Err(Error::Dimension(format!(
                "dynamics expects a state of {} and {} inputs",
                2 * nc,
                n
            )));
        }
        let (q, dq) = x.split_at(nc);
        let (qm, qarm) = q.split_at(n);
        let (dqm, dqarm) = dq.split_at(n);
        let t = &self.theta;

        let mut tau = vec![0.0; na];
        for i in 0..n {
            let r = self.gear_ratio[i];
            let delta = r * qm[i] - qarm[i];
            let ddelta = r * dqm[i] - dqarm[i];
            let tau_g = t.k_g[i] * delta + t.cubic(i) * delta.powi(3) + t.d_g[i] * ddelta;
            tau[i] = tau_g;
            dx[nc + i] = (u[i] - self.viscous[i] * dqm[i] - r * tau_g) / self.motor_inertia[i];
        }
        for e in 0..self.n_elastic() {
            tau[n + e] = -t.k_e[e] * qarm[n + e] - t.d_e[e] * dqarm[n + e];
        }
        dx[..nc].copy_from_slice(dq);

        let chain = self.chain();
        let (m, bias) = chain.mass_and_bias(qarm, dqarm);
        let rhs = nalgebra::DVector::from_iterator(na, (0..na).map(|j| tau[j] - bias[j]));
        let acc = m
            .cholesky()
            .ok_or_else(|| Error::InvalidPlant("arm mass matrix is not positive definite".into()))?
            .solve(&rhs);
        dx[nc + n..].copy_from_slice(acc.as_slice());
        Ok(())
    }

    /// Kinetic plus potential energy, including springs.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let n = self.n_axes();
        let nc = self.n_coords();
        let (q, dq) = x.split_at(nc);
        let (qm, qarm) = q.split_at(n);
        let (dqm, dqarm) = dq.split_at(n);
        let t = &self.theta;
        let chain = self.chain();
        let m = chain.mass_matrix(qarm);
        let v = nalgebra::DVector::from_column_slice(dqarm);
        let mut e = 0.5 * v.dot(&(&m * &v)) + chain.potential(qarm);
        for i in 0..n {
            let delta = self.gear_ratio[i] * qm[i] - qarm[i];
            e += 0.5 * self.motor_inertia[i] * dqm[i] * dqm[i];
            e += 0.5 * t.k_g[i] * delta * delta + 0.25 * t.cubic(i) * delta.powi(4);
        }
        for k in 0..self.n_elastic() {
            e += 0.5 * t.k_e[k] * qarm[n + k] * qarm[n + k];
        }
        e
    }
}
