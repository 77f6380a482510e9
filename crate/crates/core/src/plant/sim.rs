//! Closed-loop simulation with a position/velocity cascade.

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PlantModel;
use crate::sigproc::{Excitation, TimeRecord};
use crate::{Error, Result};

const UNSTABLE_NORM: f64 = 1e6;
const SATURATION_WARN_FRACTION: f64 = 0.01;
/// Real-axis extent of the classical RK4 stability region.
const RK4_STABILITY_RADIUS: f64 = 2.785;
const STABILITY_MARGIN: f64 = 0.5;

/// Per-axis P position loop around a PI velocity loop, in motor coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// 1/s
    pub kp: Vec<f64>,
    /// N m s/rad
    pub kv: Vec<f64>,
    /// N m/rad
    pub ki: Vec<f64>,
    /// Torque limit (N m).
    pub saturation: Vec<f64>,
}

impl ControllerConfig {
    /// Gains matched to [`PlantModel::default_three_axis`].
    pub fn default_three_axis() -> ControllerConfig {
        ControllerConfig {
            kp: vec![8.0, 8.0, 8.0],
            kv: vec![2e-2, 5e-3, 5e-4],
            ki: vec![0.15, 0.04, 4e-3],
            saturation: vec![5.0, 2.0, 0.5],
        }
    }

    pub fn validate(&self, n_axes: usize) -> Result<()> {
        let v = [&self.kp, &self.kv, &self.ki, &self.saturation];
        if v.iter().any(|g| g.len() != n_axes) {
            return Err(Error::Config(format!("controller gains need {n_axes} entries each")));
        }
        if v.iter().take(3).flat_map(|g| g.iter()).any(|&g| !(g >= 0.0)) {
            return Err(Error::Config("controller gains must be non-negative".into()));
        }
        if self.saturation.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("torque saturation must be positive".into()));
        }
        Ok(())
    }
}

/// `amplitude sin(order q_m + phase)` on one axis, `q_m` in motor radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub axis: usize,
    /// Periods per motor revolution.
    pub order: f64,
    pub amplitude: f64,
    /// rad
    pub phase: f64,
}

impl Harmonic {
    fn eval(&self, q_m: f64) -> f64 {
        self.amplitude * (self.order * q_m + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// White motor-position noise per axis (rad).
    pub noise_std: Vec<f64>,
    /// Added to the applied torque (N m).
    #[serde(default)]
    pub torque_ripple: Vec<Harmonic>,
    /// Added to the measured motor position (rad).
    #[serde(default)]
    pub position_disturbance: Vec<Harmonic>,
    pub seed: u64,
}

impl DisturbanceConfig {
    pub fn none(n_axes: usize) -> DisturbanceConfig {
        DisturbanceConfig {
            noise_std: vec![0.0; n_axes],
            torque_ripple: Vec::new(),
            position_disturbance: Vec::new(),
            seed: 0,
        }
    }

    /// Levels giving a visibly noisy single-experiment estimate.
    pub fn default_three_axis(seed: u64) -> DisturbanceConfig {
        let h = |axis, order, amplitude, phase| Harmonic {
            axis,
            order,
            amplitude,
            phase,
        };
        DisturbanceConfig {
            noise_std: vec![1.2e-3, 1.2e-3, 2.5e-3],
            torque_ripple: vec![h(0, 6.0, 1e-3, 0.3), h(1, 6.0, 5e-4, 1.1), h(2, 12.0, 5e-5, 2.0)],
            position_disturbance: vec![h(0, 12.0, 2e-4, 0.0), h(1, 12.0, 2e-4, 0.7), h(2, 24.0, 2e-4, 1.4)],
            seed,
        }
    }

    pub fn validate(&self, n_axes: usize) -> Result<()> {
        if self.noise_std.len() != n_axes {
            return Err(Error::Config(format!("noise_std needs {n_axes} entries")));
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        for h in self.torque_ripple.iter().chain(&self.position_disturbance) {
            if h.axis >= n_axes || !(h.amplitude >= 0.0) || !h.order.is_finite() || !h.phase.is_finite() {
                return Err(Error::Config(format!("invalid harmonic {h:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    /// Integrator steps per sample.
    pub substeps: usize,
    pub settle_periods: usize,
    pub n_periods: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            substeps: 5,
            settle_periods: 1,
            n_periods: 2,
        }
    }
}

/// Simulates the loop around the equilibrium of configuration `q_a0`.
///
/// `reference` is the motor speed reference (rad/s) for all axes; the
/// position reference is its zero-mean antiderivative. At each sample the
/// controller reads the noisy motor position and the velocity
/// `y = dq_m + (n[k] - n[k-1]) / Ts`, where `n` is the position noise plus
/// position disturbance. The torque is held over the sample. Logged `u` is
/// the applied torque including ripple, `y` the measured velocity and `r`
/// the speed reference.
pub fn simulate_closed_loop(
    model: &PlantModel,
    controller: &ControllerConfig,
    disturbances: &DisturbanceConfig,
    q_a0: &[f64],
    reference: &Excitation,
    settings: &SimulationSettings,
) -> Result<TimeRecord> {
    let n = model.n_axes();
    controller.validate(n)?;
    disturbances.validate(n)?;
    if reference.n_channels() != n {
        return Err(Error::Dimension(format!(
            "reference has {} channels for {n} axes",
            reference.n_channels()
        )));
    }
    if settings.substeps == 0 || settings.n_periods == 0 || settings.settle_periods == 0 {
        return Err(Error::Config("substeps, n_periods and settle_periods must be positive".into()));
    }
    let ts = 1.0 / reference.sample_rate;
    let h = ts / settings.substeps as f64;

    let lin = model.linearize(q_a0)?;
    let fastest = lin.poles()?.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if h * fastest > STABILITY_MARGIN * RK4_STABILITY_RADIUS {
        return Err(Error::Config(format!(
            "integrator step {h:.3e} s too large for the fastest mode {fastest:.3e} rad/s; raise substeps"
        )));
    }
    let eq = lin.equilibrium;

    let n_samp = reference.period_samples;
    let total = (settings.settle_periods + settings.n_periods) * n_samp;
    let speed = reference.synthesize();
    let position = reference.synthesize_integral();

    let mut rng = ChaCha8Rng::seed_from_u64(disturbances.seed);
    let normals: Vec<Normal<f64>> = disturbances
        .noise_std
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated noise level"))
        .collect();
    let measurement_offset = |axis: usize, q_m: f64, rng: &mut ChaCha8Rng| -> f64 {
        let pos: f64 = disturbances
            .position_disturbance
            .iter()
            .filter(|d| d.axis == axis)
            .map(|d| d.eval(q_m))
            .sum();
        pos + normals[axis].sample(rng)
    };

    let mut x = eq.x.clone();
    let mut integ = eq.u.clone();
    let mut prev_offset: Vec<f64> = (0..n).map(|i| measurement_offset(i, x[i], &mut rng)).collect();
    let mut u_log = DMatrix::zeros(n, total);
    let mut y_log = DMatrix::zeros(n, total);
    let mut r_log = DMatrix::zeros(n, total);
    let nc = model.n_coords();
    let mut saturated = 0usize;
    let mut u = vec![0.0; n];
    let mut work = Rk4::new(x.len());

    for s in 0..total {
        let col = s % n_samp;
        let mut any_sat = false;
        for i in 0..n {
            let q_m = x[i];
            let offset = measurement_offset(i, q_m, &mut rng);
            let v_meas = x[nc + i] + (offset - prev_offset[i]) / ts;
            prev_offset[i] = offset;
            let p_meas = q_m - eq.q_m[i] + offset;

            let e_p = position[(i, col)] - p_meas;
            let v_cmd = speed[(i, col)] + controller.kp[i] * e_p;
            let e_v = v_cmd - v_meas;
            integ[i] += controller.ki[i] * ts * e_v;
            let raw = controller.kv[i] * e_v + integ[i];
            let sat = controller.saturation[i];
            if raw.abs() > sat {
                any_sat = true;
            }
            let ripple: f64 = disturbances
                .torque_ripple
                .iter()
                .filter(|d| d.axis == i)
                .map(|d| d.eval(q_m))
                .sum();
            u[i] = raw.clamp(-sat, sat) + ripple;
            u_log[(i, s)] = u[i];
            y_log[(i, s)] = v_meas;
            r_log[(i, s)] = speed[(i, col)];
        }
        saturated += any_sat as usize;
        for _ in 0..settings.substeps {
            work.step(model, &mut x, &u, h)?;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= UNSTABLE_NORM) {
            return Err(Error::Unstable {
                time: (s + 1) as f64 * ts,
                norm,
            });
        }
    }

    let fraction = saturated as f64 / total as f64;
    if fraction > SATURATION_WARN_FRACTION {
        warn!(
            "torque saturation active on {:.1}% of samples; the linearity assumption is violated",
            100.0 * fraction
        );
    }
    Ok(TimeRecord {
        u: u_log,
        y: y_log,
        r: Some(r_log),
        sample_rate: reference.sample_rate,
        period_samples: n_samp,
        n_periods: settings.n_periods,
        settle_periods: settings.settle_periods,
    })
}

/// Classical fourth-order Runge-Kutta with reusable buffers.
pub(crate) struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Rk4 {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    pub(crate) fn step(&mut self, model: &PlantModel, x: &mut [f64], u: &[f64], h: f64) -> Result<()> {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        model.dynamics_into(x, u, k1)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        model.dynamics_into(tmp, u, k2)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        model.dynamics_into(tmp, u, k3)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + h * k3[j];
        }
        model.dynamics_into(tmp, u, k4)?;
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        Ok(())
    }
}
