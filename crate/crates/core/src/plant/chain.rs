//! Rigid-body terms of the planar chain in closed form.
//!
//! Body `b` has absolute angle `phi_b = q_0 + ... + q_b` (chain order) and
//! center of mass `p_b = sum_{j<b} l_j e(phi_j) + c_b e(phi_b)` with
//! `e(phi) = (cos phi, sin phi)`. All outputs use the arm ordering `[q_a, q_e]`.

use nalgebra::{DMatrix, DVector};

use super::PlantModel;

pub struct Chain<'a> {
    model: &'a PlantModel,
    /// Chain joint -> arm-vector index.
    perm: Vec<usize>,
}

struct Kinematics {
    phi: Vec<f64>,
    /// `jx[b][i]`, `jy[b][i]`: COM Jacobian of body `b`, chain-ordered columns.
    jx: Vec<Vec<f64>>,
    jy: Vec<Vec<f64>>,
}

impl<'a> Chain<'a> {
    pub fn new(model: &'a PlantModel) -> Self {
        let perm = (0..model.chain.len()).map(|j| model.arm_index(j)).collect();
        Chain { model, perm }
    }

    fn len(&self) -> usize {
        self.perm.len()
    }

    fn chain_order(&self, arm: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| arm[p]).collect()
    }

    fn kinematics(&self, q: &[f64]) -> Kinematics {
        let n = self.len();
        let mut phi = vec![0.0; n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += q[j];
            phi[j] = acc;
        }
        let mut jx = vec![vec![0.0; n]; n];
        let mut jy = vec![vec![0.0; n]; n];
        for b in 0..n {
            let body = &self.model.chain[b].body;
            // suffix sums over j in [i, b): sum l_j e'(phi_j)
            let mut sx = -body.com * phi[b].sin();
            let mut sy = body.com * phi[b].cos();
            for i in (0..=b).rev() {
                if i < b {
                    let l = self.model.chain[i].body.length;
                    sx -= l * phi[i].sin();
                    sy += l * phi[i].cos();
                }
                jx[b][i] = sx;
                jy[b][i] = sy;
            }
        }
        Kinematics { phi, jx, jy }
    }

    fn to_arm_matrix(&self, chain_m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                out[(self.perm[i], self.perm[k])] = chain_m[(i, k)];
            }
        }
        out
    }

    fn to_arm_vector(&self, chain_v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for (i, &v) in chain_v.iter().enumerate() {
            out[self.perm[i]] = v;
        }
        out
    }

    fn chain_mass(&self, k: &Kinematics) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for b in 0..n {
            let body = &self.model.chain[b].body;
            for i in 0..=b {
                for j in 0..=b {
                    m[(i, j)] += body.mass * (k.jx[b][i] * k.jx[b][j] + k.jy[b][i] * k.jy[b][j]) + body.inertia;
                }
            }
        }
        m
    }

    pub fn mass_matrix(&self, q_arm: &[f64]) -> DMatrix<f64> {
        let k = self.kinematics(&self.chain_order(q_arm));
        self.to_arm_matrix(&self.chain_mass(&k))
    }

    /// Mass matrix and `c(q, dq) + g(q)`.
    pub fn mass_and_bias(&self, q_arm: &[f64], dq_arm: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.len();
        let q = self.chain_order(q_arm);
        let dq = self.chain_order(dq_arm);
        let k = self.kinematics(&q);
        let mut omega = vec![0.0; n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += dq[j];
            omega[j] = acc;
        }
        let g = self.model.gravity;
        let mut bias = vec![0.0; n];
        // velocity-product acceleration of each COM: -sum l_j e(phi_j) w_j^2 - c_b e(phi_b) w_b^2
        let mut ax = 0.0;
        let mut ay = 0.0;
        for b in 0..n {
            let body = &self.model.chain[b].body;
            let (s, c) = k.phi[b].sin_cos();
            let w2 = omega[b] * omega[b];
            let bx = ax - body.com * c * w2;
            let by = ay - body.com * s * w2;
            for i in 0..=b {
                bias[i] += body.mass * (k.jx[b][i] * bx + k.jy[b][i] * (by + g));
            }
            ax -= body.length * c * w2;
            ay -= body.length * s * w2;
        }
        (self.to_arm_matrix(&self.chain_mass(&k)), self.to_arm_vector(&bias))
    }

    /// `sum_b m_b g y_b`.
    pub fn potential(&self, q_arm: &[f64]) -> f64 {
        let q = self.chain_order(q_arm);
        let g = self.model.gravity;
        let mut phi = 0.0;
        let mut y0 = 0.0;
        let mut v = 0.0;
        for (j, joint) in self.model.chain.iter().enumerate() {
            phi += q[j];
            v += joint.body.mass * g * (y0 + joint.body.com * phi.sin());
            y0 += joint.body.length * phi.sin();
        }
        v
    }

    /// Gravity torque `dV/dq`.
    pub fn gravity_torque(&self, q_arm: &[f64]) -> DVector<f64> {
        let k = self.kinematics(&self.chain_order(q_arm));
        let g = self.model.gravity;
        let n = self.len();
        let mut t = vec![0.0; n];
        for b in 0..n {
            let m = self.model.chain[b].body.mass;
            for i in 0..=b {
                t[i] += m * g * k.jy[b][i];
            }
        }
        self.to_arm_vector(&t)
    }

    /// Gravity stiffness `d^2 V / dq^2`.
    pub fn gravity_hessian(&self, q_arm: &[f64]) -> DMatrix<f64> {
        let q = self.chain_order(q_arm);
        let k = self.kinematics(&q);
        let g = self.model.gravity;
        let n = self.len();
        let mut h = DMatrix::zeros(n, n);
        for b in 0..n {
            let body = &self.model.chain[b].body;
            // d^2 y_b / dq_i dq_k = -sum_{j in [max(i,k), b)} l_j sin phi_j - c_b sin phi_b
            let mut suffix = vec![0.0; b + 1];
            let mut s = -body.com * k.phi[b].sin();
            for i in (0..=b).rev() {
                if i < b {
                    s -= self.model.chain[i].body.length * k.phi[i].sin();
                }
                suffix[i] = s;
            }
            for i in 0..=b {
                for j in 0..=b {
                    h[(i, j)] += body.mass * g * suffix[i.max(j)];
                }
            }
        }
        self.to_arm_matrix(&h)
    }
}
