//! Block estimators on a simulated 2x2 feedback loop in the frequency domain.
//!
//! Output noise leaks into the input through the controller, which biases
//! H1 while the joint input-output estimator stays consistent.

use std::f64::consts::PI;

use frfkit::classical::{ari_estimate, h1_estimate, jio_classical, log_estimate, ExperimentBlocks};
use frfkit::sigproc::SpectralRecord;
use frfkit::{CMatrix, FrfEstimate, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn plant(w: f64) -> CMatrix {
    let s = C64::new(0.0, w);
    let p = |k: f64, a: f64| C64::new(k, 0.0) / (s + a);
    CMatrix::from_row_slice(2, 2, &[p(10.0, 2.0), p(1.0, 5.0), p(0.5, 3.0), p(8.0, 1.0)])
}

fn main() -> frfkit::Result<()> {
    let n_u = 2;
    let n_e = 16;
    let freqs: Vec<f64> = (1..=40).map(|k| 0.5 * k as f64).collect();
    let k = CMatrix::identity(2, 2) * C64::new(2.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let (mut u, mut y, mut r) = (Vec::new(), Vec::new(), Vec::new());
    for &w in &freqs {
        let g = plant(w);
        let s = (CMatrix::identity(2, 2) + &k * &g).try_inverse().unwrap();
        let (mut uk, mut yk, mut rk) = (CMatrix::zeros(2, n_e), CMatrix::zeros(2, n_e), CMatrix::zeros(2, n_e));
        let mut block_phase = 0.0;
        for e in 0..n_e {
            // one orthogonal block per n_u experiments
            if e % n_u == 0 {
                block_phase = rng.random::<f64>() * 2.0 * PI;
            }
            let rot = C64::from_polar(1.0, PI * (e % n_u) as f64);
            let re = CMatrix::from_column_slice(2, 1, &[C64::from_polar(1.0, block_phase), C64::from_polar(1.0, block_phase) * rot]);
            let v = CMatrix::from_fn(2, 1, |_, _| C64::new(noise.sample(&mut rng), noise.sample(&mut rng)));
            let ue = &s * (&re - &k * &v);
            let ye = &g * &ue + v;
            uk.set_column(e, &ue.column(0));
            yk.set_column(e, &ye.column(0));
            rk.set_column(e, &re.column(0));
        }
        u.push(uk);
        y.push(yk);
        r.push(rk);
    }
    let rec = SpectralRecord::new(freqs.clone(), u, y, Some(r))?;
    let blocks = ExperimentBlocks::contiguous(n_e, n_u)?;

    let error = |est: &FrfEstimate| {
        est.lines
            .iter()
            .zip(&freqs)
            .map(|(l, &w)| (&l.g - plant(w)).norm() / plant(w).norm())
            .sum::<f64>()
            / freqs.len() as f64
    };
    for est in [
        h1_estimate(&rec, &blocks)?,
        ari_estimate(&rec, &blocks)?,
        log_estimate(&rec, &blocks)?,
        jio_classical(&rec, &blocks)?,
    ] {
        println!("{:<28} mean relative error {:.4}", est.method_tag, error(&est));
    }
    Ok(())
}
