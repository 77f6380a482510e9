//! LPM against LRM around a lightly damped two-mass resonance.

use frfkit::local::{lpm_fit, lrm_miso_fit, LocalFitConfig};
use frfkit::sigproc::SpectralRecord;
use frfkit::{CMatrix, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> frfkit::Result<()> {
    // motor velocity over motor torque
    let (jm, ja, k): (f64, f64, f64) = (1e-3, 4e-3, 400.0);
    let jt = jm + ja;
    let wr = (k * jt / (jm * ja)).sqrt();
    let d = 2.0 * 0.01 * wr * jm * ja / jt;
    let g = |w: f64| {
        let s = C64::new(0.0, w);
        (s * s * ja + s * d + k) / (s * (s * s * jm * ja + s * d * jt + k * jt))
    };
    let freqs: Vec<f64> = (0..300).map(|i| wr * (0.3 + i as f64 * 0.005)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1e-4).unwrap();
    let u: Vec<CMatrix> = freqs
        .iter()
        .map(|_| CMatrix::from_element(1, 1, C64::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU)))
        .collect();
    for sigma in [0.0, 1.0] {
        let y = freqs
            .iter()
            .zip(&u)
            .map(|(&w, u)| {
                let v = C64::new(noise.sample(&mut rng), noise.sample(&mut rng)) * sigma;
                CMatrix::from_element(1, 1, g(w) * u[(0, 0)] + v)
            })
            .collect();
        let rec = SpectralRecord::new(freqs.clone(), u.clone(), y, None)?;
        let cfg = LocalFitConfig {
            half_width: Some(5),
            ..LocalFitConfig::default()
        };
        for est in [lpm_fit(&rec, &cfg)?, lrm_miso_fit(&rec, &cfg)?] {
            let peak_err = est
                .lines
                .iter()
                .zip(&freqs)
                .filter(|(_, &w)| (w / wr - 1.0).abs() < 0.1)
                .map(|(l, &w)| (l.g[(0, 0)].norm() - g(w).norm()).abs() / g(w).norm())
                .fold(0.0, f64::max);
            println!(
                "noise {:>4}: {:<9} max relative amplitude error near the resonance {peak_err:.2e}",
                if sigma > 0.0 { "on" } else { "off" },
                est.method_tag
            );
        }
    }
    println!("resonance at {:.2} Hz", wr / (2.0 * std::f64::consts::PI));
    Ok(())
}
