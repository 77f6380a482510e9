use rustfft::FftPlanner;

use crate::C64;

/// Normalized DFT of a real sequence over all `N` bins.
pub fn dft(x: &[f64]) -> Vec<C64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Normalized DFT of a real sequence at the given bins.
pub fn dft_at(x: &[f64], bins: &[usize]) -> Vec<C64> {
    let full = dft(x);
    bins.iter().map(|&b| full[b % x.len()]).collect()
}
