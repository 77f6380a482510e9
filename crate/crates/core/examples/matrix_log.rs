//! Eigendecomposition, matrix logarithm and logarithmic averaging.

use frfkit::classical::log_average;
use frfkit::matfun::{eig, mat_exp, mat_log};
use frfkit::{CMatrix, C64};

fn main() -> frfkit::Result<()> {
    let c = |re, im| C64::new(re, im);
    #[rustfmt::skip]
    let a = CMatrix::from_row_slice(3, 3, &[
        c(2.0, 0.5), c(0.3, 0.0), c(0.0, -0.2),
        c(-0.1, 0.0), c(1.5, -0.3), c(0.4, 0.1),
        c(0.2, 0.2), c(0.0, 0.0), c(-1.0, 0.4),
    ]);
    let e = eig(&a)?;
    println!("eigenvalues:");
    for v in &e.values {
        println!("  {:+.6} {:+.6}i", v.re, v.im);
    }
    println!("eigenvector condition number {:.3}", e.cond_v);

    let l = mat_log(&a)?;
    let back = mat_exp(&l)?;
    println!("|exp(log A) - A| = {:.2e}", (back - &a).norm());

    // geometric mean of two measurements of the same FRF matrix
    let g1 = &a * c(2.0, 0.0);
    let g2 = &a * c(0.5, 0.0);
    let avg = log_average(&[g1, g2])?;
    println!("|logavg(2A, A/2) - A| = {:.2e}", (avg.g - &a).norm());

    // the phase alignment keeps phases near +-180 degrees from collapsing
    let s = |deg: f64| CMatrix::from_element(1, 1, C64::from_polar(1.0, deg.to_radians()));
    let wrap = log_average(&[s(170.0), s(-170.0)])?.g[(0, 0)];
    println!("phase average of +170 and -170 degrees: {:.3} degrees", wrap.arg().to_degrees());
    Ok(())
}
