//! Gray-box fit of gear and elbow stiffness and damping to noise-free FRFs
//! from a start at twice the true values.

use frfkit::campaign::CampaignConfig;
use frfkit::graybox::{build_weights, fit_parameters, FitData, FitOptions, WeightScheme};
use frfkit::plant::truth_frf;

fn main() -> frfkit::Result<()> {
    let cfg = CampaignConfig::default();
    let model = &cfg.plant;
    let ts = cfg.sample_time();
    let omegas = cfg.multisine.excited_omegas()?;
    let qs = cfg.configurations.resolve();
    let estimates = qs.iter().map(|q| truth_frf(model, q, &omegas, Some(ts))).collect::<frfkit::Result<Vec<_>>>()?;
    let weights = estimates
        .iter()
        .zip(&qs)
        .map(|(e, q)| build_weights(e, model, q, &WeightScheme::default()))
        .collect::<frfkit::Result<Vec<_>>>()?;
    let data = FitData {
        configurations: qs,
        estimates,
        weights,
        sample_time: Some(ts),
    };

    let truth = model.theta.free();
    let start: Vec<f64> = truth.iter().map(|v| 2.0 * v).collect();
    let fit = fit_parameters(&model.with_theta(model.theta.with_free(&start)), &data, &FitOptions::default())?;
    println!("cost {:.3e} after {} starts, {:.2} s", fit.cost, fit.starts.len(), fit.wall_time_s);
    println!("{:<8} {:>12} {:>12} {:>12}", "param", "start", "fitted", "true");
    for (((name, s), f), t) in fit.names.iter().zip(&start).zip(fit.theta_hat.free()).zip(&truth) {
        println!("{name:<8} {s:12.4e} {f:12.4e} {t:12.4e}");
    }
    Ok(())
}
