//! Closed-loop simulation of the three-axis arm and a JIO-LRM estimate from
//! a single experiment.
//!
//! Pass a path to also write the time record as CSV.

use std::f64::consts::PI;
use std::path::PathBuf;

use frfkit::local::{jio_lrm, LocalFitConfig};
use frfkit::plant::{
    simulate_closed_loop, truth_frf, ControllerConfig, DisturbanceConfig, PlantModel, SimulationSettings,
};
use frfkit::sigproc::{design_multisine, to_spectral, write_time_record, AmplitudeProfile, LineSelection, MultisineSpec};

fn main() -> frfkit::Result<()> {
    let model = PlantModel::default_three_axis();
    let q = [-PI / 2.0 + 0.3, 0.5, -0.4];
    let lin = model.linearize(&q)?;
    let mut modes: Vec<f64> = lin.poles()?.iter().filter(|p| p.im > 0.0).map(|p| p.norm() / (2.0 * PI)).collect();
    modes.sort_by(f64::total_cmp);
    println!("modes (Hz): {}", modes.iter().map(|f| format!("{f:.1}")).collect::<Vec<_>>().join(", "));

    let spec = MultisineSpec {
        sample_rate: 500.0,
        period_samples: 4000,
        f_min: 2.0,
        f_max: 50.0,
        n_lines: 1000,
        line_selection: LineSelection::LogSpacedOdd,
        amplitude_profile: AmplitudeProfile::Uniform(0.05),
        phase_seed: 5,
        n_inputs: 3,
        orthogonal_blocks: true,
        offset_sine: None,
    };
    let ex = design_multisine(&spec, 3)?;
    let record = simulate_closed_loop(
        &model,
        &ControllerConfig::default_three_axis(),
        &DisturbanceConfig::default_three_axis(9),
        &q,
        &ex[0],
        &SimulationSettings::default(),
    )?;
    if let Some(path) = std::env::args().nth(1).map(PathBuf::from) {
        write_time_record(&path, &record, Some(9))?;
        println!("wrote {}", path.display());
    }

    let rec = to_spectral(&record, &spec)?;
    let cfg = LocalFitConfig {
        half_width: Some(16),
        ..LocalFitConfig::default()
    };
    let est = jio_lrm(&rec, &cfg)?;
    let truth = truth_frf(&model, &q, &rec.freqs, Some(1.0 / spec.sample_rate))?;
    println!("{} of {} lines valid", est.valid_count(), est.n_lines());
    println!("   f (Hz)   |G11| truth   |G11| JIO-LRM");
    for l in (0..est.n_lines()).step_by(16) {
        println!(
            "{:9.3} {:13.4e} {:15.4e}",
            rec.freqs[l] / (2.0 * PI),
            truth.lines[l].g[(0, 0)].norm(),
            est.lines[l].g[(0, 0)].norm()
        );
    }
    Ok(())
}
