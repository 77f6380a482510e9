//! Orthogonal random-phase multisine for three inputs.

use frfkit::sigproc::{design_multisine, dft_at, AmplitudeProfile, LineSelection, MultisineSpec};
use frfkit::CMatrix;

fn main() -> frfkit::Result<()> {
    let spec = MultisineSpec {
        sample_rate: 500.0,
        period_samples: 4000,
        f_min: 2.0,
        f_max: 50.0,
        n_lines: 150,
        line_selection: LineSelection::LogSpacedOdd,
        amplitude_profile: AmplitudeProfile::Uniform(0.05),
        phase_seed: 42,
        n_inputs: 3,
        orthogonal_blocks: true,
        offset_sine: None,
    };
    let bins = spec.excited_bins()?;
    println!(
        "{} lines from {:.3} Hz to {:.3} Hz (resolution {:.3} Hz)",
        bins.len(),
        spec.bin_hz(bins[0]),
        spec.bin_hz(bins[bins.len() - 1]),
        spec.resolution_hz()
    );

    let block = design_multisine(&spec, 3)?;
    for (m, ex) in block.iter().enumerate() {
        let x = ex.synthesize();
        let row = x.row(0);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
        let peak = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        println!("experiment {m}: input 1 rms {rms:.4}, crest factor {:.2}", peak / rms);
    }

    // U(k) = [u_1 u_2 u_3] of the block is unitary up to scale at every line
    let spectra: Vec<Vec<Vec<_>>> = block
        .iter()
        .map(|ex| {
            let x = ex.synthesize();
            (0..3).map(|ch| dft_at(x.row(ch).iter().copied().collect::<Vec<_>>().as_slice(), &bins)).collect()
        })
        .collect();
    let mut worst = 0.0f64;
    for l in 0..bins.len() {
        let u = CMatrix::from_fn(3, 3, |ch, m| spectra[m][ch][l]);
        let gram = u.adjoint() * &u;
        let scale = gram[(0, 0)];
        worst = worst.max((gram / scale - CMatrix::identity(3, 3)).norm());
    }
    println!("max deviation of U^H U from a scaled identity: {worst:.2e}");
    Ok(())
}
