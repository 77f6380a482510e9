//! Multisine excitation design, steady-state trimming and DFT extraction.
//!
//! DFT convention: `X(k) = (1/N) * sum_n x[n] exp(-j 2 pi k n / N)`, so a
//! unit-amplitude cosine at bin `k` has `|X(k)| = 1/2` and
//! `sum_k |X(k)|^2` equals the mean square of the record.

mod dft;
mod io;

pub use dft::{dft, dft_at};
pub use io::{read_time_record, write_time_record, TimeRecordMeta};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, CMatrix, Error, Result, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSelection {
    /// `n_lines` log-spaced target frequencies rounded to the nearest odd bin.
    LogSpacedOdd,
    /// Explicit DFT bin indices.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeProfile {
    Uniform(f64),
    PerLine(Vec<f64>),
}

/// Low-frequency sine added to every channel, kept off the analysis lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSine {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultisineSpec {
    pub sample_rate: f64,
    pub period_samples: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_lines: usize,
    pub line_selection: LineSelection,
    pub amplitude_profile: AmplitudeProfile,
    pub phase_seed: u64,
    pub n_inputs: usize,
    pub orthogonal_blocks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_sine: Option<OffsetSine>,
}

impl MultisineSpec {
    pub fn resolution_hz(&self) -> f64 {
        self.sample_rate / self.period_samples as f64
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.resolution_hz()
    }

    fn check_basic(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDesign(m.to_string()));
        if !(self.sample_rate > 0.0) {
            return bad("sample rate must be positive");
        }
        if self.period_samples < 4 {
            return bad("period must hold at least 4 samples");
        }
        if self.n_lines == 0 {
            return bad("at least one excited line is required");
        }
        if self.n_inputs == 0 {
            return bad("at least one input channel is required");
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return bad("need 0 < f_min < f_max");
        }
        if self.f_max > self.sample_rate / 2.0 {
            return bad("f_max exceeds the Nyquist frequency");
        }
        Ok(())
    }

    fn in_band(&self, bin: usize) -> bool {
        let f = self.bin_hz(bin);
        bin >= 1
            && 2 * bin < self.period_samples
            && f >= self.f_min * (1.0 - 1e-12)
            && f <= self.f_max * (1.0 + 1e-12)
    }

    /// Excited DFT bins, strictly increasing.
    pub fn excited_bins(&self) -> Result<Vec<usize>> {
        self.check_basic()?;
        let bins = match &self.line_selection {
            LineSelection::LogSpacedOdd => self.log_spaced_odd_bins(),
            LineSelection::Explicit(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidDesign("explicit line list is empty".into()));
                }
                if list.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidDesign(
                        "explicit bins must be strictly increasing".into(),
                    ));
                }
                if let Some(b) = list.iter().find(|&&b| !self.in_band(b)) {
                    return Err(Error::InvalidDesign(format!(
                        "bin {b} lies outside [f_min, f_max] or above Nyquist"
                    )));
                }
                list.clone()
            }
        };
        if bins.is_empty() {
            return Err(Error::InvalidDesign("no odd bin inside [f_min, f_max]".into()));
        }
        Ok(bins)
    }

    fn log_spaced_odd_bins(&self) -> Vec<usize> {
        let n = self.n_lines;
        let ratio = self.f_max / self.f_min;
        let mut bins = Vec::with_capacity(n);
        for i in 0..n {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let target = self.f_min * ratio.powf(frac) / self.resolution_hz();
            let mut odd = 2 * (((target - 1.0) / 2.0).round().max(0.0) as usize) + 1;
            if !self.in_band(odd) && self.in_band(odd + 2) {
                odd += 2;
            } else if !self.in_band(odd) && odd > 2 && self.in_band(odd - 2) {
                odd -= 2;
            }
            if self.in_band(odd) {
                bins.push(odd);
            }
        }
        bins.sort_unstable();
        bins.dedup();
        bins
    }

    /// Angular frequencies (rad/s) of the excited lines.
    pub fn excited_omegas(&self) -> Result<Vec<f64>> {
        Ok(self
            .excited_bins()?
            .into_iter()
            .map(|b| 2.0 * PI * self.bin_hz(b))
            .collect())
    }

    /// Bin of the offset sine, validated against the excited lines.
    pub fn offset_bin(&self, excited: &[usize]) -> Result<Option<usize>> {
        let Some(off) = &self.offset_sine else {
            return Ok(None);
        };
        let exact = off.frequency / self.resolution_hz();
        let bin = exact.round();
        if (exact - bin).abs() > 1e-9 * exact.max(1.0) || bin < 1.0 {
            return Err(Error::InvalidDesign(format!(
                "offset sine at {} Hz is not on the DFT grid ({} Hz spacing)",
                off.frequency,
                self.resolution_hz()
            )));
        }
        let bin = bin as usize;
        if excited.contains(&bin) {
            return Err(Error::InvalidDesign(format!(
                "offset sine collides with excited bin {bin}"
            )));
        }
        if off.frequency >= self.f_min {
            return Err(Error::InvalidDesign(
                "offset sine must lie below f_min".into(),
            ));
        }
        Ok(Some(bin))
    }

    fn amplitudes(&self, n: usize) -> Result<Vec<f64>> {
        match &self.amplitude_profile {
            AmplitudeProfile::Uniform(a) => Ok(vec![*a; n]),
            AmplitudeProfile::PerLine(v) if v.len() == n => Ok(v.clone()),
            AmplitudeProfile::PerLine(v) => Err(Error::InvalidDesign(format!(
                "{} per-line amplitudes given for {n} excited lines",
                v.len()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bins = self.excited_bins()?;
        self.offset_bin(&bins)?;
        self.amplitudes(bins.len())?;
        Ok(())
    }
}

/// One periodic excitation: `n_u` channels sharing an odd-line multisine grid.
///
/// Channel `j` is `x_j(t) = sum_k Re(c_jk exp(i w_k t)) + a_off sin(w_off t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Excitation {
    pub sample_rate: f64,
    pub period_samples: usize,
    pub bins: Vec<usize>,
    /// `n_u x n_lines` complex line amplitudes.
    pub coefficients: CMatrix,
    /// Offset sine as `(bin, amplitude)`.
    pub offset: Option<(usize, f64)>,
}

impl Excitation {
    pub fn n_channels(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn omega(&self, bin: usize) -> f64 {
        2.0 * PI * bin as f64 * self.sample_rate / self.period_samples as f64
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.bins.iter().map(|&b| self.omega(b)).collect()
    }

    /// Value of channel `ch` at time `t`.
    pub fn value(&self, ch: usize, t: f64) -> f64 {
        let mut v = 0.0;
        for (l, &b) in self.bins.iter().enumerate() {
            v += (self.coefficients[(ch, l)] * C64::from_polar(1.0, self.omega(b) * t)).re;
        }
        if let Some((b, a)) = self.offset {
            v += a * (self.omega(b) * t).sin();
        }
        v
    }

    /// Zero-mean periodic antiderivative of channel `ch`.
    pub fn integral(&self, ch: usize, t: f64) -> f64 {
        let mut v = 0.0;
        for (l, &b) in self.bins.iter().enumerate() {
            let w = self.omega(b);
            v += (self.coefficients[(ch, l)] * C64::from_polar(1.0, w * t) / C64::new(0.0, w)).re;
        }
        if let Some((b, a)) = self.offset {
            let w = self.omega(b);
            v -= a * (w * t).cos() / w;
        }
        v
    }

    fn synthesize_with(&self, integrate: bool) -> DMatrix<f64> {
        let n = self.period_samples;
        let nu = self.n_channels();
        let mut out = DMatrix::zeros(nu, n);
        // exact phases through integer arithmetic on k*n mod N
        let mut add_line = |bin: usize, coef: &dyn Fn(usize) -> C64| {
            for s in 0..n {
                let ph = 2.0 * PI * ((bin * s) % n) as f64 / n as f64;
                let e = C64::from_polar(1.0, ph);
                for ch in 0..nu {
                    out[(ch, s)] += (coef(ch) * e).re;
                }
            }
        };
        for (l, &b) in self.bins.iter().enumerate() {
            let w = self.omega(b);
            let c = |ch: usize| {
                let c = self.coefficients[(ch, l)];
                if integrate {
                    c / C64::new(0.0, w)
                } else {
                    c
                }
            };
            add_line(b, &c);
        }
        if let Some((b, a)) = self.offset {
            let w = self.omega(b);
            // a sin = Re(-i a e^{iwt}); integral = Re(-a/w e^{iwt})
            let c = |_: usize| {
                if integrate {
                    C64::new(-a / w, 0.0)
                } else {
                    C64::new(0.0, -a)
                }
            };
            add_line(b, &c);
        }
        out
    }

    /// One period of samples, `n_u x N`.
    pub fn synthesize(&self) -> DMatrix<f64> {
        self.synthesize_with(false)
    }

    /// One period of the zero-mean antiderivative, `n_u x N`.
    pub fn synthesize_integral(&self) -> DMatrix<f64> {
        self.synthesize_with(true)
    }

    /// Expected DFT (`n_u x n_lines`) of one period under the crate convention.
    pub fn line_spectrum(&self) -> CMatrix {
        self.coefficients.map(|c| c * 0.5)
    }

    pub fn scaled(&self, factor: f64) -> Excitation {
        Excitation {
            coefficients: self.coefficients.map(|c| c * factor),
            offset: self.offset.map(|(b, a)| (b, a * factor)),
            ..self.clone()
        }
    }
}

/// Designs `n_experiments` excitations.
///
/// With `orthogonal_blocks`, experiments are grouped in blocks of `n_u`.
/// Every block draws an independent realization of random phases, one per
/// input channel and line, and experiment `m` of a block rotates input `j`
/// by `exp(i 2 pi j m / n_u)`, so the per-line block matrix is unitary up to
/// scale for line-uniform amplitudes. Without it, every experiment draws its
/// own phases.
pub fn design_multisine(spec: &MultisineSpec, n_experiments: usize) -> Result<Vec<Excitation>> {
    let bins = spec.excited_bins()?;
    let offset_bin = spec.offset_bin(&bins)?;
    let amps = spec.amplitudes(bins.len())?;
    let nu = spec.n_inputs;
    if spec.orthogonal_blocks && n_experiments % nu != 0 {
        return Err(Error::InvalidDesign(format!(
            "{n_experiments} experiments is not a multiple of the {nu} inputs"
        )));
    }
    let offset = offset_bin.map(|b| (b, spec.offset_sine.as_ref().map_or(0.0, |o| o.amplitude)));

    let draw_phases = |realization: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            spec.phase_seed,
            &[realization, seed::role::EXCITATION],
        ));
        CMatrix::from_fn(nu, bins.len(), |_, _| {
            C64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI)
        })
    };

    let mut out = Vec::with_capacity(n_experiments);
    let mut phases = CMatrix::zeros(0, 0);
    for m in 0..n_experiments {
        let (realization, within) = if spec.orthogonal_blocks {
            (m / nu, m % nu)
        } else {
            (m, 0)
        };
        if !spec.orthogonal_blocks || within == 0 {
            phases = draw_phases(realization as u64);
        }
        let coefficients = CMatrix::from_fn(nu, bins.len(), |j, l| {
            let rot = C64::from_polar(1.0, 2.0 * PI * (j * within) as f64 / nu as f64);
            phases[(j, l)] * rot * amps[l]
        });
        out.push(Excitation {
            sample_rate: spec.sample_rate,
            period_samples: spec.period_samples,
            bins: bins.clone(),
            coefficients,
            offset,
        });
    }
    Ok(out)
}

/// Sampled input/output/reference signals on one time base.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRecord {
    /// `n_u x T`
    pub u: DMatrix<f64>,
    /// `n_y x T`
    pub y: DMatrix<f64>,
    /// `n_r x T`, when the reference was logged.
    pub r: Option<DMatrix<f64>>,
    pub sample_rate: f64,
    pub period_samples: usize,
    pub n_periods: usize,
    pub settle_periods: usize,
}

impl TimeRecord {
    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.y.ncols() != t || self.r.as_ref().is_some_and(|r| r.ncols() != t) {
            return Err(Error::InvalidRecord("channels differ in length".into()));
        }
        if self.period_samples == 0 || t % self.period_samples != 0 {
            return Err(Error::InvalidRecord(format!(
                "{t} samples is not an integer number of {}-sample periods",
                self.period_samples
            )));
        }
        if t != (self.n_periods + self.settle_periods) * self.period_samples {
            return Err(Error::InvalidRecord(format!(
                "{t} samples does not match {} settle + {} steady periods",
                self.settle_periods, self.n_periods
            )));
        }
        if self.n_periods == 0 {
            return Err(Error::InvalidRecord("no steady-state period left".into()));
        }
        Ok(())
    }
}

/// DFT matrices at the excited lines; one column per experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRecord {
    /// Angular frequencies (rad/s), strictly increasing.
    pub freqs: Vec<f64>,
    /// Per line `n_u x n_e`.
    pub u: Vec<CMatrix>,
    /// Per line `n_y x n_e`.
    pub y: Vec<CMatrix>,
    /// Per line `n_r x n_e`.
    pub r: Option<Vec<CMatrix>>,
}

impl SpectralRecord {
    pub fn new(
        freqs: Vec<f64>,
        u: Vec<CMatrix>,
        y: Vec<CMatrix>,
        r: Option<Vec<CMatrix>>,
    ) -> Result<Self> {
        let rec = SpectralRecord { freqs, u, y, r };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.freqs.len();
        let dim = |m: &str| Err(Error::Dimension(m.to_string()));
        if n == 0 {
            return dim("spectral record has no lines");
        }
        if self.u.len() != n || self.y.len() != n || self.r.as_ref().is_some_and(|r| r.len() != n) {
            return dim("line counts differ between U, Y and R");
        }
        if self.freqs.windows(2).any(|w| w[1] <= w[0]) {
            return dim("frequencies must be strictly increasing");
        }
        let (nu, ny, ne) = (self.u[0].nrows(), self.y[0].nrows(), self.u[0].ncols());
        let nr = self.r.as_ref().map(|r| r[0].nrows());
        for k in 0..n {
            if self.u[k].shape() != (nu, ne) || self.y[k].shape() != (ny, ne) {
                return dim("inconsistent U/Y shapes across lines");
            }
            if let (Some(r), Some(nr)) = (&self.r, nr) {
                if r[k].shape() != (nr, ne) {
                    return dim("inconsistent R shape across lines");
                }
            }
        }
        Ok(())
    }

    pub fn n_lines(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_u(&self) -> usize {
        self.u[0].nrows()
    }

    pub fn n_y(&self) -> usize {
        self.y[0].nrows()
    }

    pub fn n_r(&self) -> Option<usize> {
        self.r.as_ref().map(|r| r[0].nrows())
    }

    pub fn n_e(&self) -> usize {
        self.u[0].ncols()
    }

    /// Sub-record with the given experiment columns, in order.
    pub fn experiments(&self, cols: &[usize]) -> Result<SpectralRecord> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.n_e()) {
            return Err(Error::Dimension(format!(
                "experiment {c} out of range ({} available)",
                self.n_e()
            )));
        }
        let pick = |m: &CMatrix| CMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])]);
        Ok(SpectralRecord {
            freqs: self.freqs.clone(),
            u: self.u.iter().map(pick).collect(),
            y: self.y.iter().map(pick).collect(),
            r: self.r.as_ref().map(|r| r.iter().map(pick).collect()),
        })
    }

    /// Stacks the experiments of several records sharing one frequency grid.
    pub fn concat(records: &[SpectralRecord]) -> Result<SpectralRecord> {
        let first = records
            .first()
            .ok_or_else(|| Error::Dimension("no records to concatenate".into()))?;
        if records.iter().any(|r| r.freqs != first.freqs) {
            return Err(Error::Dimension("records use different frequency grids".into()));
        }
        let has_r = records.iter().all(|r| r.r.is_some());
        let n = first.n_lines();
        let stack = |get: &dyn Fn(&SpectralRecord) -> &CMatrix| {
            let parts: Vec<&CMatrix> = records.iter().map(get).collect();
            let rows = parts[0].nrows();
            let cols: usize = parts.iter().map(|p| p.ncols()).sum();
            let mut m = CMatrix::zeros(rows, cols);
            let mut c0 = 0;
            for p in parts {
                m.view_mut((0, c0), (rows, p.ncols())).copy_from(p);
                c0 += p.ncols();
            }
            m
        };
        let mut u = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut r = has_r.then(|| Vec::with_capacity(n));
        for k in 0..n {
            u.push(stack(&|rec| &rec.u[k]));
            y.push(stack(&|rec| &rec.y[k]));
            if let Some(r) = r.as_mut() {
                r.push(stack(&|rec| &rec.r.as_ref().unwrap()[k]));
            }
        }
        SpectralRecord::new(first.freqs.clone(), u, y, r)
    }

    /// Record with `r` used as input and `u` as output; used to estimate the
    /// reference-to-input FRF.
    pub fn reference_to_input(&self) -> Option<SpectralRecord> {
        let r = self.r.clone()?;
        Some(SpectralRecord {
            freqs: self.freqs.clone(),
            u: r,
            y: self.u.clone(),
            r: None,
        })
    }

    /// Record with `r` used as input and `y` kept as output.
    pub fn reference_to_output(&self) -> Option<SpectralRecord> {
        let r = self.r.clone()?;
        Some(SpectralRecord {
            freqs: self.freqs.clone(),
            u: r,
            y: self.y.clone(),
            r: None,
        })
    }
}

/// Steady-state spectrum of `record` at the excited lines of `spec`.
pub fn to_spectral(record: &TimeRecord, spec: &MultisineSpec) -> Result<SpectralRecord> {
    if record.period_samples != spec.period_samples {
        return Err(Error::InvalidRecord(format!(
            "record period {} differs from design period {}",
            record.period_samples, spec.period_samples
        )));
    }
    if (record.sample_rate - spec.sample_rate).abs() > 1e-9 * spec.sample_rate {
        return Err(Error::InvalidRecord("record and design sample rates differ".into()));
    }
    let bins = spec.excited_bins()?;
    to_spectral_at(record, &bins)
}

/// Steady-state spectrum of `record` at arbitrary bins.
///
/// Drops the settle periods, averages the remaining periods sample by
/// sample, and evaluates the normalized DFT of the averaged period.
pub fn to_spectral_at(record: &TimeRecord, bins: &[usize]) -> Result<SpectralRecord> {
    record.validate()?;
    let n = record.period_samples;
    let freqs: Vec<f64> = bins
        .iter()
        .map(|&b| 2.0 * PI * b as f64 * record.sample_rate / n as f64)
        .collect();
    let spectra = |sig: &DMatrix<f64>| -> Vec<Vec<C64>> {
        (0..sig.nrows())
            .map(|ch| {
                let avg = period_average(sig, ch, n, record.settle_periods, record.n_periods);
                dft_at(&avg, bins)
            })
            .collect()
    };
    let per_line = |spec: Vec<Vec<C64>>| -> Vec<CMatrix> {
        (0..bins.len())
            .map(|k| CMatrix::from_fn(spec.len(), 1, |ch, _| spec[ch][k]))
            .collect()
    };
    let u = per_line(spectra(&record.u));
    let y = per_line(spectra(&record.y));
    let r = record.r.as_ref().map(|r| per_line(spectra(r)));
    SpectralRecord::new(freqs, u, y, r)
}

fn period_average(sig: &DMatrix<f64>, ch: usize, n: usize, settle: usize, periods: usize) -> Vec<f64> {
    let mut avg = vec![0.0; n];
    for p in settle..settle + periods {
        for (s, a) in avg.iter_mut().enumerate() {
            *a += sig[(ch, p * n + s)];
        }
    }
    avg.iter_mut().for_each(|a| *a /= periods as f64);
    avg
}
