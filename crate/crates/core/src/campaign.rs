//! Configuration-driven campaigns: simulate, estimate, fit and report.
//!
//! Every stage reads its inputs from the output directory and writes whole
//! files atomically. Layout:
//!
//! ```text
//! simulate/configurations.json      configuration angles and failures
//! simulate/c{c}/e{e}.csv (+ .toml)  time records
//! simulate/c{c}/truth.json          linearized sampled-data FRF
//! estimate/c{c}/{cell}.json         one estimate per estimator cell
//! fit/{cell}.json                   gray-box fits
//! report/amplitude_bias.csv         rows by n_e, columns by method
//! report/amplitude_bias.json
//! report/parameter_bias.csv
//! report/curves/c{c}_g{i}{j}.csv    magnitude and phase per method
//! {stage}/summary.json              failures of the stage
//! ```
//!
//! Seeds are derived with [`seed::derive`]:
//!
//! | quantity             | path                               |
//! |----------------------|------------------------------------|
//! | multisine phases     | `[EXCITATION]`                     |
//! | noise of experiment  | `[c, e, NOISE]`                    |
//! | random configuration | `[c, CONFIGURATION]` from its seed |
//! | fit multistart       | `[cell, FIT]`                      |
//!
//! Random configurations carry their own seed, so changing the global seed
//! changes the noise but not the truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{self, ExperimentBlocks};
use crate::graybox::{self, FitData, FitOptions, FitResult, LineWeights, WeightScheme};
use crate::local::{self, LocalFitConfig, Parametrization};
use crate::metrics::{self, BiasReport};
use crate::plant::{
    simulate_closed_loop, truth_frf, ControllerConfig, DisturbanceConfig, Harmonic, PlantModel, SimulationSettings,
    ThetaVector,
};
use crate::sigproc::{
    self, design_multisine, to_spectral, AmplitudeProfile, Excitation, LineSelection, MultisineSpec, SpectralRecord,
    TimeRecord,
};
use crate::{fsio, seed, Error, FrfEstimate, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A fit is refused when fewer valid lines remain.
pub const MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    H1,
    Ari,
    Log,
    Jio,
    Lpm,
    LrmMiso,
    LrmMimo,
    JioLrm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::H1,
        Method::Ari,
        Method::Log,
        Method::Jio,
        Method::Lpm,
        Method::LrmMiso,
        Method::LrmMimo,
        Method::JioLrm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::H1 => "H1",
            Method::Ari => "ARI",
            Method::Log => "LOG",
            Method::Jio => "JIO",
            Method::Lpm => "LPM",
            Method::LrmMiso => "LRM_MISO",
            Method::LrmMimo => "LRM_MIMO",
            Method::JioLrm => "JIO_LRM",
        }
    }

    /// Block methods need whole blocks of `n_u` experiments.
    pub fn is_classical(self) -> bool {
        matches!(self, Method::H1 | Method::Ari | Method::Log | Method::Jio)
    }
}

/// One cell of the estimator matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorEntry {
    pub method: Method,
    /// Experiments used, always the first `n_e` of each configuration.
    pub n_e: usize,
    /// Number of blocks; classical methods only, must equal `n_e / n_u`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Local methods only; the parametrization follows `method`.
    #[serde(default, skip_serializing_if = "is_default_local")]
    pub local: LocalFitConfig,
    /// Fit the gray-box model to this cell.
    #[serde(default)]
    pub fit: bool,
}

fn is_default_local(c: &LocalFitConfig) -> bool {
    *c == LocalFitConfig::default()
}

impl EstimatorEntry {
    pub fn new(method: Method, n_e: usize) -> Self {
        EstimatorEntry {
            method,
            n_e,
            m: None,
            local: LocalFitConfig::default(),
            fit: false,
        }
    }

    pub fn cell_name(&self) -> String {
        format!("{}_ne{}", self.method.name(), self.n_e)
    }

    pub fn validate(&self, n_u: usize, n_experiments: usize) -> Result<()> {
        let name = self.cell_name();
        if self.n_e == 0 || self.n_e > n_experiments {
            return Err(Error::Config(format!(
                "{name}: n_e must lie in 1..={n_experiments}"
            )));
        }
        if self.method.is_classical() {
            if self.n_e % n_u != 0 {
                return Err(Error::Config(format!("{name}: n_e must be a multiple of n_u = {n_u}")));
            }
            if let Some(m) = self.m {
                if m * n_u != self.n_e {
                    return Err(Error::Config(format!("{name}: n_e must equal M n_u = {}", m * n_u)));
                }
            }
        } else if self.m.is_some() {
            return Err(Error::Config(format!("{name}: M applies to block methods only")));
        }
        self.local.validate()
    }
}

/// Uniform draws in `center +- half_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomConfigurations {
    pub count: usize,
    pub seed: u64,
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Configurations {
    List(Vec<Vec<f64>>),
    Random(RandomConfigurations),
}

impl Configurations {
    pub fn resolve(&self) -> Vec<Vec<f64>> {
        match self {
            Configurations::List(list) => list.clone(),
            Configurations::Random(r) => (0..r.count)
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(r.seed, &[c as u64, seed::role::CONFIGURATION]));
                    r.center
                        .iter()
                        .zip(&r.half_range)
                        .map(|(&m, &h)| if h > 0.0 { m + rng.random_range(-h..h) } else { m })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Disturbance levels; the noise seed is derived per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub noise_std: Vec<f64>,
    #[serde(default)]
    pub torque_ripple: Vec<Harmonic>,
    #[serde(default)]
    pub position_disturbance: Vec<Harmonic>,
}

impl DisturbanceSection {
    pub fn with_seed(&self, seed: u64) -> DisturbanceConfig {
        DisturbanceConfig {
            noise_std: self.noise_std.clone(),
            torque_ripple: self.torque_ripple.clone(),
            position_disturbance: self.position_disturbance.clone(),
            seed,
        }
    }
}

impl From<DisturbanceConfig> for DisturbanceSection {
    fn from(d: DisturbanceConfig) -> Self {
        DisturbanceSection {
            noise_std: d.noise_std,
            torque_ripple: d.torque_ripple,
            position_disturbance: d.position_disturbance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrayboxSection {
    /// Start of the fit and center of the weighting bands; the plant's own
    /// parameters when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<ThetaVector>,
    #[serde(default)]
    pub weights: WeightScheme,
    /// `seed` is replaced by a seed derived per cell.
    #[serde(default)]
    pub options: FitOptions,
    /// Compare against the zero-order-hold model instead of the continuous one.
    #[serde(default = "yes")]
    pub sampled_model: bool,
}

fn yes() -> bool {
    true
}

impl Default for GrayboxSection {
    fn default() -> Self {
        GrayboxSection {
            theta0: None,
            weights: WeightScheme::default(),
            options: FitOptions::default(),
            sampled_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Experiments simulated per configuration.
    pub n_experiments: usize,
    pub plant: PlantModel,
    pub controller: ControllerConfig,
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub simulation: SimulationSettings,
    /// `phase_seed` is replaced by a seed derived from `seed`.
    pub multisine: MultisineSpec,
    pub configurations: Configurations,
    pub estimators: Vec<EstimatorEntry>,
    #[serde(default)]
    pub graybox: GrayboxSection,
}

impl Default for CampaignConfig {
    /// Desk-scale three-axis campaign.
    fn default() -> Self {
        let fit = |method, n_e| EstimatorEntry {
            fit: true,
            ..EstimatorEntry::new(method, n_e)
        };
        let local = LocalFitConfig {
            half_width: Some(16),
            ..LocalFitConfig::default()
        };
        let mut estimators = vec![
            fit(Method::Log, 12),
            EstimatorEntry::new(Method::H1, 12),
            fit(Method::JioLrm, 12),
            EstimatorEntry::new(Method::LrmMimo, 12),
            EstimatorEntry::new(Method::LrmMiso, 12),
            fit(Method::Log, 3),
            fit(Method::JioLrm, 3),
            EstimatorEntry::new(Method::LrmMimo, 3),
            EstimatorEntry::new(Method::LrmMiso, 3),
            fit(Method::JioLrm, 1),
            EstimatorEntry::new(Method::LrmMimo, 1),
            EstimatorEntry::new(Method::LrmMiso, 1),
        ];
        for e in &mut estimators {
            if e.method.is_classical() {
                e.m = Some(e.n_e / 3);
            } else {
                let parametrization = match e.method {
                    Method::LrmMiso => Parametrization::LrmMiso,
                    Method::Lpm => Parametrization::Lpm,
                    _ => Parametrization::LrmMimo,
                };
                e.local = LocalFitConfig {
                    parametrization,
                    ..local.clone()
                };
            }
        }
        CampaignConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            output_dir: PathBuf::from("campaign-out"),
            n_experiments: 12,
            plant: PlantModel::default_three_axis(),
            controller: ControllerConfig::default_three_axis(),
            disturbance: DisturbanceConfig::default_three_axis(0).into(),
            simulation: SimulationSettings::default(),
            multisine: MultisineSpec {
                sample_rate: 500.0,
                period_samples: 4000,
                f_min: 2.0,
                f_max: 50.0,
                // more targets than odd bins: every odd bin in the band
                n_lines: 1000,
                line_selection: LineSelection::LogSpacedOdd,
                amplitude_profile: AmplitudeProfile::Uniform(0.05),
                phase_seed: 0,
                n_inputs: 3,
                orthogonal_blocks: true,
                offset_sine: None,
            },
            configurations: Configurations::Random(RandomConfigurations {
                count: 5,
                seed: 7,
                center: vec![-PI / 2.0, 0.0, 0.0],
                half_range: vec![0.8, 1.2, 1.2],
            }),
            estimators,
            graybox: GrayboxSection::default(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn n_u(&self) -> usize {
        self.plant.n_axes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.plant.validate()?;
        let n = self.n_u();
        self.controller.validate(n)?;
        self.disturbance.with_seed(0).validate(n)?;
        self.multisine.validate()?;
        if self.multisine.n_inputs != n {
            return Err(Error::Config(format!("multisine drives {} inputs, plant has {n}", self.multisine.n_inputs)));
        }
        if self.n_experiments == 0 || self.n_experiments % n != 0 {
            return Err(Error::Config(format!("n_experiments must be a positive multiple of {n}")));
        }
        if self.simulation.substeps == 0 || self.simulation.n_periods == 0 {
            return Err(Error::Config("substeps and n_periods must be positive".into()));
        }
        match &self.configurations {
            Configurations::List(list) if list.is_empty() => {
                return Err(Error::Config("no configurations".into()));
            }
            Configurations::List(list) => {
                if list.iter().any(|q| q.len() != n || q.iter().any(|a| !a.is_finite())) {
                    return Err(Error::Config(format!("configurations need {n} finite angles each")));
                }
            }
            Configurations::Random(r) => {
                if r.count == 0 || r.center.len() != n || r.half_range.len() != n {
                    return Err(Error::Config(format!("random configurations need count > 0 and {n} centers and ranges")));
                }
                if r.half_range.iter().chain(&r.center).any(|h| !h.is_finite()) || r.half_range.iter().any(|&h| h < 0.0) {
                    return Err(Error::Config("half_range must be non-negative".into()));
                }
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator matrix is empty".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.estimators {
            e.validate(n, self.n_experiments)?;
            if !names.insert(e.cell_name()) {
                return Err(Error::Config(format!("duplicate estimator cell {}", e.cell_name())));
            }
        }
        self.graybox.weights.validate()?;
        self.graybox.options.validate()?;
        if let Some(t) = &self.graybox.theta0 {
            self.plant.with_theta(t.clone()).validate()?;
        }
        Ok(())
    }

    /// Multisine design with the derived phase seed.
    pub fn multisine_spec(&self) -> MultisineSpec {
        MultisineSpec {
            phase_seed: seed::derive(self.seed, &[seed::role::EXCITATION]),
            ..self.multisine.clone()
        }
    }

    pub fn excitations(&self) -> Result<Vec<Excitation>> {
        design_multisine(&self.multisine_spec(), self.n_experiments)
    }

    pub fn theta0(&self) -> ThetaVector {
        self.graybox.theta0.clone().unwrap_or_else(|| self.plant.theta.clone())
    }

    pub fn sample_time(&self) -> f64 {
        1.0 / self.multisine.sample_rate
    }
}

/// Failed unit of work; the stage continues with the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scope: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub completed: Vec<String>,
    pub failures: Vec<Failure>,
}

impl StageSummary {
    fn new(stage: &str) -> Self {
        StageSummary {
            stage: stage.to_string(),
            ..Default::default()
        }
    }

    fn record(&mut self, scope: String, r: Result<()>) {
        match r {
            Ok(()) => self.completed.push(scope),
            Err(e) => {
                warn!("{} {scope}: {e}", self.stage);
                self.failures.push(Failure {
                    scope,
                    message: e.to_string(),
                });
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join(&self.stage).join("summary.json"), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationEntry {
    pub index: usize,
    pub q_a0: Vec<f64>,
    /// False when the simulation of this configuration failed.
    pub ok: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fsio::write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn config_dir(out: &Path, c: usize) -> PathBuf {
    out.join("simulate").join(format!("c{c}"))
}

fn record_path(out: &Path, c: usize, e: usize) -> PathBuf {
    config_dir(out, c).join(format!("e{e}.csv"))
}

fn truth_path(out: &Path, c: usize) -> PathBuf {
    config_dir(out, c).join("truth.json")
}

fn estimate_path(out: &Path, c: usize, cell: &str) -> PathBuf {
    out.join("estimate").join(format!("c{c}")).join(format!("{cell}.json"))
}

fn fit_path(out: &Path, cell: &str) -> PathBuf {
    out.join("fit").join(format!("{cell}.json"))
}

/// Noise-free sampled-data FRF of the linearization at the excited lines.
pub fn truth(cfg: &CampaignConfig, q_a0: &[f64]) -> Result<FrfEstimate> {
    let omegas = cfg.multisine.excited_omegas()?;
    truth_frf(&cfg.plant, q_a0, &omegas, Some(cfg.sample_time()))
}

/// All experiments of configuration `c`.
pub fn simulate_configuration(
    cfg: &CampaignConfig,
    c: usize,
    q_a0: &[f64],
    excitations: &[Excitation],
) -> Result<Vec<TimeRecord>> {
    excitations
        .par_iter()
        .enumerate()
        .map(|(e, ex)| {
            let d = cfg.disturbance.with_seed(noise_seed(cfg, c, e));
            simulate_closed_loop(&cfg.plant, &cfg.controller, &d, q_a0, ex, &cfg.simulation)
        })
        .collect()
}

pub fn noise_seed(cfg: &CampaignConfig, c: usize, e: usize) -> u64 {
    seed::derive(cfg.seed, &[c as u64, e as u64, seed::role::NOISE])
}

/// Spectra of all experiments of one configuration.
pub fn spectra(cfg: &CampaignConfig, records: &[TimeRecord]) -> Result<SpectralRecord> {
    let spec = cfg.multisine_spec();
    let recs = records
        .iter()
        .map(|r| to_spectral(r, &spec))
        .collect::<Result<Vec<_>>>()?;
    SpectralRecord::concat(&recs)
}

/// Runs one estimator cell on the first `n_e` experiments of `rec`.
pub fn estimate_cell(entry: &EstimatorEntry, rec: &SpectralRecord) -> Result<FrfEstimate> {
    if entry.n_e > rec.n_e() {
        return Err(Error::MissingInput(format!(
            "{} needs {} experiments, {} available",
            entry.cell_name(),
            entry.n_e,
            rec.n_e()
        )));
    }
    let cols: Vec<usize> = (0..entry.n_e).collect();
    let sub = rec.experiments(&cols)?;
    let n_u = rec.n_u();
    if entry.method.is_classical() {
        let blocks = ExperimentBlocks::contiguous(entry.n_e, n_u)?;
        return match entry.method {
            Method::H1 => classical::h1_estimate(&sub, &blocks),
            Method::Ari => classical::ari_estimate(&sub, &blocks),
            Method::Log => classical::log_estimate(&sub, &blocks),
            Method::Jio => classical::jio_classical(&sub, &blocks),
            _ => unreachable!(),
        };
    }
    let with = |p| LocalFitConfig {
        parametrization: p,
        ..entry.local.clone()
    };
    let (config, fit): (LocalFitConfig, fn(&SpectralRecord, &LocalFitConfig) -> Result<FrfEstimate>) =
        match entry.method {
            Method::Lpm => (with(Parametrization::Lpm), local::local_fit),
            Method::LrmMiso => (with(Parametrization::LrmMiso), local::local_fit),
            Method::LrmMimo => (with(Parametrization::LrmMimo), local::local_fit),
            Method::JioLrm => (entry.local.clone(), local::jio_lrm),
            _ => unreachable!(),
        };
    let per = local::per_experiment(&sub, &config, fit)?;
    if per.len() == 1 {
        return Ok(per.into_iter().next().expect("one estimate"));
    }
    local::log_average_local(&per)
}

/// Weights used for both the amplitude bias and the fits of one configuration.
pub fn weights(cfg: &CampaignConfig, estimate: &FrfEstimate, q_a0: &[f64]) -> Result<LineWeights> {
    let model = cfg.plant.with_theta(cfg.theta0());
    graybox::build_weights(estimate, &model, q_a0, &cfg.graybox.weights)
}

/// Amplitude-bias weights: the fit weighting without the variance term,
/// realized on the truth grid.
pub fn bias_weights(cfg: &CampaignConfig, truth: &FrfEstimate, q_a0: &[f64]) -> Result<LineWeights> {
    let scheme = WeightScheme {
        inverse_variance: false,
        ..cfg.graybox.weights.clone()
    };
    graybox::build_weights(truth, &cfg.plant.with_theta(cfg.theta0()), q_a0, &scheme)
}

/// Gray-box fit of one cell across configurations.
pub fn fit_cell(
    cfg: &CampaignConfig,
    cell_index: usize,
    configurations: &[Vec<f64>],
    estimates: &[FrfEstimate],
) -> Result<FitResult> {
    let total: usize = estimates.iter().map(|e| e.n_lines()).sum();
    let valid: usize = estimates.iter().map(|e| e.valid_count()).sum();
    if total == 0 || (valid as f64) < MIN_VALID_FRACTION * total as f64 {
        return Err(Error::Optimization(format!(
            "only {valid} of {total} lines are valid; fit refused"
        )));
    }
    let weights = estimates
        .iter()
        .zip(configurations)
        .map(|(e, q)| weights(cfg, e, q))
        .collect::<Result<Vec<_>>>()?;
    let data = FitData {
        configurations: configurations.to_vec(),
        estimates: estimates.to_vec(),
        weights,
        sample_time: cfg.graybox.sampled_model.then(|| cfg.sample_time()),
    };
    let options = FitOptions {
        seed: seed::derive(cfg.seed, &[cell_index as u64, seed::role::FIT]),
        ..cfg.graybox.options.clone()
    };
    graybox::fit_parameters(&cfg.plant.with_theta(cfg.theta0()), &data, &options)
}

/// Simulates every configuration and writes records and truth FRFs.
pub fn run_simulate(cfg: &CampaignConfig, out: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let excitations = cfg.excitations()?;
    let configurations = cfg.configurations.resolve();
    let results: Vec<Result<()>> = configurations
        .par_iter()
        .enumerate()
        .map(|(c, q)| {
            let truth = truth(cfg, q)?;
            let records = simulate_configuration(cfg, c, q, &excitations)?;
            for (e, r) in records.iter().enumerate() {
                sigproc::write_time_record(&record_path(out, c, e), r, Some(noise_seed(cfg, c, e)))?;
            }
            truth.write(&truth_path(out, c))
        })
        .collect();
    let mut summary = StageSummary::new("simulate");
    let mut entries = Vec::new();
    for (c, (q, r)) in configurations.iter().zip(results).enumerate() {
        entries.push(ConfigurationEntry {
            index: c,
            q_a0: q.clone(),
            ok: r.is_ok(),
        });
        summary.record(format!("c{c}"), r);
    }
    write_json(&out.join("simulate").join("configurations.json"), &entries)?;
    summary.write(out)?;
    Ok(summary)
}

fn simulated_configurations(out: &Path) -> Result<Vec<ConfigurationEntry>> {
    read_json(&out.join("simulate").join("configurations.json"))
}

/// Runs every estimator cell on every simulated configuration.
pub fn run_estimate(cfg: &CampaignConfig, out: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let entries = simulated_configurations(out)?;
    let results: Vec<Vec<(String, Result<()>)>> = entries
        .par_iter()
        .filter(|c| c.ok)
        .map(|c| {
            let loaded = (0..cfg.n_experiments)
                .map(|e| sigproc::read_time_record(&record_path(out, c.index, e)).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()
                .and_then(|records| spectra(cfg, &records));
            let rec = match loaded {
                Ok(rec) => rec,
                Err(e) => return vec![(format!("c{}", c.index), Err(e))],
            };
            cfg.estimators
                .par_iter()
                .map(|entry| {
                    let cell = entry.cell_name();
                    let start = std::time::Instant::now();
                    let r = estimate_cell(entry, &rec).and_then(|est| {
                        info!(
                            "c{} {cell}: {:.3} s, {} of {} lines valid",
                            c.index,
                            start.elapsed().as_secs_f64(),
                            est.valid_count(),
                            est.n_lines()
                        );
                        est.write(&estimate_path(out, c.index, &cell))
                    });
                    (format!("c{}/{cell}", c.index), r)
                })
                .collect()
        })
        .collect();
    let mut summary = StageSummary::new("estimate");
    for (scope, r) in results.into_iter().flatten() {
        summary.record(scope, r);
    }
    summary.write(out)?;
    Ok(summary)
}

/// Estimates of one cell over the configurations where it exists.
fn load_cell(out: &Path, entries: &[ConfigurationEntry], cell: &str) -> Result<(Vec<Vec<f64>>, Vec<FrfEstimate>)> {
    let mut qs = Vec::new();
    let mut ests = Vec::new();
    for c in entries.iter().filter(|c| c.ok) {
        let path = estimate_path(out, c.index, cell);
        if path.exists() {
            qs.push(c.q_a0.clone());
            ests.push(FrfEstimate::read(&path)?);
        }
    }
    if ests.is_empty() {
        return Err(Error::MissingInput(format!("no estimates for {cell}")));
    }
    Ok((qs, ests))
}

/// Fits the gray-box model to every cell flagged for fitting.
pub fn run_fit(cfg: &CampaignConfig, out: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let entries = simulated_configurations(out)?;
    let mut summary = StageSummary::new("fit");
    for (i, entry) in cfg.estimators.iter().enumerate().filter(|(_, e)| e.fit) {
        let cell = entry.cell_name();
        let r = load_cell(out, &entries, &cell).and_then(|(qs, ests)| {
            let fit = fit_cell(cfg, i, &qs, &ests)?;
            info!("fit {cell}: cost {:.4e} in {:.2} s", fit.cost, fit.wall_time_s);
            fsio::write_atomic(&fit_path(out, &cell), fit.to_json()?.as_bytes())
        });
        summary.record(cell, r);
    }
    summary.write(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBias {
    pub cell: String,
    pub method: Method,
    pub n_e: usize,
    pub bias: BiasReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParameterBias {
    pub cell: String,
    pub method: Method,
    pub n_e: usize,
    pub names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub bias: metrics::ParameterBias,
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        String::new()
    }
}

/// Amplitude bias table: one row per `n_e` (descending), one column per method.
pub fn amplitude_bias_table(cells: &[CellBias], n_u: usize) -> String {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| cells.iter().any(|c| c.method == *m))
        .collect();
    let mut rows: BTreeMap<std::cmp::Reverse<usize>, BTreeMap<Method, f64>> = BTreeMap::new();
    for c in cells {
        rows.entry(std::cmp::Reverse(c.n_e)).or_default().insert(c.method, c.bias.mean);
    }
    let mut s = String::from("n_e,M");
    for m in &methods {
        write!(s, ",{}", m.name()).unwrap();
    }
    s.push('\n');
    for (std::cmp::Reverse(n_e), row) in rows {
        let m = if n_e % n_u == 0 { (n_e / n_u).to_string() } else { String::new() };
        write!(s, "{n_e},{m}").unwrap();
        for method in &methods {
            let v = row.get(method).copied().map(fmt_value).unwrap_or_default();
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Magnitude and phase of `G_ij` for the truth and every estimate.
pub fn curve_table(truth: &FrfEstimate, estimates: &[(String, FrfEstimate)], i: usize, j: usize) -> String {
    let k = i + j * truth.n_y();
    let all: Vec<(&str, &FrfEstimate)> = std::iter::once(("truth", truth))
        .chain(estimates.iter().map(|(n, e)| (n.as_str(), e)))
        .collect();
    let mut s = String::from("freq_hz");
    for (n, _) in &all {
        write!(s, ",abs_{n}").unwrap();
    }
    for (n, _) in &all {
        write!(s, ",arg_{n}").unwrap();
    }
    s.push('\n');
    for (l, w) in truth.freqs.iter().enumerate() {
        write!(s, "{}", fmt_value(w / (2.0 * PI))).unwrap();
        let value = |e: &FrfEstimate| e.lines[l].is_valid().then(|| e.lines[l].g[k]);
        for (_, e) in &all {
            write!(s, ",{}", value(e).map(|g| fmt_value(g.norm())).unwrap_or_default()).unwrap();
        }
        for (_, e) in &all {
            write!(s, ",{}", value(e).map(|g| fmt_value(g.arg())).unwrap_or_default()).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes bias tables and FRF curves for whatever estimates and fits exist.
pub fn run_report(cfg: &CampaignConfig, out: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    let entries = simulated_configurations(out)?;
    let dir = out.join("report");
    let mut summary = StageSummary::new("report");
    let truths: BTreeMap<usize, FrfEstimate> = entries
        .iter()
        .filter(|c| c.ok)
        .map(|c| Ok((c.index, FrfEstimate::read(&truth_path(out, c.index))?)))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for entry in &cfg.estimators {
        let cell = entry.cell_name();
        let r = (|| -> Result<()> {
            let (mut ts, mut es, mut ws) = (Vec::new(), Vec::new(), Vec::new());
            for c in entries.iter().filter(|c| c.ok) {
                let path = estimate_path(out, c.index, &cell);
                if !path.exists() {
                    continue;
                }
                let t = &truths[&c.index];
                ws.push(bias_weights(cfg, t, &c.q_a0)?);
                es.push(FrfEstimate::read(&path)?);
                ts.push(t.clone());
            }
            if es.is_empty() {
                return Err(Error::MissingInput(format!("no estimates for {cell}")));
            }
            cells.push(CellBias {
                cell: cell.clone(),
                method: entry.method,
                n_e: entry.n_e,
                bias: metrics::frf_amplitude_bias(&ts, &es, &ws)?,
            });
            Ok(())
        })();
        summary.record(format!("amplitude/{cell}"), r);
    }
    fsio::write_atomic(&dir.join("amplitude_bias.csv"), amplitude_bias_table(&cells, cfg.n_u()).as_bytes())?;
    write_json(&dir.join("amplitude_bias.json"), &cells)?;

    let theta_true = cfg.plant.theta.free();
    let mut params = Vec::new();
    for entry in cfg.estimators.iter().filter(|e| e.fit) {
        let cell = entry.cell_name();
        let path = fit_path(out, &cell);
        let r = (|| -> Result<()> {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
            let fit = FitResult::from_json(&text)?;
            params.push(CellParameterBias {
                cell: cell.clone(),
                method: entry.method,
                n_e: entry.n_e,
                bias: metrics::parameter_bias(&theta_true, &fit.theta_hat.free())?,
                names: fit.names,
                theta_hat: fit.theta_hat.free(),
            });
            Ok(())
        })();
        summary.record(format!("parameters/{cell}"), r);
    }
    let mut s = String::from("cell,method,n_e,mean");
    for n in cfg.plant.theta.free_names() {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for p in &params {
        write!(s, "{},{},{},{}", p.cell, p.method.name(), p.n_e, fmt_value(p.bias.mean)).unwrap();
        for v in &p.bias.per_parameter {
            write!(s, ",{}", v.map(fmt_value).unwrap_or_default()).unwrap();
        }
        s.push('\n');
    }
    fsio::write_atomic(&dir.join("parameter_bias.csv"), s.as_bytes())?;
    write_json(&dir.join("parameter_bias.json"), &params)?;

    for (&c, truth) in &truths {
        let ests: Vec<(String, FrfEstimate)> = cfg
            .estimators
            .iter()
            .filter_map(|e| {
                let path = estimate_path(out, c, &e.cell_name());
                FrfEstimate::read(&path).ok().map(|est| (e.cell_name(), est))
            })
            .collect();
        for j in 0..truth.n_u() {
            for i in 0..truth.n_y() {
                let path = dir.join("curves").join(format!("c{c}_g{}{}.csv", i + 1, j + 1));
                fsio::write_atomic(&path, curve_table(truth, &ests, i, j).as_bytes())?;
            }
        }
    }
    summary.write(out)?;
    Ok(summary)
}

/// Runs every stage in order.
pub fn run_all(cfg: &CampaignConfig, out: &Path) -> Result<Vec<StageSummary>> {
    Ok(vec![
        run_simulate(cfg, out)?,
        run_estimate(cfg, out)?,
        run_fit(cfg, out)?,
        run_report(cfg, out)?,
    ])
}

#[cfg(test)]
mod tests;
