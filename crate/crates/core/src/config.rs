//! Experiment configuration files.
//!
//! A configuration is a TOML document naming one experiment, the seeds, the
//! output directory and the sections the experiment reads. Omitted sections
//! take their defaults; a section the experiment does not read is rejected so
//! that a misplaced table does not go unnoticed.
//!
//! ```toml
//! experiment = "theorem1"
//! seeds = { start = 0, count = 32 }
//! output_dir = "results/theorem1"
//!
//! [task]
//! alpha = 0.125
//!
//! [train]
//! steps = 2000
//!
//! [theorem1.sweep]
//! draws = 4
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::{DeviceProfile, ModelProfile};
use crate::prognoise::NoiseSpec;
use crate::synthetic::TaskSpec;
use crate::trainer::{CompareConfig, GammaChoice, NoiseSweepConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    NoiseValidate,
    QuantizerValidate,
    Lemma1,
    Theorem1,
    PartitionCompare,
    PerfTable,
    Calibrate,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::NoiseValidate,
        Experiment::QuantizerValidate,
        Experiment::Lemma1,
        Experiment::Theorem1,
        Experiment::PartitionCompare,
        Experiment::PerfTable,
        Experiment::Calibrate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::NoiseValidate => "noise-validate",
            Experiment::QuantizerValidate => "quantizer-validate",
            Experiment::Lemma1 => "lemma1",
            Experiment::Theorem1 => "theorem1",
            Experiment::PartitionCompare => "partition-compare",
            Experiment::PerfTable => "perf-table",
            Experiment::Calibrate => "calibrate",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::NoiseValidate => "Monte-Carlo check of the PCM programming-noise standard deviation",
            Experiment::QuantizerValidate => "property checks of the DAC and ADC quantizers",
            Experiment::Lemma1 => "train the toy MoE and compare MaxNNScore of rare and frequent experts",
            Experiment::Theorem1 => "noise tolerance of all-analog versus heterogeneous inference",
            Experiment::PartitionCompare => "noise sweeps for every expert-selection metric and digital fraction",
            Experiment::PerfTable => "throughput and energy efficiency of digital, analog and mixed placements",
            Experiment::Calibrate => "grid search of the DAC range kappa and ADC range lambda on a noisy layer",
        }
    }

    /// Config sections the experiment reads.
    pub fn sections(self) -> &'static [Section] {
        match self {
            Experiment::NoiseValidate => &[Section::NoiseValidate],
            Experiment::QuantizerValidate => &[Section::QuantizerValidate],
            Experiment::Lemma1 => &[Section::Task, Section::Train],
            Experiment::Theorem1 => &[Section::Task, Section::Train, Section::Theorem1],
            Experiment::PartitionCompare => &[Section::Task, Section::Train, Section::Compare],
            Experiment::PerfTable => &[Section::Perf],
            Experiment::Calibrate => &[Section::Calibrate],
        }
    }

    /// Whether results depend on the seed list.
    pub fn uses_seeds(self) -> bool {
        !matches!(self, Experiment::PerfTable)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Task,
    Train,
    Theorem1,
    Compare,
    Perf,
    NoiseValidate,
    QuantizerValidate,
    Calibrate,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Task => "task",
            Section::Train => "train",
            Section::Theorem1 => "theorem1",
            Section::Compare => "compare",
            Section::Perf => "perf",
            Section::NoiseValidate => "noise_validate",
            Section::QuantizerValidate => "quantizer_validate",
            Section::Calibrate => "calibrate",
        }
    }
}

/// Either an explicit list or `{ start, count }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Range { start: 0, count: 32 }
    }
}

impl Seeds {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    /// Fixed digital fraction; the measured fraction of frequent-token
    /// experts when absent.
    pub gamma: Option<f64>,
    pub sweep: NoiseSweepConfig,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            gamma: None,
            sweep: NoiseSweepConfig::default(),
        }
    }
}

impl Theorem1Config {
    pub fn gamma_choice(&self) -> GammaChoice {
        match self.gamma {
            Some(g) => GammaChoice::Fixed(g),
            None => GammaChoice::Measured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfConfig {
    pub model: ModelProfile,
    pub device: DeviceProfile,
    pub batch_size: usize,
    /// Digital expert fractions of the heterogeneous rows.
    pub expert_gammas: Vec<f64>,
    pub active_only_transfer: bool,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self {
            model: ModelProfile::olmoe(),
            device: DeviceProfile::default(),
            batch_size: 32,
            expert_gammas: vec![0.0, 0.125, 0.25],
            active_only_transfer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseValidateConfig {
    pub noise: NoiseSpec,
    /// `[w, w_max]` pairs.
    pub pairs: Vec<[f64; 2]>,
    pub draws: usize,
    /// Largest accepted relative error of the sampled standard deviation.
    pub tolerance: f64,
}

impl Default for NoiseValidateConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSpec::pcm(),
            pairs: vec![
                [0.0, 1.0],
                [0.05, 1.0],
                [-0.15, 1.0],
                [0.25, 1.0],
                [0.29, 1.0],
                [0.3, 1.0],
                [-0.5, 1.0],
                [0.75, 1.0],
                [1.0, 1.0],
                [-1.6, 2.0],
            ],
            draws: 1_000_000,
            tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerValidateConfig {
    pub bits: Vec<u32>,
    pub samples: usize,
    /// Converter range `beta`.
    pub beta: f64,
    /// Inputs are drawn uniformly from `[-spread * beta, spread * beta]`.
    pub spread: f64,
    /// Bit widths also checked against an exhaustive nearest-level search.
    pub brute_force_bits: Vec<u32>,
}

impl Default for QuantizerValidateConfig {
    fn default() -> Self {
        Self {
            bits: vec![4, 8, 12],
            samples: 10_000,
            beta: 1.0,
            spread: 1.5,
            brute_force_bits: vec![4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub dac_bits: u32,
    pub adc_bits: u32,
    pub noise: NoiseSpec,
    pub calibration_inputs: usize,
    pub eval_inputs: usize,
    /// Degrees of freedom of the Student-t input features; heavy tails make
    /// the DAC range matter.
    pub input_dof: f64,
    pub kappa_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 64,
            tile_size: 128,
            dac_bits: 8,
            adc_bits: 8,
            noise: NoiseSpec::pcm(),
            calibration_inputs: 256,
            eval_inputs: 256,
            input_dof: 3.0,
            kappa_grid: vec![10.0, 18.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0],
            lambda_grid: vec![0.75, 0.9, 1.0, 1.125, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem1: Option<Theorem1Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf: Option<PerfConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_validate: Option<NoiseValidateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer_validate: Option<QuantizerValidateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// Defaults for `experiment` with every section it reads filled in.
    pub fn defaults_for(experiment: Experiment) -> Self {
        let mut cfg = Self {
            experiment,
            seeds: Seeds::default(),
            output_dir: default_output_dir(),
            task: None,
            train: None,
            theorem1: None,
            compare: None,
            perf: None,
            noise_validate: None,
            quantizer_validate: None,
            calibrate: None,
        };
        for section in experiment.sections() {
            match section {
                Section::Task => cfg.task = Some(TaskSpec::default()),
                Section::Train => cfg.train = Some(TrainConfig::default()),
                Section::Theorem1 => cfg.theorem1 = Some(Theorem1Config::default()),
                Section::Compare => cfg.compare = Some(CompareConfig::default()),
                Section::Perf => cfg.perf = Some(PerfConfig::default()),
                Section::NoiseValidate => cfg.noise_validate = Some(NoiseValidateConfig::default()),
                Section::QuantizerValidate => cfg.quantizer_validate = Some(QuantizerValidateConfig::default()),
                Section::Calibrate => cfg.calibrate = Some(CalibrateConfig::default()),
            }
        }
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    fn present(&self, section: Section) -> bool {
        match section {
            Section::Task => self.task.is_some(),
            Section::Train => self.train.is_some(),
            Section::Theorem1 => self.theorem1.is_some(),
            Section::Compare => self.compare.is_some(),
            Section::Perf => self.perf.is_some(),
            Section::NoiseValidate => self.noise_validate.is_some(),
            Section::QuantizerValidate => self.quantizer_validate.is_some(),
            Section::Calibrate => self.calibrate.is_some(),
        }
    }

    /// Fills every section the experiment reads with its defaults.
    pub fn resolved(&self) -> Self {
        let defaults = Self::defaults_for(self.experiment);
        Self {
            task: self.task.clone().or(defaults.task),
            train: self.train.clone().or(defaults.train),
            theorem1: self.theorem1.clone().or(defaults.theorem1),
            compare: self.compare.clone().or(defaults.compare),
            perf: self.perf.clone().or(defaults.perf),
            noise_validate: self.noise_validate.clone().or(defaults.noise_validate),
            quantizer_validate: self.quantizer_validate.clone().or(defaults.quantizer_validate),
            calibrate: self.calibrate.clone().or(defaults.calibrate),
            ..self.clone()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.expand()
    }

    /// Checks the config; every failure is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        const ALL_SECTIONS: [Section; 8] = [
            Section::Task,
            Section::Train,
            Section::Theorem1,
            Section::Compare,
            Section::Perf,
            Section::NoiseValidate,
            Section::QuantizerValidate,
            Section::Calibrate,
        ];
        let used = self.experiment.sections();
        if let Some(extra) = ALL_SECTIONS.iter().find(|s| self.present(**s) && !used.contains(s)) {
            return Err(Error::Config(format!(
                "section [{}] is not used by experiment {}",
                extra.name(),
                self.experiment
            )));
        }
        let seeds = self.seed_list();
        if self.experiment.uses_seeds() && seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is empty".into()));
        }
        let cfg = self.resolved();
        if let Some(task) = &cfg.task {
            task.validate()?;
        }
        if let Some(train) = &cfg.train {
            train.validate()?;
        }
        if let Some(t1) = &cfg.theorem1 {
            t1.sweep.validate()?;
            if let Some(g) = t1.gamma {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Config(format!("theorem1.gamma must be in [0, 1], got {g}")));
                }
            }
        }
        if let Some(compare) = &cfg.compare {
            compare.validate()?;
        }
        if let Some(perf) = &cfg.perf {
            perf.model.validate()?;
            perf.device.validate()?;
            if perf.batch_size == 0 {
                return Err(Error::Config("perf.batch_size must be positive".into()));
            }
            if perf.expert_gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Error::Config("perf.expert_gammas must lie in [0, 1]".into()));
            }
        }
        if let Some(nv) = &cfg.noise_validate {
            nv.noise.validate()?;
            if !matches!(nv.noise.model, crate::prognoise::NoiseModel::Full { .. }) {
                return Err(Error::Config("noise_validate needs the full noise model".into()));
            }
            if nv.pairs.is_empty() || nv.draws < 2 {
                return Err(Error::Config("noise_validate needs pairs and at least 2 draws".into()));
            }
            if nv.pairs.iter().any(|[w, m]| !(*m > 0.0) || w.abs() > *m || !w.is_finite()) {
                return Err(Error::Config("noise_validate pairs need |w| <= w_max and w_max > 0".into()));
            }
            if !(nv.tolerance > 0.0) {
                return Err(Error::Config("noise_validate.tolerance must be positive".into()));
            }
        }
        if let Some(qv) = &cfg.quantizer_validate {
            if qv.bits.is_empty() || qv.samples == 0 {
                return Err(Error::Config("quantizer_validate needs bit widths and samples".into()));
            }
            for &b in qv.bits.iter().chain(&qv.brute_force_bits) {
                crate::quantizer::levels(b).map_err(|e| Error::Config(e.to_string()))?;
            }
            if qv.brute_force_bits.iter().any(|&b| b > 16) {
                return Err(Error::Config("brute-force checks are limited to 16 bits".into()));
            }
            if !(qv.beta > 0.0) || !(qv.spread > 0.0) {
                return Err(Error::Config("quantizer_validate.beta and spread must be positive".into()));
            }
        }
        if let Some(cal) = &cfg.calibrate {
            if cal.rows == 0 || cal.cols == 0 || cal.tile_size == 0 {
                return Err(Error::Config("calibrate needs positive rows, cols and tile_size".into()));
            }
            if cal.calibration_inputs < 2 || cal.eval_inputs == 0 {
                return Err(Error::Config("calibrate needs at least 2 calibration inputs and 1 eval input".into()));
            }
            if cal.kappa_grid.is_empty() || cal.lambda_grid.is_empty() {
                return Err(Error::Config("calibration grids must be nonempty".into()));
            }
            if cal.kappa_grid.iter().chain(&cal.lambda_grid).any(|v| !(*v > 0.0)) {
                return Err(Error::Config("calibration grid values must be positive".into()));
            }
            if !(cal.input_dof > 2.0) {
                return Err(Error::Config("calibrate.input_dof must exceed 2".into()));
            }
            crate::quantizer::QuantizerConfig {
                dac_bits: cal.dac_bits,
                adc_bits: cal.adc_bits,
                ..Default::default()
            }
            .validate()?;
            cal.noise.validate()?;
        }
        Ok(())
    }
}
