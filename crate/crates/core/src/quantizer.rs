//! DAC input quantization, ADC output quantization and the calibration of
//! their ranges.
//!
//! Rounding is half away from zero (`f64::round`). The DAC clamps before
//! scaling; the ADC rounds first and clamps the rescaled value, following the
//! order in which the two converters are usually written down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_std, Matrix};

/// Dead-column `beta_out` as a fraction of `beta_in`.
pub const DEAD_COLUMN_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    #[serde(default = "default_bits")]
    pub dac_bits: u32,
    #[serde(default = "default_bits")]
    pub adc_bits: u32,
    /// Input range multiplier: `beta_in = kappa * std(x)`.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Output range multiplier in `beta_out = lambda * beta_in * max|W_col|`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
}

fn default_bits() -> u32 {
    8
}
fn default_kappa() -> f64 {
    35.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_ema_decay() -> f64 {
    0.9
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            dac_bits: default_bits(),
            adc_bits: default_bits(),
            kappa: default_kappa(),
            lambda: default_lambda(),
            ema_decay: default_ema_decay(),
        }
    }
}

impl QuantizerConfig {
    pub fn with_bits(bits: u32) -> Self {
        Self {
            dac_bits: bits,
            adc_bits: bits,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("dac_bits", self.dac_bits), ("adc_bits", self.adc_bits)] {
            if !(2..=52).contains(&bits) {
                return Err(Error::param(format!("{name} must be in 2..=52, got {bits}")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::param(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::param(format!(
                "ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// Number of positive levels, `2^(bits-1) - 1`.
pub fn levels(bits: u32) -> Result<f64> {
    if !(2..=52).contains(&bits) {
        return Err(Error::param(format!("bit width must be in 2..=52, got {bits}")));
    }
    Ok(((1u64 << (bits - 1)) - 1) as f64)
}

fn check_range(name: &str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be positive and finite, got {beta}")))
    }
}

#[inline]
fn dac_scalar(x: f64, beta_in: f64, levels: f64) -> f64 {
    let clamped = x.clamp(-beta_in, beta_in);
    (clamped * levels / beta_in).round() * beta_in / levels
}

#[inline]
fn adc_scalar(y: f64, beta_out: f64, levels: f64) -> f64 {
    ((y * levels / beta_out).round() * beta_out / levels).clamp(-beta_out, beta_out)
}

/// Quantizes inputs onto the `bits`-bit grid spanning `[-beta_in, beta_in]`.
pub fn dac_quantize(x: &[f64], beta_in: f64, bits: u32) -> Result<Vec<f64>> {
    check_range("beta_in", beta_in)?;
    let l = levels(bits)?;
    Ok(x.iter().map(|&v| dac_scalar(v, beta_in, l)).collect())
}

/// Quantizes column outputs onto the `bits`-bit grid with range `beta_out`.
pub fn adc_quantize(y: &[f64], beta_out: f64, bits: u32) -> Result<Vec<f64>> {
    check_range("beta_out", beta_out)?;
    let l = levels(bits)?;
    Ok(y.iter().map(|&v| adc_scalar(v, beta_out, l)).collect())
}

/// ADC output range for one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaOut {
    pub value: f64,
    /// The column is identically zero; `value` is the epsilon floor.
    pub dead: bool,
}

/// `beta_out = lambda * beta_in * max|w_col|`, floored at
/// `DEAD_COLUMN_EPSILON * beta_in` for all-zero columns.
pub fn compute_beta_out(w_col: &[f64], beta_in: f64, lambda: f64) -> Result<BetaOut> {
    if w_col.is_empty() {
        return Err(Error::shape("beta_out of an empty column"));
    }
    check_range("beta_in", beta_in)?;
    check_range("lambda", lambda)?;
    let max = w_col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(if max == 0.0 {
        BetaOut {
            value: DEAD_COLUMN_EPSILON * beta_in,
            dead: true,
        }
    } else {
        BetaOut {
            value: lambda * beta_in * max,
            dead: false,
        }
    })
}

/// Exponential moving average of the input standard deviation seen by one
/// tile. The first observation initializes the average directly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibState {
    ema_std: Option<f64>,
    samples: u64,
}

impl CalibState {
    pub fn new() -> Self {
        Self::default()
    }

    /// State pinned to a known input standard deviation.
    pub fn fixed(std: f64) -> Self {
        Self {
            ema_std: Some(std.max(0.0)),
            samples: 1,
        }
    }

    pub fn ema_std(&self) -> Option<f64> {
        self.ema_std
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn is_calibrated(&self) -> bool {
        self.ema_std.is_some()
    }

    /// Calibrated, but the average is zero so no usable range exists.
    pub fn is_degenerate(&self) -> bool {
        self.ema_std == Some(0.0)
    }

    /// Folds the population std of all `batch` entries into the average.
    pub fn update(&self, batch: &Matrix, decay: f64) -> Result<CalibState> {
        self.update_values(batch.as_slice(), decay)
    }

    pub fn update_values(&self, values: &[f64], decay: f64) -> Result<CalibState> {
        if values.is_empty() {
            return Err(Error::param("calibration batch is empty"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::param(format!("ema decay must be in (0, 1), got {decay}")));
        }
        let (_, std) = mean_std(values);
        let ema = match self.ema_std {
            None => std,
            Some(old) => decay * old + (1.0 - decay) * std,
        };
        Ok(CalibState {
            ema_std: Some(ema),
            samples: self.samples + values.len() as u64,
        })
    }

    /// `kappa * EMA`. Errors if uncalibrated or degenerate.
    pub fn beta_in(&self, kappa: f64) -> Result<f64> {
        match self.ema_std {
            None => Err(Error::State("tile input range is uncalibrated".into())),
            Some(s) if s == 0.0 => Err(Error::State(
                "tile input range is degenerate (zero input std)".into(),
            )),
            Some(s) => Ok(kappa * s),
        }
    }
}

/// Outcome of a two-phase `(kappa, lambda)` grid search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub kappa: f64,
    pub lambda: f64,
    /// `(kappa, loss)` for the first sweep, run at `lambda = 1`.
    pub kappa_sweep: Vec<(f64, f64)>,
    /// `(lambda, loss)` for the second sweep, run at the chosen kappa.
    pub lambda_sweep: Vec<(f64, f64)>,
}

/// Lambda held fixed while kappa is swept.
pub const KAPPA_SWEEP_LAMBDA: f64 = 1.0;

/// Sweeps kappa with lambda fixed at 1.0, then sweeps lambda at the best
/// kappa. Ties go to the smaller hyperparameter value. Evaluator errors are
/// returned unchanged.
pub fn grid_calibrate<E, F>(
    mut evaluate: F,
    kappa_grid: &[f64],
    lambda_grid: &[f64],
) -> std::result::Result<CalibrationResult, E>
where
    F: FnMut(f64, f64) -> std::result::Result<f64, E>,
    E: From<Error>,
{
    if kappa_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::param("calibration grids must be nonempty").into());
    }
    let mut kappa_sweep = Vec::with_capacity(kappa_grid.len());
    for &kappa in kappa_grid {
        kappa_sweep.push((kappa, evaluate(kappa, KAPPA_SWEEP_LAMBDA)?));
    }
    let kappa = argmin(&kappa_sweep);
    let mut lambda_sweep = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        lambda_sweep.push((lambda, evaluate(kappa, lambda)?));
    }
    let lambda = argmin(&lambda_sweep);
    Ok(CalibrationResult {
        kappa,
        lambda,
        kappa_sweep,
        lambda_sweep,
    })
}

fn argmin(sweep: &[(f64, f64)]) -> f64 {
    let mut best = sweep[0];
    for &(x, loss) in &sweep[1..] {
        if loss < best.1 || (loss == best.1 && x < best.0) {
            best = (x, loss);
        }
    }
    best.0
}
