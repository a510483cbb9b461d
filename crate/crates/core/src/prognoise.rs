//! Weight-programming noise for PCM crossbars.
//!
//! A programmed weight is `w + N(0, sigma^2)`. The full model fits sigma as a
//! cubic in `|w|` relative to the tile-column maximum `w_max`, with separate
//! coefficients above and below `threshold * w_max`; the simplified model uses
//! `sigma = c * w_max` for every weight. Both are multiplied by `scale`.
//!
//! The two fitted branches do not meet at the threshold. That discontinuity
//! belongs to the fit and is kept as is.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// Branch used for `|w| > threshold * w_max`.
pub const PCM_HIGH: PolyCoeffs = PolyCoeffs {
    c0: 0.012,
    c1: 0.245,
    c2: -0.54,
    c3: 0.40,
};

/// Branch used for `|w| <= threshold * w_max`.
pub const PCM_LOW: PolyCoeffs = PolyCoeffs {
    c0: 0.014,
    c1: 0.224,
    c2: -0.72,
    c3: 0.952,
};

pub const PCM_THRESHOLD: f64 = 0.292;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseModel {
    Full {
        high: PolyCoeffs,
        low: PolyCoeffs,
        threshold: f64,
    },
    Simplified {
        c: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub model: NoiseModel,
    /// Global noise magnitude multiplier.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::pcm()
    }
}

impl NoiseSpec {
    /// Full model with the fitted PCM coefficients.
    pub fn pcm() -> Self {
        Self {
            model: NoiseModel::Full {
                high: PCM_HIGH,
                low: PCM_LOW,
                threshold: PCM_THRESHOLD,
            },
            scale: 1.0,
        }
    }

    pub fn simplified(c: f64) -> Self {
        Self {
            model: NoiseModel::Simplified { c },
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::param(format!("noise scale must be >= 0, got {}", self.scale)));
        }
        match self.model {
            NoiseModel::Full { high, low, threshold } => {
                if !(threshold > 0.0 && threshold < 1.0) {
                    return Err(Error::param(format!(
                        "branch threshold must be in (0, 1), got {threshold}"
                    )));
                }
                let all = [high.c0, high.c1, high.c2, high.c3, low.c0, low.c1, low.c2, low.c3];
                if all.iter().any(|c| !c.is_finite()) {
                    return Err(Error::param("noise coefficients must be finite"));
                }
            }
            NoiseModel::Simplified { c } => {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::param(format!("noise coefficient c must be >= 0, got {c}")));
                }
            }
        }
        Ok(())
    }

    /// Noise std for weight `w` in a column whose magnitude maximum is `w_max`.
    pub fn sigma(&self, w: f64, w_max: f64) -> Result<Sigma> {
        match self.model {
            NoiseModel::Full { .. } => sigma_full(w, w_max, self),
            NoiseModel::Simplified { c } => Ok(Sigma {
                value: self.scale * sigma_simplified(w_max, c)?,
                clamped: false,
            }),
        }
    }
}

/// A noise standard deviation. `clamped` marks a negative polynomial value
/// that was raised to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma {
    pub value: f64,
    pub clamped: bool,
}

/// Full piecewise-cubic sigma:
/// `scale * (c0 w_max + c1 |w| + c2 |w|^2 / w_max + c3 |w|^3 / w_max^2)`,
/// using the high branch when `|w| > threshold * w_max`.
pub fn sigma_full(w: f64, w_max: f64, spec: &NoiseSpec) -> Result<Sigma> {
    let NoiseModel::Full { high, low, threshold } = spec.model else {
        return Err(Error::param("sigma_full needs a full-model noise spec"));
    };
    if !(w_max > 0.0 && w_max.is_finite()) {
        return Err(Error::param(format!("w_max must be positive, got {w_max}")));
    }
    let a = w.abs();
    if a > w_max {
        return Err(Error::param(format!("|w| = {a} exceeds w_max = {w_max}")));
    }
    let c = if a > threshold * w_max { high } else { low };
    let poly = c.c0 * w_max + c.c1 * a + c.c2 * a * a / w_max + c.c3 * a * a * a / (w_max * w_max);
    let raw = spec.scale * poly;
    if raw < 0.0 {
        warn!("programming-noise polynomial negative ({raw}) at w={w}, w_max={w_max}; using 0");
        return Ok(Sigma {
            value: 0.0,
            clamped: true,
        });
    }
    Ok(Sigma {
        value: raw,
        clamped: false,
    })
}

/// Simplified sigma `c * w_max`.
pub fn sigma_simplified(w_max: f64, c: f64) -> Result<f64> {
    if !(w_max > 0.0 && w_max.is_finite()) {
        return Err(Error::param(format!("w_max must be positive, got {w_max}")));
    }
    if !(c >= 0.0) {
        return Err(Error::param(format!("c must be >= 0, got {c}")));
    }
    Ok(c * w_max)
}

/// Adds programming noise to `w`, using `column_max[j]` as the `w_max` of
/// column `j`. Each `column_max[j]` must be at least `max|w[:, j]|`; an
/// all-zero column with `column_max[j] == 0` is left untouched.
///
/// Draws are taken row by row from `rng`, so the result is a pure function of
/// the inputs and the stream.
pub fn program_weights(
    w: &Matrix,
    column_max: &[f64],
    spec: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<Matrix> {
    spec.validate()?;
    if column_max.len() != w.cols() {
        return Err(Error::param(format!(
            "{} column maxima for {} columns",
            column_max.len(),
            w.cols()
        )));
    }
    for (j, &cm) in column_max.iter().enumerate() {
        let actual = w.column_max_abs(j, 0, w.rows());
        if !(cm >= actual) || !cm.is_finite() {
            return Err(Error::param(format!(
                "column {j}: w_max {cm} is below the column magnitude {actual}"
            )));
        }
    }
    if spec.scale == 0.0 || matches!(spec.model, NoiseModel::Simplified { c } if c == 0.0) {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    for i in 0..w.rows() {
        for (j, &w_max) in column_max.iter().enumerate() {
            if w_max == 0.0 {
                continue;
            }
            let sigma = spec.sigma(w.get(i, j), w_max)?.value;
            let z = rng.standard_normal();
            out.set(i, j, w.get(i, j) + sigma * z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_std;

    #[test]
    fn low_branch_at_zero() {
        let s = sigma_full(0.0, 1.0, &NoiseSpec::pcm()).unwrap();
        assert!((s.value - 0.014).abs() < 1e-15);
    }

    #[test]
    fn high_branch_at_max() {
        let s = sigma_full(1.0, 1.0, &NoiseSpec::pcm()).unwrap();
        assert!((s.value - 0.117).abs() < 1e-12);
        let neg = sigma_full(-1.0, 1.0, &NoiseSpec::pcm()).unwrap();
        assert_eq!(s, neg);
    }

    #[test]
    fn branch_uses_magnitude() {
        let spec = NoiseSpec::pcm();
        // 0.5 > 0.292: high branch for both signs.
        let expected = 0.012 + 0.245 * 0.5 - 0.54 * 0.25 + 0.40 * 0.125;
        assert!((sigma_full(-0.5, 1.0, &spec).unwrap().value - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_silences() {
        let spec = NoiseSpec::pcm().with_scale(0.0);
        for w in [-1.0, -0.3, 0.0, 0.2, 0.9] {
            assert_eq!(sigma_full(w, 1.0, &spec).unwrap().value, 0.0);
        }
    }

    #[test]
    fn sigma_full_errors() {
        let spec = NoiseSpec::pcm();
        assert!(matches!(sigma_full(0.0, 0.0, &spec), Err(Error::Parameter(_))));
        assert!(matches!(sigma_full(2.0, 1.0, &spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn negative_polynomial_is_clamped() {
        let mut spec = NoiseSpec::pcm();
        spec.model = NoiseModel::Full {
            high: PolyCoeffs { c0: -1.0, c1: 0.0, c2: 0.0, c3: 0.0 },
            low: PCM_LOW,
            threshold: PCM_THRESHOLD,
        };
        let s = sigma_full(0.9, 1.0, &spec).unwrap();
        assert_eq!(s, Sigma { value: 0.0, clamped: true });
    }

    #[test]
    fn simplified_examples() {
        assert_eq!(sigma_simplified(1.0, 0.0).unwrap(), 0.0);
        assert!((sigma_simplified(2.0, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(sigma_simplified(1.0, 0.003).unwrap(), 0.003);
        assert!(sigma_simplified(0.0, 0.1).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let w = Matrix::from_rows(&[vec![0.5, -0.1], vec![0.2, 0.3]]).unwrap();
        let mut rng = RngStream::new(1, 1);
        let out = program_weights(&w, &[0.5, 0.3], &NoiseSpec::pcm().with_scale(0.0), &mut rng).unwrap();
        assert_eq!(out, w);
        let out = program_weights(&w, &[0.5, 0.3], &NoiseSpec::simplified(0.0), &mut rng).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn inconsistent_column_max_rejected() {
        let w = Matrix::from_rows(&[vec![0.5, -0.4]]).unwrap();
        let mut rng = RngStream::new(1, 1);
        assert!(program_weights(&w, &[0.5, 0.3], &NoiseSpec::pcm(), &mut rng).is_err());
        assert!(program_weights(&w, &[0.5], &NoiseSpec::pcm(), &mut rng).is_err());
    }

    fn monte_carlo(w: f64, w_max: f64, spec: &NoiseSpec, n: usize, seed: u64) -> (f64, f64) {
        let weights = Matrix::filled(n, 1, w);
        let mut rng = RngStream::new(seed, 11);
        let out = program_weights(&weights, &[w_max], spec, &mut rng).unwrap();
        mean_std(out.as_slice())
    }

    #[test]
    fn full_model_monte_carlo_std() {
        let spec = NoiseSpec::pcm();
        let expected = sigma_full(0.5, 1.0, &spec).unwrap().value;
        let (mean, std) = monte_carlo(0.5, 1.0, &spec, 1_000_000, 1);
        assert!((std / expected - 1.0).abs() < 0.01, "std {std} vs {expected}");
        assert!((mean - 0.5).abs() < 3.0 * expected / 1000.0, "bias {}", mean - 0.5);
    }

    #[test]
    fn simplified_monte_carlo_std() {
        let (_, std) = monte_carlo(0.0, 1.0, &NoiseSpec::simplified(0.1), 1_000_000, 2);
        assert!((std / 0.1 - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn doubling_scale_doubles_std() {
        let (_, s1) = monte_carlo(0.2, 1.0, &NoiseSpec::pcm(), 200_000, 3);
        let (_, s2) = monte_carlo(0.2, 1.0, &NoiseSpec::pcm().with_scale(2.0), 200_000, 4);
        assert!((s2 / s1 - 2.0).abs() < 0.02, "ratio {}", s2 / s1);
    }

    #[test]
    fn deterministic_given_stream() {
        let w = Matrix::filled(4, 3, 0.25);
        let a = program_weights(&w, &[1.0; 3], &NoiseSpec::pcm(), &mut RngStream::new(8, 2)).unwrap();
        let b = program_weights(&w, &[1.0; 3], &NoiseSpec::pcm(), &mut RngStream::new(8, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = NoiseSpec::pcm();
        let text = toml::to_string(&spec).unwrap();
        let back: NoiseSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let simple: NoiseSpec = toml::from_str("mode = \"simplified\"\nc = 0.05").unwrap();
        assert_eq!(simple, NoiseSpec::simplified(0.05));
    }
}
