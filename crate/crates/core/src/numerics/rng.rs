use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

/// Seeded random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the 64-bit seed expanded into the key and the
/// stream id mapped onto ChaCha's stream counter, so distinct stream ids give
/// independent sequences and the draws are identical on every platform.
///
/// Normal variates use the ziggurat sampler of `rand_distr::StandardNormal`.
/// A stream has a single owner; parallel work derives its own streams with
/// [`RngStream::derive`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream for a path of labels under `seed`, e.g. `(layer, expert, tile)`.
    pub fn for_path(seed: u64, path: &[u64]) -> Self {
        let id = path
            .iter()
            .fold(0x243F_6A88_85A3_08D3_u64, |h, &p| splitmix64(h ^ splitmix64(p)));
        Self::new(seed, id)
    }

    /// Child stream with the same seed and a stream id mixed from this
    /// stream's id and `label`. Does not consume draws from `self`.
    pub fn derive(&self, label: u64) -> Self {
        Self::for_path(self.seed, &[self.stream_id, label])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn sample<D: Distribution<f64>>(&mut self, dist: &D) -> f64 {
        dist.sample(&mut self.rng)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `rows x cols` matrix of i.i.d. `N(mean, std^2)` draws.
pub fn gaussian(rng: &mut RngStream, mean: f64, std: f64, rows: usize, cols: usize) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::param(format!(
            "gaussian needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    if std == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    let data = (0..rows * cols)
        .map(|_| mean + std * rng.standard_normal())
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_std;

    #[test]
    fn zero_std_is_constant() {
        let m = gaussian(&mut RngStream::new(0, 0), 0.0, 0.0, 3, 4).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_std_rejected() {
        assert!(matches!(
            gaussian(&mut RngStream::new(0, 0), 0.0, -1.0, 1, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn million_draws_have_unit_std() {
        let m = gaussian(&mut RngStream::new(42, 7), 0.0, 1.0, 1000, 1000).unwrap();
        let (mean, std) = mean_std(m.as_slice());
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((0.995..=1.005).contains(&std), "std {std}");
    }

    #[test]
    fn same_seed_and_stream_reproduce() {
        let a = gaussian(&mut RngStream::new(9, 3), 1.0, 2.0, 4, 4).unwrap();
        let b = gaussian(&mut RngStream::new(9, 3), 1.0, 2.0, 4, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_differ() {
        let a = gaussian(&mut RngStream::new(9, 3), 0.0, 1.0, 2, 2).unwrap();
        let b = gaussian(&mut RngStream::new(9, 4), 0.0, 1.0, 2, 2).unwrap();
        assert_ne!(a, b);
        let c = gaussian(&mut RngStream::for_path(9, &[1, 2]), 0.0, 1.0, 2, 2).unwrap();
        let d = gaussian(&mut RngStream::for_path(9, &[2, 1]), 0.0, 1.0, 2, 2).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn derive_does_not_consume() {
        let mut a = RngStream::new(5, 0);
        let _child = a.derive(1);
        let mut b = RngStream::new(5, 0);
        assert_eq!(a.uniform(), b.uniform());
    }
}
