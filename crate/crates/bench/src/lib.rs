//! Fixtures shared by the kernel benchmarks.

use hetmoe::numerics::{gaussian, RngStream};
use hetmoe::Matrix;

/// Standard normal `rows x cols` matrix from a fixed stream.
pub fn random_matrix(rows: usize, cols: usize, stream: u64) -> Matrix {
    gaussian(&mut RngStream::new(0xBE_4C, stream), 0.0, 1.0, rows, cols).expect("unit std is valid")
}
