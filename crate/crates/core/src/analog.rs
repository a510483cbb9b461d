//! Simulated analog matrix-vector products on tiled crossbars.
//!
//! A weight matrix is cut into `tile_size x tile_size` blocks. Each tile
//! quantizes its slice of the input with its own DAC range, multiplies by its
//! programmed (noisy) weights and quantizes every column output with its own
//! ADC range. Tile outputs are then summed digitally, in ascending tile-row
//! order, so accumulation itself adds no error.
//!
//! Row vectors multiply from the left: `y = x^T W` with `x.len() == W.rows()`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::prognoise::{program_weights, NoiseSpec};
use crate::quantizer::{adc_quantize, compute_beta_out, dac_quantize, CalibState, QuantizerConfig};

/// NVM tile edge length used unless configured otherwise.
pub const DEFAULT_TILE_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileBlock {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
    /// `max|w|` of each column segment inside this tile.
    pub column_max: Vec<f64>,
}

impl TileBlock {
    pub fn shape(&self) -> (usize, usize) {
        (self.row_end - self.row_start, self.col_end - self.col_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePlan {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_tiles: usize,
    pub col_tiles: usize,
    /// Row-major over the tile grid.
    pub tiles: Vec<TileBlock>,
}

impl TilePlan {
    /// Checks the partition and the stored column maxima against `w`.
    pub fn verify(&self, w: &Matrix) -> Result<()> {
        if w.shape() != (self.rows, self.cols) {
            return Err(Error::shape("tile plan built for a different shape"));
        }
        let mut covered = vec![0u8; self.rows * self.cols];
        for t in &self.tiles {
            let (r, c) = t.shape();
            if r == 0 || c == 0 || r > self.tile_size || c > self.tile_size {
                return Err(Error::shape(format!("tile of shape {r}x{c} is out of bounds")));
            }
            for i in t.row_start..t.row_end {
                for j in t.col_start..t.col_end {
                    covered[i * self.cols + j] += 1;
                }
            }
            for (k, j) in (t.col_start..t.col_end).enumerate() {
                if t.column_max[k] != w.column_max_abs(j, t.row_start, t.row_end) {
                    return Err(Error::State(format!("stale column maximum for column {j}")));
                }
            }
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(Error::shape("tiles do not partition the matrix"));
        }
        Ok(())
    }
}

/// Blocks `w` into a `ceil(rows/tile) x ceil(cols/tile)` grid of tiles.
pub fn build_tile_plan(w: &Matrix, tile_size: usize) -> Result<TilePlan> {
    if tile_size == 0 {
        return Err(Error::param("tile_size must be at least 1"));
    }
    if w.is_empty() {
        return Err(Error::shape("cannot tile an empty matrix"));
    }
    let (rows, cols) = w.shape();
    let row_tiles = rows.div_ceil(tile_size);
    let col_tiles = cols.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(row_tiles * col_tiles);
    for tr in 0..row_tiles {
        let (row_start, row_end) = (tr * tile_size, ((tr + 1) * tile_size).min(rows));
        for tc in 0..col_tiles {
            let (col_start, col_end) = (tc * tile_size, ((tc + 1) * tile_size).min(cols));
            let column_max = (col_start..col_end)
                .map(|j| w.column_max_abs(j, row_start, row_end))
                .collect();
            tiles.push(TileBlock {
                row_start,
                row_end,
                col_start,
                col_end,
                column_max,
            });
        }
    }
    Ok(TilePlan {
        tile_size,
        rows,
        cols,
        row_tiles,
        col_tiles,
        tiles,
    })
}

/// A weight matrix deployed on analog tiles.
#[derive(Debug, Clone)]
pub struct AnalogLayer {
    weights: Matrix,
    plan: TilePlan,
    programmed: Matrix,
    quantizer: QuantizerConfig,
    calibration: Vec<CalibState>,
}

impl AnalogLayer {
    /// Noise-free, uncalibrated layer.
    pub fn new(weights: Matrix, tile_size: usize, quantizer: QuantizerConfig) -> Result<Self> {
        quantizer.validate()?;
        let plan = build_tile_plan(&weights, tile_size)?;
        let calibration = vec![CalibState::new(); plan.tiles.len()];
        Ok(Self {
            programmed: weights.clone(),
            weights,
            plan,
            quantizer,
            calibration,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn programmed(&self) -> &Matrix {
        &self.programmed
    }

    pub fn plan(&self) -> &TilePlan {
        &self.plan
    }

    pub fn quantizer(&self) -> &QuantizerConfig {
        &self.quantizer
    }

    pub fn calibration(&self) -> &[CalibState] {
        &self.calibration
    }

    /// Programs the target weights onto the tiles. Tile `t` draws from
    /// `rng.derive(t)`, so tiles are independent of each other and of the
    /// order in which they are programmed. Replaces any earlier programming.
    pub fn program(&mut self, spec: &NoiseSpec, rng: &RngStream) -> Result<()> {
        let mut programmed = self.weights.clone();
        for (t, tile) in self.plan.tiles.iter().enumerate() {
            let block = self
                .weights
                .block(tile.row_start, tile.row_end, tile.col_start, tile.col_end);
            let mut stream = rng.derive(t as u64);
            let noisy = program_weights(&block, &tile.column_max, spec, &mut stream)?;
            programmed.set_block(tile.row_start, tile.col_start, &noisy);
        }
        self.programmed = programmed;
        Ok(())
    }

    /// Folds a batch of inputs (one input vector per row) into every tile's
    /// input statistics.
    pub fn calibrate(&mut self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.plan.rows {
            return Err(Error::shape(format!(
                "calibration inputs have {} features, layer expects {}",
                inputs.cols(),
                self.plan.rows
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::param("calibration batch is empty"));
        }
        for (t, tile) in self.plan.tiles.iter().enumerate() {
            let segment: Vec<f64> = (0..inputs.rows())
                .flat_map(|b| inputs.row(b)[tile.row_start..tile.row_end].iter().copied())
                .collect();
            self.calibration[t] = self.calibration[t].update_values(&segment, self.quantizer.ema_decay)?;
        }
        Ok(())
    }

    /// Pins every tile's input statistics to `std`, so `beta_in = kappa * std`.
    pub fn set_input_std(&mut self, std: f64) {
        self.calibration.fill(CalibState::fixed(std));
    }

    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>> {
        analog_mvm(self, x)
    }

    /// Applies [`analog_mvm`] to each row of `xs`.
    pub fn mvm_rows(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(xs.rows(), self.plan.cols);
        for b in 0..xs.rows() {
            let y = self.mvm(xs.row(b))?;
            out.data_mut()[b * self.plan.cols..(b + 1) * self.plan.cols].copy_from_slice(&y);
        }
        Ok(out)
    }
}

/// `x^T W` through DAC, programmed tiles and per-tile ADC.
pub fn analog_mvm(layer: &AnalogLayer, x: &[f64]) -> Result<Vec<f64>> {
    let plan = &layer.plan;
    if x.len() != plan.rows {
        return Err(Error::shape(format!(
            "input of length {} for a layer with {} rows",
            x.len(),
            plan.rows
        )));
    }
    let q = &layer.quantizer;
    let mut out = vec![0.0; plan.cols];
    for (tile, calib) in plan.tiles.iter().zip(&layer.calibration) {
        let beta_in = calib.beta_in(q.kappa)?;
        let xq = dac_quantize(&x[tile.row_start..tile.row_end], beta_in, q.dac_bits)?;
        let mut currents = vec![0.0; tile.col_end - tile.col_start];
        for (i, &xi) in xq.iter().enumerate() {
            let row = &layer.programmed.row(tile.row_start + i)[tile.col_start..tile.col_end];
            for (c, &w) in currents.iter_mut().zip(row) {
                *c += xi * w;
            }
        }
        for (k, current) in currents.iter().enumerate() {
            let beta_out = compute_beta_out(&[tile.column_max[k]], beta_in, q.lambda)?.value;
            out[tile.col_start + k] += adc_quantize(&[*current], beta_out, q.adc_bits)?[0];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("analog_mvm"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, relative_l2_error};

    #[test]
    fn small_matrix_single_tile() {
        let w = Matrix::filled(4, 4, 1.0);
        let plan = build_tile_plan(&w, DEFAULT_TILE_SIZE).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert_eq!(plan.tiles[0].shape(), (4, 4));
        plan.verify(&w).unwrap();
    }

    #[test]
    fn blocking_arithmetic() {
        let w = Matrix::zeros(1024, 700);
        let plan = build_tile_plan(&w, 512).unwrap();
        assert_eq!((plan.row_tiles, plan.col_tiles), (2, 2));
        let shapes: Vec<_> = plan.tiles.iter().map(TileBlock::shape).collect();
        assert_eq!(shapes, vec![(512, 512), (512, 188), (512, 512), (512, 188)]);
        plan.verify(&w).unwrap();
    }

    #[test]
    fn column_max_per_tile() {
        let w = Matrix::from_rows(&[vec![3.0], vec![-7.0]]).unwrap();
        assert_eq!(build_tile_plan(&w, 512).unwrap().tiles[0].column_max, vec![7.0]);
        let split = build_tile_plan(&w, 1).unwrap();
        assert_eq!(split.tiles[0].column_max, vec![3.0]);
        assert_eq!(split.tiles[1].column_max, vec![7.0]);
    }

    #[test]
    fn tile_plan_errors() {
        assert!(matches!(build_tile_plan(&Matrix::zeros(0, 0), 4), Err(Error::Shape(_))));
        assert!(matches!(build_tile_plan(&Matrix::zeros(2, 2), 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn hand_traced_two_by_one_tile() {
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let q = QuantizerConfig {
            dac_bits: 8,
            adc_bits: 8,
            kappa: 1.0,
            lambda: 1.0,
            ema_decay: 0.9,
        };
        let mut layer = AnalogLayer::new(w, 512, q).unwrap();
        layer.set_input_std(1.0);
        // DAC: round(0.5 * 127) = 64 -> 64/127 per input, column current 128/127.
        // ADC with beta_out = 1: round(128/127 * 127) / 127 = 128/127, clamped to 1.
        let y = layer.mvm(&[0.5, 0.5]).unwrap();
        assert_eq!(y, vec![1.0]);
        // Inside the range: x = [0.25, 0.25] -> 32/127 each, 64/127 total.
        let y = layer.mvm(&[0.25, 0.25]).unwrap();
        assert!((y[0] - 64.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn uncalibrated_tile_is_a_state_error() {
        let layer = AnalogLayer::new(Matrix::identity(2), 512, QuantizerConfig::default()).unwrap();
        assert!(matches!(layer.mvm(&[1.0, 0.0]), Err(Error::State(_))));
        assert!(matches!(layer.mvm(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = RngStream::new(1, 0);
        let w = gaussian(&mut rng, 0.0, 1.0, 6, 5).unwrap();
        let mut layer = AnalogLayer::new(w, 4, QuantizerConfig::default()).unwrap();
        layer.program(&NoiseSpec::pcm(), &RngStream::new(2, 0)).unwrap();
        layer.set_input_std(1.0);
        assert_eq!(layer.mvm(&[0.0; 6]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn tiny_lambda_saturates() {
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let q = QuantizerConfig {
            lambda: 0.01,
            kappa: 1.0,
            ..QuantizerConfig::default()
        };
        let mut layer = AnalogLayer::new(w, 512, q).unwrap();
        layer.set_input_std(1.0);
        let y = layer.mvm(&[0.8, 0.9]).unwrap();
        assert_eq!(y, vec![0.01, -0.01]);
    }

    #[test]
    fn calibration_sets_per_tile_ranges() {
        let w = Matrix::identity(4);
        let mut layer = AnalogLayer::new(w, 2, QuantizerConfig::default()).unwrap();
        let inputs = Matrix::from_rows(&[vec![1.0, -1.0, 3.0, -3.0]]).unwrap();
        layer.calibrate(&inputs).unwrap();
        let stds: Vec<_> = layer.calibration().iter().map(|c| c.ema_std().unwrap()).collect();
        assert_eq!(stds, vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn programming_is_reproducible_and_tilewise() {
        let mut rng = RngStream::new(4, 0);
        let w = gaussian(&mut rng, 0.0, 1.0, 8, 8).unwrap();
        let mut a = AnalogLayer::new(w.clone(), 4, QuantizerConfig::default()).unwrap();
        let mut b = a.clone();
        a.program(&NoiseSpec::pcm(), &RngStream::new(9, 1)).unwrap();
        b.program(&NoiseSpec::pcm(), &RngStream::new(9, 1)).unwrap();
        assert_eq!(a.programmed(), b.programmed());
        assert_ne!(a.programmed(), &w);
        a.plan().verify(&w).unwrap();
    }

    #[test]
    fn high_resolution_matches_digital() {
        let mut rng = RngStream::new(5, 0);
        let w = gaussian(&mut rng, 0.0, 1.0, 10, 7).unwrap();
        let x: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
        let exact = w.vecmat(&x).unwrap();
        let max_x = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let q = QuantizerConfig {
            dac_bits: 24,
            adc_bits: 24,
            kappa: 1.0,
            lambda: 10.0,
            ema_decay: 0.9,
        };
        let mut layer = AnalogLayer::new(w, 4, q).unwrap();
        layer.set_input_std(max_x);
        let y = layer.mvm(&x).unwrap();
        assert!(relative_l2_error(&y, &exact) < 1e-4);
    }
}
