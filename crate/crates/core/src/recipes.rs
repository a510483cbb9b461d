//! Experiment recipes: one function per [`Experiment`], each returning the
//! files it produces and a small JSON summary.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::analog::AnalogLayer;
use crate::config::{
    CalibrateConfig, Experiment, ExperimentConfig, NoiseValidateConfig, PerfConfig, QuantizerValidateConfig,
    Theorem1Config,
};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, mean_std, Matrix, RngStream};
use crate::perfmodel::{perf_table, write_perf_csv};
use crate::prognoise::{program_weights, sigma_full, NoiseModel};
use crate::quantizer::{adc_quantize, dac_quantize, grid_calibrate, levels, QuantizerConfig};
use crate::report::{index_list, json_artifact, num, opt_bool, opt_num, Artifact, Table};
use crate::synthetic::{Relevant, TaskSpec};
use crate::trainer::{
    classify_specialization, compare_partitions, lemma1_report, theorem1_report, train_runs, CompareConfig,
    TrainConfig, TrainedRun,
};

/// Files written by a recipe and its headline numbers.
#[derive(Debug, Clone)]
pub struct RecipeOutput {
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
}

/// Validates `cfg` and runs its experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let seeds = cfg.seed_list();
    let missing = |name: &str| Error::Config(format!("section [{name}] missing after resolution"));
    match cfg.experiment {
        Experiment::NoiseValidate => noise_validate(cfg.noise_validate.as_ref().ok_or_else(|| missing("noise_validate"))?, seeds[0]),
        Experiment::QuantizerValidate => quantizer_validate(
            cfg.quantizer_validate.as_ref().ok_or_else(|| missing("quantizer_validate"))?,
            seeds[0],
        ),
        Experiment::Lemma1 => lemma1(
            cfg.task.as_ref().ok_or_else(|| missing("task"))?,
            cfg.train.as_ref().ok_or_else(|| missing("train"))?,
            &seeds,
        ),
        Experiment::Theorem1 => theorem1(
            cfg.task.as_ref().ok_or_else(|| missing("task"))?,
            cfg.train.as_ref().ok_or_else(|| missing("train"))?,
            cfg.theorem1.as_ref().ok_or_else(|| missing("theorem1"))?,
            &seeds,
        ),
        Experiment::PartitionCompare => partition_compare(
            cfg.task.as_ref().ok_or_else(|| missing("task"))?,
            cfg.train.as_ref().ok_or_else(|| missing("train"))?,
            cfg.compare.as_ref().ok_or_else(|| missing("compare"))?,
            &seeds,
        ),
        Experiment::PerfTable => perf(cfg.perf.as_ref().ok_or_else(|| missing("perf"))?),
        Experiment::Calibrate => calibrate(cfg.calibrate.as_ref().ok_or_else(|| missing("calibrate"))?, &seeds),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseCheck {
    pub w: f64,
    pub w_max: f64,
    pub branch: &'static str,
    pub sigma_model: f64,
    pub sigma_sampled: f64,
    pub relative_error: f64,
}

/// Sampled programming-noise standard deviation at each `(w, w_max)` pair.
pub fn noise_checks(cfg: &NoiseValidateConfig, seed: u64) -> Result<Vec<NoiseCheck>> {
    let NoiseModel::Full { threshold, .. } = cfg.noise.model else {
        return Err(Error::Config("noise_validate needs the full noise model".into()));
    };
    cfg.pairs
        .par_iter()
        .enumerate()
        .map(|(i, &[w, w_max])| {
            let sigma_model = sigma_full(w, w_max, &cfg.noise)?.value;
            let target = Matrix::filled(cfg.draws, 1, w);
            let mut rng = RngStream::for_path(seed, &[i as u64]);
            let noisy = program_weights(&target, &[w_max], &cfg.noise, &mut rng)?;
            let deltas: Vec<f64> = noisy.as_slice().iter().map(|v| v - w).collect();
            let sigma_sampled = mean_std(&deltas).1;
            let relative_error = if sigma_model > 0.0 {
                (sigma_sampled - sigma_model).abs() / sigma_model
            } else {
                sigma_sampled
            };
            Ok(NoiseCheck {
                w,
                w_max,
                branch: if w.abs() > threshold * w_max { "high" } else { "low" },
                sigma_model,
                sigma_sampled,
                relative_error,
            })
        })
        .collect()
}

fn noise_validate(cfg: &NoiseValidateConfig, seed: u64) -> Result<RecipeOutput> {
    let checks = noise_checks(cfg, seed)?;
    let mut table = Table::new(&[
        "w",
        "w_max",
        "branch",
        "sigma_model",
        "sigma_sampled",
        "relative_error",
        "within_tolerance",
    ]);
    for c in &checks {
        table.push(vec![
            num(c.w),
            num(c.w_max),
            c.branch.into(),
            num(c.sigma_model),
            num(c.sigma_sampled),
            num(c.relative_error),
            (c.relative_error <= cfg.tolerance).to_string(),
        ])?;
    }
    let max_err = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let summary = json!({
        "draws": cfg.draws,
        "tolerance": cfg.tolerance,
        "max_relative_error": max_err,
        "all_within_tolerance": max_err <= cfg.tolerance,
    });
    Ok(RecipeOutput {
        artifacts: vec![
            table.artifact("noise_validate.csv")?,
            json_artifact("noise_validate.json", &json!({ "summary": summary, "checks": checks }))?,
        ],
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizerCheck {
    pub converter: &'static str,
    pub bits: u32,
    pub samples: usize,
    pub lsb: f64,
    /// Largest `|q(x) - x|` over in-range inputs.
    pub max_in_range_error: f64,
    pub error_bound: bool,
    pub idempotent: bool,
    pub monotone: bool,
    pub saturation: bool,
    /// Agreement with an exhaustive nearest-level search, when requested.
    pub brute_force: Option<bool>,
}

/// Nearest point of the `bits` grid on `[-beta, beta]`, ties away from zero,
/// found by scanning every level.
pub fn nearest_level(x: f64, beta: f64, bits: u32) -> Result<f64> {
    let n = levels(bits)? as i64;
    let mut best = f64::NAN;
    let mut best_dist = f64::INFINITY;
    for i in -n..=n {
        let g = i as f64 * beta / n as f64;
        let dist = (x - g).abs();
        if dist < best_dist || (dist == best_dist && g.abs() > best.abs()) {
            best = g;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// DAC and ADC property checks on uniform inputs.
pub fn quantizer_checks(cfg: &QuantizerValidateConfig, seed: u64) -> Result<Vec<QuantizerCheck>> {
    let beta = cfg.beta;
    let mut rng = RngStream::new(seed, 0);
    let xs: Vec<f64> = (0..cfg.samples)
        .map(|_| (2.0 * rng.uniform() - 1.0) * cfg.spread * beta)
        .collect();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let converters: [(&'static str, fn(&[f64], f64, u32) -> Result<Vec<f64>>); 2] =
        [("dac", dac_quantize), ("adc", adc_quantize)];
    let mut out = Vec::new();
    for &bits in &cfg.bits {
        let lsb = beta / levels(bits)?;
        for (name, quantize) in converters {
            let q = quantize(&xs, beta, bits)?;
            let qq = quantize(&q, beta, bits)?;
            let qs = quantize(&sorted, beta, bits)?;
            let max_in_range_error = xs
                .iter()
                .zip(&q)
                .filter(|(x, _)| x.abs() <= beta)
                .map(|(x, v)| (x - v).abs())
                .fold(0.0, f64::max);
            let saturation = xs
                .iter()
                .zip(&q)
                .filter(|(x, _)| x.abs() >= beta)
                .all(|(x, v)| *v == beta.copysign(*x));
            let brute_force = if cfg.brute_force_bits.contains(&bits) {
                let mut ok = true;
                for (x, v) in xs.iter().zip(&q) {
                    ok &= nearest_level(*x, beta, bits)? == *v;
                }
                Some(ok)
            } else {
                None
            };
            out.push(QuantizerCheck {
                converter: name,
                bits,
                samples: xs.len(),
                lsb,
                max_in_range_error,
                error_bound: max_in_range_error <= lsb / 2.0 * (1.0 + 1e-12),
                idempotent: q == qq,
                monotone: qs.windows(2).all(|w| w[0] <= w[1]),
                saturation,
                brute_force,
            });
        }
    }
    Ok(out)
}

fn quantizer_validate(cfg: &QuantizerValidateConfig, seed: u64) -> Result<RecipeOutput> {
    let checks = quantizer_checks(cfg, seed)?;
    let mut table = Table::new(&[
        "converter",
        "bits",
        "samples",
        "lsb",
        "max_in_range_error",
        "error_bound",
        "idempotent",
        "monotone",
        "saturation",
        "brute_force",
    ]);
    for c in &checks {
        table.push(vec![
            c.converter.into(),
            c.bits.to_string(),
            c.samples.to_string(),
            num(c.lsb),
            num(c.max_in_range_error),
            c.error_bound.to_string(),
            c.idempotent.to_string(),
            c.monotone.to_string(),
            c.saturation.to_string(),
            opt_bool(c.brute_force),
        ])?;
    }
    let all_ok = checks
        .iter()
        .all(|c| c.error_bound && c.idempotent && c.monotone && c.saturation && c.brute_force != Some(false));
    let summary = json!({ "all_properties_hold": all_ok });
    Ok(RecipeOutput {
        artifacts: vec![
            table.artifact("quantizer_validate.csv")?,
            json_artifact("quantizer_validate.json", &json!({ "summary": summary, "checks": checks }))?,
        ],
        summary,
    })
}

fn history_table(runs: &[TrainedRun]) -> Result<Table> {
    let mut t = Table::new(&["seed", "step", "batch_loss", "eval_loss"]);
    for run in runs {
        for r in &run.history.records {
            t.push(vec![
                run.seed.to_string(),
                r.step.to_string(),
                num(r.batch_loss),
                num(r.eval_loss),
            ])?;
        }
    }
    Ok(t)
}

fn sorted_runs(task: &TaskSpec, train: &TrainConfig, seeds: &[u64]) -> Result<Vec<TrainedRun>> {
    let mut runs = train_runs(task, train, seeds)?;
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

fn lemma1(task: &TaskSpec, train: &TrainConfig, seeds: &[u64]) -> Result<RecipeOutput> {
    let runs = sorted_runs(task, train, seeds)?;
    let report = lemma1_report(&runs)?;
    let mut per_seed = Table::new(&[
        "seed",
        "initial_loss",
        "final_loss",
        "loss_halved",
        "rare_experts",
        "frequent_experts",
        "dual_experts",
        "max_rare_score",
        "min_frequent_score",
        "min_score_ratio",
        "ordering_holds",
    ]);
    for s in &report.seeds {
        let sp = &s.specialization;
        let max_rare = sp.rare.iter().map(|&e| s.max_nn_scores[e]).reduce(f64::max);
        let min_freq = sp.frequent.iter().map(|&e| s.max_nn_scores[e]).reduce(f64::min);
        per_seed.push(vec![
            s.seed.to_string(),
            num(s.initial_loss),
            num(s.final_loss),
            (s.final_loss <= 0.5 * s.initial_loss).to_string(),
            index_list(&sp.rare),
            index_list(&sp.frequent),
            index_list(&sp.dual),
            opt_num(max_rare),
            opt_num(min_freq),
            opt_num(s.min_score_ratio),
            opt_bool(s.ordering_holds),
        ])?;
    }
    let mut experts = Table::new(&[
        "seed",
        "expert",
        "sign",
        "max_nn_score",
        "p_o1",
        "p_neg_o1",
        "p_o2",
        "p_neg_o2",
        "role",
    ]);
    for run in &runs {
        let spec = classify_specialization(&run.probe, run.model.signs(), run.config.specialization_threshold);
        let scores = run.model.max_nn_scores();
        for (e, score) in scores.iter().enumerate() {
            let role = if spec.rare.contains(&e) {
                "rare"
            } else if spec.frequent.contains(&e) {
                "frequent"
            } else if spec.dual.contains(&e) {
                "dual"
            } else {
                "none"
            };
            let mut row = vec![run.seed.to_string(), e.to_string(), num(run.model.signs()[e]), num(*score)];
            row.extend(Relevant::ALL.iter().map(|&v| num(run.probe.p_of(e, v))));
            row.push(role.into());
            experts.push(row)?;
        }
    }
    let summary = json!({
        "seeds": report.seeds.len(),
        "conclusive": report.conclusive,
        "holds": report.holds,
        "holds_fraction": report.holds_fraction,
        "score_ratio": report.score_ratio,
        "loss_halved_fraction": report.loss_halved_fraction,
    });
    Ok(RecipeOutput {
        artifacts: vec![
            per_seed.artifact("lemma1_seeds.csv")?,
            experts.artifact("lemma1_experts.csv")?,
            history_table(&runs)?.artifact("lemma1_history.csv")?,
            json_artifact("lemma1.json", &report)?,
        ],
        summary,
    })
}

fn theorem1(task: &TaskSpec, train: &TrainConfig, cfg: &Theorem1Config, seeds: &[u64]) -> Result<RecipeOutput> {
    let runs = sorted_runs(task, train, seeds)?;
    let report = theorem1_report(&runs, &cfg.sweep, &cfg.gamma_choice())?;
    let mut per_seed = Table::new(&[
        "seed",
        "gamma_measured",
        "gamma_used",
        "digital_experts",
        "c_star_analog",
        "c_star_hetero",
        "training_failure",
    ]);
    let mut seed_curves = Table::new(&["seed", "c", "accuracy_analog", "accuracy_hetero"]);
    for s in &report.seeds {
        per_seed.push(vec![
            s.seed.to_string(),
            num(s.gamma_measured),
            num(s.gamma_used),
            index_list(&s.digital),
            opt_num(s.c_star_analog),
            opt_num(s.c_star_hetero),
            s.training_failure.to_string(),
        ])?;
        for (i, c) in report.grid.iter().enumerate() {
            seed_curves.push(vec![
                s.seed.to_string(),
                num(*c),
                num(s.accuracy_analog[i]),
                num(s.accuracy_hetero[i]),
            ])?;
        }
    }
    let mut curves = Table::new(&["c", "mean_accuracy_analog", "se_analog", "mean_accuracy_hetero", "se_hetero"]);
    for (i, c) in report.grid.iter().enumerate() {
        curves.push(vec![
            num(*c),
            num(report.mean_analog[i]),
            num(report.se_analog[i]),
            num(report.mean_hetero[i]),
            num(report.se_hetero[i]),
        ])?;
    }
    let summary = json!({
        "seeds": report.seeds.len(),
        "training_failures": report.training_failures,
        "mean_c_star_analog": report.mean_c_star_analog,
        "mean_c_star_hetero": report.mean_c_star_hetero,
        "mean_ratio": report.mean_ratio,
        "ratio_of_means": report.ratio,
        "monotone_analog": report.monotone_analog,
        "monotone_hetero": report.monotone_hetero,
    });
    Ok(RecipeOutput {
        artifacts: vec![
            per_seed.artifact("theorem1_seeds.csv")?,
            curves.artifact("theorem1_curves.csv")?,
            seed_curves.artifact("theorem1_seed_curves.csv")?,
            json_artifact("theorem1.json", &report)?,
        ],
        summary,
    })
}

fn partition_compare(task: &TaskSpec, train: &TrainConfig, cfg: &CompareConfig, seeds: &[u64]) -> Result<RecipeOutput> {
    let runs = sorted_runs(task, train, seeds)?;
    let report = compare_partitions(&runs, cfg)?;
    let mut curves = Table::new(&["seed", "metric", "gamma", "digital_experts", "c", "accuracy"]);
    for curve in &report.curves {
        for (c, acc) in report.grid.iter().zip(&curve.accuracy) {
            curves.push(vec![
                curve.seed.to_string(),
                curve.metric.name().into(),
                num(curve.gamma),
                index_list(&curve.digital),
                num(*c),
                num(*acc),
            ])?;
        }
    }
    let mut mean_curves = Table::new(&["metric", "gamma", "c", "mean_accuracy", "se"]);
    let mut summary_table = Table::new(&["metric", "gamma", "grid_mean_accuracy", "grid_mean_se"]);
    for s in &report.summary {
        for (i, c) in report.grid.iter().enumerate() {
            mean_curves.push(vec![
                s.metric.name().into(),
                num(s.gamma),
                num(*c),
                num(s.mean_curve[i]),
                num(s.se_curve[i]),
            ])?;
        }
        summary_table.push(vec![s.metric.name().into(), num(s.gamma), num(s.grid_mean), num(s.grid_mean_se)])?;
    }
    let summary = json!({
        "seeds": runs.len(),
        "grid_means": report
            .summary
            .iter()
            .map(|s| json!({ "metric": s.metric.name(), "gamma": s.gamma, "mean": s.grid_mean, "se": s.grid_mean_se }))
            .collect::<Vec<_>>(),
    });
    Ok(RecipeOutput {
        artifacts: vec![
            curves.artifact("compare_curves.csv")?,
            mean_curves.artifact("compare_mean_curves.csv")?,
            summary_table.artifact("compare_summary.csv")?,
            json_artifact("compare.json", &report)?,
        ],
        summary,
    })
}

fn perf(cfg: &PerfConfig) -> Result<RecipeOutput> {
    let rows = perf_table(
        &cfg.model,
        &cfg.device,
        cfg.batch_size,
        &cfg.expert_gammas,
        cfg.active_only_transfer,
    )?;
    let mut csv = Vec::new();
    write_perf_csv(&mut csv, &rows)?;
    let summary = json!({
        "rows": rows
            .iter()
            .map(|r| json!({ "label": r.label, "throughput": r.throughput, "energy_efficiency": r.energy_efficiency }))
            .collect::<Vec<_>>(),
    });
    Ok(RecipeOutput {
        artifacts: vec![
            Artifact {
                name: "perf_table.csv".into(),
                bytes: csv,
            },
            json_artifact("perf_table.json", &json!({ "config": cfg, "rows": rows }))?,
        ],
        summary,
    })
}

/// Student-t inputs, one vector per row.
fn heavy_tailed_inputs(rows: usize, cols: usize, dof: f64, rng: &mut RngStream) -> Result<Matrix> {
    let dist = rand_distr::StudentT::new(dof).map_err(|e| Error::param(format!("student t: {e}")))?;
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(&dist)).collect())
}

struct CalibrationCase {
    weights: Matrix,
    calibration: Matrix,
    eval: Matrix,
    exact: Matrix,
    noise_stream: RngStream,
}

impl CalibrationCase {
    fn new(cfg: &CalibrateConfig, seed: u64) -> Result<Self> {
        let weights = gaussian(&mut RngStream::new(seed, 0), 0.0, 1.0 / (cfg.rows as f64).sqrt(), cfg.rows, cfg.cols)?;
        let calibration = heavy_tailed_inputs(cfg.calibration_inputs, cfg.rows, cfg.input_dof, &mut RngStream::new(seed, 1))?;
        let eval = heavy_tailed_inputs(cfg.eval_inputs, cfg.rows, cfg.input_dof, &mut RngStream::new(seed, 2))?;
        let exact = eval.matmul(&weights)?;
        Ok(Self {
            weights,
            calibration,
            eval,
            exact,
            noise_stream: RngStream::new(seed, 3),
        })
    }

    /// Squared output error relative to the exact products.
    fn loss(&self, cfg: &CalibrateConfig, kappa: f64, lambda: f64) -> Result<f64> {
        let quantizer = QuantizerConfig {
            dac_bits: cfg.dac_bits,
            adc_bits: cfg.adc_bits,
            kappa,
            lambda,
            ..QuantizerConfig::default()
        };
        let mut layer = AnalogLayer::new(self.weights.clone(), cfg.tile_size, quantizer)?;
        layer.program(&cfg.noise, &self.noise_stream)?;
        layer.calibrate(&self.calibration)?;
        let out = layer.mvm_rows(&self.eval)?;
        let err: f64 = out.as_slice().iter().zip(self.exact.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = self.exact.as_slice().iter().map(|b| b * b).sum();
        Ok(err / norm)
    }
}

fn calibrate(cfg: &CalibrateConfig, seeds: &[u64]) -> Result<RecipeOutput> {
    let cases = seeds
        .par_iter()
        .map(|&s| CalibrationCase::new(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |kappa: f64, lambda: f64| -> Result<f64> {
        let losses = cases
            .par_iter()
            .map(|c| c.loss(cfg, kappa, lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };
    let result = grid_calibrate(evaluate, &cfg.kappa_grid, &cfg.lambda_grid)?;
    let mut table = Table::new(&["phase", "kappa", "lambda", "relative_squared_error"]);
    for &(kappa, loss) in &result.kappa_sweep {
        table.push(vec!["kappa".into(), num(kappa), num(crate::quantizer::KAPPA_SWEEP_LAMBDA), num(loss)])?;
    }
    for &(lambda, loss) in &result.lambda_sweep {
        table.push(vec!["lambda".into(), num(result.kappa), num(lambda), num(loss)])?;
    }
    let summary = json!({ "kappa": result.kappa, "lambda": result.lambda, "seeds": seeds.len() });
    Ok(RecipeOutput {
        artifacts: vec![
            table.artifact("calibrate_sweep.csv")?,
            json_artifact("calibrate.json", &json!({ "config": cfg, "result": result }))?,
        ],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_level_ties_away_from_zero() {
        // 2 bits: levels at -1, 0, 1
        assert_eq!(nearest_level(0.5, 1.0, 2).unwrap(), 1.0);
        assert_eq!(nearest_level(-0.5, 1.0, 2).unwrap(), -1.0);
        assert_eq!(nearest_level(0.49, 1.0, 2).unwrap(), 0.0);
        assert_eq!(nearest_level(7.0, 1.0, 4).unwrap(), 1.0);
    }

    #[test]
    fn quantizer_recipe_passes() {
        let out = run(&ExperimentConfig::defaults_for(Experiment::QuantizerValidate)).unwrap();
        assert_eq!(out.summary["all_properties_hold"], true);
        assert_eq!(out.artifacts.len(), 2);
    }

    #[test]
    fn perf_recipe_rows() {
        let out = run(&ExperimentConfig::defaults_for(Experiment::PerfTable)).unwrap();
        let csv = String::from_utf8(out.artifacts[0].bytes.clone()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 3);
    }

    #[test]
    fn small_calibration_runs() {
        let mut cfg = ExperimentConfig::defaults_for(Experiment::Calibrate);
        cfg.seeds = crate::config::Seeds::List(vec![0]);
        let cal = cfg.calibrate.as_mut().unwrap();
        cal.rows = 32;
        cal.cols = 8;
        cal.tile_size = 16;
        cal.calibration_inputs = 16;
        cal.eval_inputs = 16;
        let out = run(&cfg).unwrap();
        assert!(out.summary["kappa"].as_f64().unwrap() > 0.0);
    }
}
