//! Seed sweeps over trained models: score ordering of specialized experts,
//! noise tolerance of all-analog vs. heterogeneous execution, and the
//! comparison of expert-selection metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Route, Tables, TheoryModel};
use super::train::{probe_specialization, relevant_index, train, History, SpecializationProbe, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{mean_stderr, Matrix, RngStream};
use crate::partition::{baseline_scores, make_partition, Metric};
use crate::prognoise::{program_weights, NoiseSpec};
use crate::synthetic::{Relevant, SequenceSample, Task, TaskSpec};

// Stream labels under a run's seed.
const STREAM_VOCAB: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_TEST: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_CALIBRATION: u64 = 6;

/// A model trained under one seed, with its final specialization probe.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    pub task: Task,
    pub config: TrainConfig,
    pub model: TheoryModel,
    pub history: History,
    pub probe: SpecializationProbe,
}

/// Builds the task and trains one model; every random stream is derived
/// from `seed`.
pub fn train_run(spec: &TaskSpec, cfg: &TrainConfig, seed: u64) -> Result<TrainedRun> {
    let task = Task::new(*spec, &mut RngStream::for_path(seed, &[STREAM_VOCAB]))?;
    train_on(task, cfg, seed)
}

fn train_on(task: Task, cfg: &TrainConfig, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let model = TheoryModel::init(&task, cfg, &mut RngStream::for_path(seed, &[STREAM_INIT]))?;
    let (model, history) = train(model, &task, cfg, &mut RngStream::for_path(seed, &[STREAM_TRAIN]))?;
    let probe = probe_specialization(
        &model,
        &task,
        cfg.probe_size,
        &mut RngStream::for_path(seed, &[STREAM_PROBE]),
    )?;
    Ok(TrainedRun {
        seed,
        task,
        config: cfg.clone(),
        model,
        history,
        probe,
    })
}

/// Trains every seed (in parallel); results are in seed-list order.
pub fn train_runs(spec: &TaskSpec, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<TrainedRun>> {
    spec.validate()?;
    seeds.par_iter().map(|&seed| train_run(spec, cfg, seed)).collect()
}

/// [`train_runs`] for any `alpha` in `(0, 1)`, used for symmetric-frequency
/// controls.
pub fn train_runs_any_alpha(spec: &TaskSpec, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<TrainedRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let task = Task::with_any_alpha(*spec, &mut RngStream::for_path(seed, &[STREAM_VOCAB]))?;
            train_on(task, cfg, seed)
        })
        .collect()
}

/// Experts specialized on a rare token and on a frequent token. An expert
/// is judged on the pair of its own label class: `(o1, -o1)` for output sign
/// `+1`, `(o2, -o2)` for `-1`. Experts passing the threshold on both tokens
/// of their pair are listed under `dual` only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specialization {
    pub rare: Vec<usize>,
    pub frequent: Vec<usize>,
    pub dual: Vec<usize>,
}

pub fn classify_specialization(probe: &SpecializationProbe, signs: &[f64], threshold: f64) -> Specialization {
    let mut out = Specialization::default();
    for (s, row) in probe.p.iter().enumerate() {
        let (rare_token, frequent_token) = if signs[s] > 0.0 {
            (Relevant::O1, Relevant::NegO1)
        } else {
            (Relevant::O2, Relevant::NegO2)
        };
        let rare = row[relevant_index(rare_token)] >= threshold;
        let frequent = row[relevant_index(frequent_token)] >= threshold;
        match (rare, frequent) {
            (true, true) => out.dual.push(s),
            (true, false) => out.rare.push(s),
            (false, true) => out.frequent.push(s),
            (false, false) => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Seed {
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub max_nn_scores: Vec<f64>,
    pub specialization: Specialization,
    /// `None` when the seed has no rare-specialized or no
    /// frequent-specialized expert.
    pub ordering_holds: Option<bool>,
    /// Smallest frequent-expert score over largest rare-expert score.
    pub min_score_ratio: Option<f64>,
    /// Mean frequent-expert score over mean rare-expert score.
    pub mean_score_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub alpha: f64,
    pub seeds: Vec<Lemma1Seed>,
    pub conclusive: usize,
    pub holds: usize,
    /// `holds / conclusive`, `None` without conclusive seeds.
    pub holds_fraction: Option<f64>,
    /// Geometric mean of the per-seed mean score ratios.
    pub score_ratio: Option<f64>,
    /// Fraction of seeds whose held-out loss fell by at least half.
    pub loss_halved_fraction: f64,
}

pub fn lemma1_report(runs: &[TrainedRun]) -> Result<Lemma1Report> {
    if runs.is_empty() {
        return Err(Error::param("no runs"));
    }
    let mut seeds: Vec<Lemma1Seed> = runs.iter().map(lemma1_seed).collect();
    seeds.sort_by_key(|s| s.seed);
    let conclusive = seeds.iter().filter(|s| s.ordering_holds.is_some()).count();
    let holds = seeds.iter().filter(|s| s.ordering_holds == Some(true)).count();
    let logs: Vec<f64> = seeds.iter().filter_map(|s| s.mean_score_ratio).map(f64::ln).collect();
    let halved = seeds.iter().filter(|s| s.final_loss <= 0.5 * s.initial_loss).count();
    Ok(Lemma1Report {
        alpha: runs[0].task.spec().alpha,
        conclusive,
        holds,
        holds_fraction: (conclusive > 0).then(|| holds as f64 / conclusive as f64),
        score_ratio: (!logs.is_empty()).then(|| (logs.iter().sum::<f64>() / logs.len() as f64).exp()),
        loss_halved_fraction: halved as f64 / seeds.len() as f64,
        seeds,
    })
}

fn lemma1_seed(run: &TrainedRun) -> Lemma1Seed {
    let scores = run.model.max_nn_scores();
    let spec = classify_specialization(&run.probe, run.model.signs(), run.config.specialization_threshold);
    let pick = |set: &[usize]| set.iter().map(|&s| scores[s]).collect::<Vec<_>>();
    let (rare, frequent) = (pick(&spec.rare), pick(&spec.frequent));
    let (ordering_holds, min_ratio, mean_ratio) = if rare.is_empty() || frequent.is_empty() {
        (None, None, None)
    } else {
        let max_rare = rare.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_freq = frequent.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (
            Some(min_freq > max_rare),
            Some(min_freq / max_rare),
            Some(mean(&frequent) / mean(&rare)),
        )
    };
    let loss = |r: Option<&super::train::HistoryRecord>| r.map_or(f64::NAN, |r| r.eval_loss);
    Lemma1Seed {
        seed: run.seed,
        initial_loss: loss(run.history.first()),
        final_loss: loss(run.history.last()),
        max_nn_scores: scores,
        specialization: spec,
        ordering_holds,
        min_score_ratio: min_ratio,
        mean_score_ratio: mean_ratio,
    }
}

pub fn run_lemma1_experiment(spec: &TaskSpec, cfg: &TrainConfig, seeds: &[u64]) -> Result<Lemma1Report> {
    lemma1_report(&train_runs(spec, cfg, seeds)?)
}

/// Two-sided sign-test p-value for `successes` out of `n` fair coin flips.
pub fn binomial_two_sided_p(successes: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut pmf = vec![0.0; n + 1];
    let mut log_c = 0.0f64;
    let ln_half_n = n as f64 * 0.5f64.ln();
    for (i, slot) in pmf.iter_mut().enumerate() {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        *slot = (log_c + ln_half_n).exp();
    }
    let lower: f64 = pmf[..=successes].iter().sum();
    let upper: f64 = pmf[successes..].iter().sum();
    (2.0 * lower.min(upper)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSweepConfig {
    /// Simplified-noise magnitudes `c`, ascending from 0.
    pub grid: Vec<f64>,
    pub test_size: usize,
    /// Independent noise draws averaged per grid point.
    pub draws: usize,
    /// Accuracy a model must keep for a noise level to count as tolerated.
    pub threshold: f64,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            grid: (0..=40).map(|i| i as f64 * 0.005).collect(),
            test_size: 2000,
            draws: 4,
            threshold: 0.99,
        }
    }
}

impl NoiseSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid[0] != 0.0 {
            return Err(Error::Config("noise grid must start at 0".into()));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) || self.grid.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("noise grid must be finite and strictly increasing".into()));
        }
        if self.test_size == 0 || self.draws == 0 {
            return Err(Error::Config("test_size and draws must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config("accuracy threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Held-out sequences with their routing, which noise on the up
/// projections does not change.
#[derive(Debug, Clone)]
pub struct TestSet {
    samples: Vec<SequenceSample>,
    routes: Vec<Vec<Route>>,
}

impl TestSet {
    pub fn new(run: &TrainedRun, size: usize) -> Result<Self> {
        let samples = run
            .task
            .sample_many(size, &mut RngStream::for_path(run.seed, &[STREAM_TEST]));
        let tables = Tables::new(&run.model, run.task.vocab())?;
        let routes = samples
            .iter()
            .map(|s| tables.route(&s.tokens, run.model.l()))
            .collect();
        Ok(Self { samples, routes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of sequences with `y f > 0` when the experts use `up`.
    pub fn accuracy(&self, run: &TrainedRun, up: &[Matrix]) -> Result<f64> {
        let tables = Tables::with_up(&run.model, up, run.task.vocab())?;
        let signs = run.model.signs();
        let correct = self
            .samples
            .iter()
            .zip(&self.routes)
            .filter(|(s, r)| s.label * tables.forward(signs, &s.tokens, r) > 0.0)
            .count();
        Ok(correct as f64 / self.samples.len() as f64)
    }
}

/// Up projections with simplified programming noise of magnitude `c`
/// (per-column `w_max`). Expert `s` under draw `q` always uses the same
/// stream, so noise is shared across execution modes and scales linearly
/// with `c`.
fn noisy_up(run: &TrainedRun, c: f64, draw: usize) -> Result<Vec<Matrix>> {
    let spec = NoiseSpec::simplified(c);
    run.model
        .up()
        .iter()
        .enumerate()
        .map(|(s, w)| {
            let column_max: Vec<f64> = (0..w.cols()).map(|j| w.column_max_abs(j, 0, w.rows())).collect();
            let mut rng = RngStream::for_path(run.seed, &[STREAM_NOISE, draw as u64, s as u64]);
            program_weights(w, &column_max, &spec, &mut rng)
        })
        .collect()
}

/// Mean accuracy over noise draws at every grid point, one curve per
/// digital set (experts in a digital set keep clean weights).
fn sweep_curves(run: &TrainedRun, test: &TestSet, sweep: &NoiseSweepConfig, digital_sets: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let clean = run.model.up();
    let mut curves = vec![vec![0.0; sweep.grid.len()]; digital_sets.len()];
    for (ci, &c) in sweep.grid.iter().enumerate() {
        for draw in 0..sweep.draws {
            let noisy = noisy_up(run, c, draw)?;
            for (set, curve) in digital_sets.iter().zip(curves.iter_mut()) {
                let up: Vec<Matrix> = (0..clean.len())
                    .map(|s| if set.contains(&s) { clean[s].clone() } else { noisy[s].clone() })
                    .collect();
                curve[ci] += test.accuracy(run, &up)? / sweep.draws as f64;
            }
        }
    }
    Ok(curves)
}

/// Largest grid noise up to which every grid point keeps the threshold;
/// `None` when the clean model already misses it.
fn tolerated_noise(grid: &[f64], curve: &[f64], threshold: f64) -> Option<f64> {
    let ok = curve.iter().take_while(|&&a| a >= threshold).count();
    (ok > 0).then(|| grid[ok - 1])
}

/// Checks that a mean curve never rises by more than one standard error
/// between neighbouring grid points.
fn nonincreasing_within_se(mean: &[f64], se: &[f64]) -> bool {
    (1..mean.len()).all(|i| mean[i] <= mean[i - 1] + se[i].max(se[i - 1]))
}

fn curve_stats(curves: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let points = curves.first().map_or(0, |c| c.len());
    (0..points)
        .map(|i| mean_stderr(&curves.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GammaChoice {
    /// Digital fraction equal to the measured fraction of frequent-token
    /// experts.
    Measured,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Seed {
    pub seed: u64,
    pub gamma_measured: f64,
    pub gamma_used: f64,
    pub digital: Vec<usize>,
    pub accuracy_analog: Vec<f64>,
    pub accuracy_hetero: Vec<f64>,
    pub c_star_analog: Option<f64>,
    pub c_star_hetero: Option<f64>,
    /// The clean model misses the accuracy threshold.
    pub training_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub grid: Vec<f64>,
    pub threshold: f64,
    pub seeds: Vec<Theorem1Seed>,
    pub mean_analog: Vec<f64>,
    pub se_analog: Vec<f64>,
    pub mean_hetero: Vec<f64>,
    pub se_hetero: Vec<f64>,
    /// Means over seeds without a training failure.
    pub mean_c_star_analog: Option<f64>,
    pub mean_c_star_hetero: Option<f64>,
    /// `mean_c_star_hetero / mean_c_star_analog`.
    pub ratio: Option<f64>,
    /// Mean over seeds of `c*_H / c*_A`, with `c*_A = 0` replaced by the
    /// first positive grid point (a lower bound on that seed's ratio).
    pub mean_ratio: Option<f64>,
    pub training_failures: usize,
    pub monotone_analog: bool,
    pub monotone_hetero: bool,
}

pub fn theorem1_report(runs: &[TrainedRun], sweep: &NoiseSweepConfig, gamma: &GammaChoice) -> Result<Theorem1Report> {
    sweep.validate()?;
    if runs.is_empty() {
        return Err(Error::param("no runs"));
    }
    let mut seeds = runs
        .par_iter()
        .map(|run| theorem1_seed(run, sweep, gamma))
        .collect::<Result<Vec<_>>>()?;
    seeds.sort_by_key(|s| s.seed);
    let analog: Vec<&[f64]> = seeds.iter().map(|s| s.accuracy_analog.as_slice()).collect();
    let hetero: Vec<&[f64]> = seeds.iter().map(|s| s.accuracy_hetero.as_slice()).collect();
    let (mean_analog, se_analog) = curve_stats(&analog);
    let (mean_hetero, se_hetero) = curve_stats(&hetero);
    let ok: Vec<&Theorem1Seed> = seeds.iter().filter(|s| !s.training_failure).collect();
    let mean_of = |f: fn(&Theorem1Seed) -> Option<f64>| {
        let v: Vec<f64> = ok.iter().filter_map(|s| f(s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mean_c_star_analog = mean_of(|s| s.c_star_analog);
    let mean_c_star_hetero = mean_of(|s| s.c_star_hetero);
    let ratio = match (mean_c_star_hetero, mean_c_star_analog) {
        (Some(h), Some(a)) if a > 0.0 => Some(h / a),
        (Some(h), Some(_)) if h > 0.0 => Some(f64::INFINITY),
        _ => None,
    };
    let floor = sweep.grid.iter().copied().filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
    let per_seed: Vec<f64> = ok
        .iter()
        .filter_map(|s| Some(s.c_star_hetero? / s.c_star_analog?.max(floor)))
        .collect();
    let mean_ratio = (!per_seed.is_empty()).then(|| per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    Ok(Theorem1Report {
        grid: sweep.grid.clone(),
        threshold: sweep.threshold,
        training_failures: seeds.len() - ok.len(),
        monotone_analog: nonincreasing_within_se(&mean_analog, &se_analog),
        monotone_hetero: nonincreasing_within_se(&mean_hetero, &se_hetero),
        seeds,
        mean_analog,
        se_analog,
        mean_hetero,
        se_hetero,
        mean_c_star_analog,
        mean_c_star_hetero,
        ratio,
        mean_ratio,
    })
}

fn theorem1_seed(run: &TrainedRun, sweep: &NoiseSweepConfig, gamma: &GammaChoice) -> Result<Theorem1Seed> {
    let spec = classify_specialization(&run.probe, run.model.signs(), run.config.specialization_threshold);
    let k = run.model.k();
    let gamma_measured = spec.frequent.len() as f64 / k as f64;
    let gamma_used = match *gamma {
        GammaChoice::Measured => gamma_measured,
        GammaChoice::Fixed(g) => {
            if g < gamma_measured {
                log::warn!(
                    "seed {}: digital fraction {g} is below the measured fraction {gamma_measured}",
                    run.seed
                );
            }
            g
        }
    };
    let block = run.model.to_block()?;
    let scores = baseline_scores(&block, None)?;
    let plan = make_partition(&scores, gamma_used, Metric::MaxNnScore)?;
    let test = TestSet::new(run, sweep.test_size)?;
    let curves = sweep_curves(run, &test, sweep, &[Vec::new(), plan.digital.clone()])?;
    let c_star_analog = tolerated_noise(&sweep.grid, &curves[0], sweep.threshold);
    let c_star_hetero = tolerated_noise(&sweep.grid, &curves[1], sweep.threshold);
    Ok(Theorem1Seed {
        seed: run.seed,
        gamma_measured,
        gamma_used,
        digital: plan.digital,
        training_failure: c_star_analog.is_none(),
        c_star_analog,
        c_star_hetero,
        accuracy_analog: curves[0].clone(),
        accuracy_hetero: curves[1].clone(),
    })
}

pub fn run_theorem1_experiment(
    spec: &TaskSpec,
    cfg: &TrainConfig,
    sweep: &NoiseSweepConfig,
    gamma: &GammaChoice,
    seeds: &[u64],
) -> Result<Theorem1Report> {
    theorem1_report(&train_runs(spec, cfg, seeds)?, sweep, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub gammas: Vec<f64>,
    pub metrics: Vec<Metric>,
    /// Sequences used for the activation statistics.
    pub calibration_sequences: usize,
    pub sweep: NoiseSweepConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.125, 0.25, 0.5, 1.0],
            metrics: Metric::ALL.to_vec(),
            calibration_sequences: 256,
            sweep: NoiseSweepConfig::default(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        self.sweep.validate()?;
        if self.gammas.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("compare needs at least one gamma and one metric".into()));
        }
        if self.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("every gamma must lie in [0, 1]".into()));
        }
        if self.calibration_sequences == 0 {
            return Err(Error::Config("calibration_sequences must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCurve {
    pub seed: u64,
    pub metric: Metric,
    pub gamma: f64,
    pub digital: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Mean accuracy over the grid.
    pub grid_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub metric: Metric,
    pub gamma: f64,
    pub mean_curve: Vec<f64>,
    pub se_curve: Vec<f64>,
    /// Mean over seeds of the per-seed grid-mean accuracy, and its standard
    /// error.
    pub grid_mean: f64,
    pub grid_mean_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub grid: Vec<f64>,
    /// Sorted by seed, then gamma, then metric order of the config.
    pub curves: Vec<CompareCurve>,
    /// Sorted by gamma, then metric order of the config.
    pub summary: Vec<CompareSummary>,
}

impl CompareReport {
    pub fn summary_for(&self, metric: Metric, gamma: f64) -> Option<&CompareSummary> {
        self.summary.iter().find(|s| s.metric == metric && s.gamma == gamma)
    }
}

/// Noise sweeps for every (metric, gamma) placement of each trained run.
pub fn compare_partitions(runs: &[TrainedRun], cfg: &CompareConfig) -> Result<CompareReport> {
    cfg.validate()?;
    if runs.is_empty() {
        return Err(Error::param("no runs"));
    }
    let mut per_run = runs
        .par_iter()
        .map(|run| compare_run(run, cfg))
        .collect::<Result<Vec<_>>>()?;
    per_run.sort_by_key(|c| c.first().map(|c| c.seed));
    let curves: Vec<CompareCurve> = per_run.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for &gamma in &cfg.gammas {
        for &metric in &cfg.metrics {
            let group: Vec<&CompareCurve> = curves
                .iter()
                .filter(|c| c.metric == metric && c.gamma == gamma)
                .collect();
            let (mean_curve, se_curve) = curve_stats(&group.iter().map(|c| c.accuracy.as_slice()).collect::<Vec<_>>());
            let (grid_mean, grid_mean_se) = mean_stderr(&group.iter().map(|c| c.grid_mean).collect::<Vec<_>>());
            summary.push(CompareSummary {
                metric,
                gamma,
                mean_curve,
                se_curve,
                grid_mean,
                grid_mean_se,
            });
        }
    }
    Ok(CompareReport {
        grid: cfg.sweep.grid.clone(),
        curves,
        summary,
    })
}

fn compare_run(run: &TrainedRun, cfg: &CompareConfig) -> Result<Vec<CompareCurve>> {
    let block = run.model.to_block()?;
    let needs_data = cfg.metrics.iter().any(|m| m.needs_calibration());
    let calibration: Vec<Matrix> = if needs_data {
        let mut rng = RngStream::for_path(run.seed, &[STREAM_CALIBRATION]);
        run.task
            .sample_many(cfg.calibration_sequences, &mut rng)
            .iter()
            .map(|s| s.x(&run.task))
            .collect()
    } else {
        Vec::new()
    };
    let scores = baseline_scores(&block, needs_data.then_some(calibration.as_slice()))?;
    let mut placements = Vec::new();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for &gamma in &cfg.gammas {
        for &metric in &cfg.metrics {
            let digital = make_partition(&scores, gamma, metric)?.digital;
            let idx = match sets.iter().position(|s| *s == digital) {
                Some(i) => i,
                None => {
                    sets.push(digital.clone());
                    sets.len() - 1
                }
            };
            placements.push((metric, gamma, digital, idx));
        }
    }
    let test = TestSet::new(run, cfg.sweep.test_size)?;
    let curves = sweep_curves(run, &test, &cfg.sweep, &sets)?;
    Ok(placements
        .into_iter()
        .map(|(metric, gamma, digital, idx)| {
            let accuracy = curves[idx].clone();
            CompareCurve {
                seed: run.seed,
                metric,
                gamma,
                digital,
                grid_mean: accuracy.iter().sum::<f64>() / accuracy.len() as f64,
                accuracy,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        assert_eq!(binomial_two_sided_p(5, 10), 1.0);
        // P[X <= 0] for n = 10 is 1/1024.
        assert!((binomial_two_sided_p(0, 10) - 2.0 / 1024.0).abs() < 1e-15);
        assert!((binomial_two_sided_p(10, 10) - 2.0 / 1024.0).abs() < 1e-15);
        assert!(binomial_two_sided_p(24, 32) < 0.05);
        assert!(binomial_two_sided_p(19, 32) > 0.05);
    }

    #[test]
    fn tolerated_noise_is_contiguous() {
        let grid = [0.0, 0.1, 0.2, 0.3];
        assert_eq!(tolerated_noise(&grid, &[1.0, 0.995, 0.98, 0.999], 0.99), Some(0.1));
        assert_eq!(tolerated_noise(&grid, &[0.9, 1.0, 1.0, 1.0], 0.99), None);
        assert_eq!(tolerated_noise(&grid, &[1.0; 4], 0.99), Some(0.3));
    }

    #[test]
    fn monotone_check() {
        assert!(nonincreasing_within_se(&[1.0, 0.9, 0.91], &[0.0, 0.01, 0.01]));
        assert!(!nonincreasing_within_se(&[1.0, 0.9, 0.95], &[0.0, 0.01, 0.01]));
    }
}
