//! Expert scoring and heterogeneous placement.
//!
//! Dense modules stay digital. Within a block, experts are ranked by a metric
//! (the maximum neuron norm score by default) and the top `ceil(gamma * k)`
//! go to the digital accelerator; the rest run on analog tiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    route_expert_choice, route_token_choice, softmax, top_indices, BackendAssignment,
    ExpertWeights, MoeBlock,
};
use crate::numerics::{l2_norm, Matrix};

/// Largest column (neuron) l2 norm of `w`.
pub fn max_nn_norm(w: &Matrix) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::shape("max neuron norm of an empty matrix"));
    }
    Ok((0..w.cols())
        .map(|j| l2_norm(&w.column(j)))
        .fold(0.0, f64::max))
}

/// Product of the maximum neuron norms of the up, down and (if present) gate
/// projections. Columns are neurons for every projection, including the
/// `m x d` down projection.
pub fn max_nn_score(e: &ExpertWeights) -> f64 {
    let norm = |w: &Matrix| max_nn_norm(w).expect("expert projections are nonempty");
    let mut score = norm(e.up()) * norm(e.down());
    if let Some(g) = e.gate() {
        score *= norm(g);
    }
    score
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MaxNnScore,
    ActivationFrequency,
    ActivationWeight,
    RouterNorm,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::MaxNnScore,
        Metric::ActivationFrequency,
        Metric::ActivationWeight,
        Metric::RouterNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MaxNnScore => "max_nn_score",
            Metric::ActivationFrequency => "activation_frequency",
            Metric::ActivationWeight => "activation_weight",
            Metric::RouterNorm => "router_norm",
        }
    }

    pub fn needs_calibration(self) -> bool {
        matches!(self, Metric::ActivationFrequency | Metric::ActivationWeight)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown expert metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertScoreReport {
    pub max_nn_score: Vec<f64>,
    /// Share of all token routings received; sums to 1 over experts.
    /// Empty without calibration data.
    pub activation_frequency: Vec<f64>,
    /// Mean routing weight over the tokens an expert received.
    pub activation_weight: Vec<f64>,
    /// Experts that received no calibration token; their weight is 0.
    pub never_activated: Vec<bool>,
    pub router_norm: Vec<f64>,
}

impl ExpertScoreReport {
    pub fn k(&self) -> usize {
        self.max_nn_score.len()
    }

    pub fn scores(&self, metric: Metric) -> Result<&[f64]> {
        let s = match metric {
            Metric::MaxNnScore => &self.max_nn_score,
            Metric::ActivationFrequency => &self.activation_frequency,
            Metric::ActivationWeight => &self.activation_weight,
            Metric::RouterNorm => &self.router_norm,
        };
        if s.len() != self.k() {
            return Err(Error::State(format!("{metric} was not computed (no calibration data)")));
        }
        Ok(s)
    }

    /// Experts in descending score order, ties to the lower index.
    pub fn ranking(&self, metric: Metric) -> Result<Vec<usize>> {
        let s = self.scores(metric)?;
        Ok(top_indices(s, s.len()))
    }
}

/// Scores the experts of `block` under every metric.
///
/// Activation statistics are gathered from `calibration`, a list of `d x n`
/// sequences, using the token-choice view of the router: every token is sent
/// to its top-`fanout` experts with softmax weights over the selected scores.
/// Under expert-choice routing every expert receives exactly `fanout` tokens
/// per sequence with weights summing to one, which makes both activation
/// statistics constant, so the token-choice view is used for either routing
/// mode. Pass `None` to compute only the data-free metrics.
pub fn baseline_scores(block: &MoeBlock, calibration: Option<&[Matrix]>) -> Result<ExpertScoreReport> {
    let k = block.k();
    let max_nn_score = block.experts().iter().map(max_nn_score).collect();
    let router_norm = (0..k).map(|s| l2_norm(&block.router().column(s))).collect();
    let mut report = ExpertScoreReport {
        max_nn_score,
        activation_frequency: Vec::new(),
        activation_weight: Vec::new(),
        never_activated: Vec::new(),
        router_norm,
    };
    let Some(sequences) = calibration else {
        return Ok(report);
    };
    if sequences.iter().all(|x| x.cols() == 0) {
        return Err(Error::param("activation metrics need a nonempty calibration stream"));
    }
    let fanout = block.fanout().min(k);
    let mut counts = vec![0u64; k];
    let mut weight_sums = vec![0.0; k];
    let mut routings = 0u64;
    for x in sequences {
        let scores = crate::moe::router_scores(block, x)?;
        for j in 0..x.cols() {
            let row = scores.row(j);
            let chosen = top_indices(row, fanout);
            let g = softmax(&chosen.iter().map(|&s| row[s]).collect::<Vec<_>>());
            for (&s, gs) in chosen.iter().zip(g) {
                counts[s] += 1;
                weight_sums[s] += gs;
            }
            routings += fanout as u64;
        }
    }
    report.activation_frequency = counts.iter().map(|&c| c as f64 / routings as f64).collect();
    report.activation_weight = counts
        .iter()
        .zip(&weight_sums)
        .map(|(&c, &w)| if c == 0 { 0.0 } else { w / c as f64 })
        .collect();
    report.never_activated = counts.iter().map(|&c| c == 0).collect();
    Ok(report)
}

/// Calibration statistics gathered with the block's own routing mode; kept
/// for inspection. Under expert-choice both statistics are constant.
pub fn native_activation_counts(block: &MoeBlock, sequences: &[Matrix]) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; block.k()];
    for x in sequences {
        match block.routing() {
            crate::moe::RoutingMode::TokenChoice => {
                for j in 0..x.cols() {
                    for s in route_token_choice(block, &x.column(j))?.experts {
                        counts[s] += 1;
                    }
                }
            }
            crate::moe::RoutingMode::ExpertChoice => {
                for (s, r) in route_expert_choice(block, x)?.into_iter().enumerate() {
                    counts[s] += r.tokens.len() as u64;
                }
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionPlan {
    pub gamma: f64,
    pub metric: Metric,
    /// Ascending expert indices.
    pub digital: Vec<usize>,
    pub analog: Vec<usize>,
}

impl PartitionPlan {
    pub fn k(&self) -> usize {
        self.digital.len() + self.analog.len()
    }

    pub fn assignment(&self) -> BackendAssignment {
        BackendAssignment::with_digital(self.k(), &self.digital)
    }

    /// Fraction of experts on the digital side.
    pub fn digital_fraction(&self) -> f64 {
        self.digital.len() as f64 / self.k() as f64
    }
}

/// Number of digital experts for fraction `gamma` of `k`: `ceil(gamma * k)`,
/// with a 1e-9 allowance so products like `0.3 * 10` are not bumped up by
/// rounding error.
pub fn digital_count(gamma: f64, k: usize) -> usize {
    let raw = gamma * k as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(k)
}

pub fn make_partition(scores: &ExpertScoreReport, gamma: f64, metric: Metric) -> Result<PartitionPlan> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let k = scores.k();
    let ranking = scores.ranking(metric)?;
    let count = digital_count(gamma, k);
    let mut digital = ranking[..count].to_vec();
    let mut analog = ranking[count..].to_vec();
    digital.sort_unstable();
    analog.sort_unstable();
    Ok(PartitionPlan {
        gamma,
        metric,
        digital,
        analog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{Activation, RoutingMode};
    use crate::numerics::{gaussian, RngStream};

    fn report_with(scores: Vec<f64>) -> ExpertScoreReport {
        let k = scores.len();
        ExpertScoreReport {
            max_nn_score: scores,
            activation_frequency: vec![0.0; k],
            activation_weight: vec![0.0; k],
            never_activated: vec![false; k],
            router_norm: vec![0.0; k],
        }
    }

    #[test]
    fn max_nn_norm_examples() {
        assert_eq!(max_nn_norm(&Matrix::identity(3)).unwrap(), 1.0);
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(max_nn_norm(&w).unwrap(), 5.0);
        assert_eq!(max_nn_norm(&Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(matches!(max_nn_norm(&Matrix::zeros(0, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn max_nn_score_examples() {
        let e = ExpertWeights::mlp(Matrix::identity(2), Matrix::identity(2)).unwrap();
        assert_eq!(max_nn_score(&e), 1.0);
        let g = ExpertWeights::gated(Matrix::identity(2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        assert_eq!(max_nn_score(&g), 0.0);
        let up = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let down = Matrix::from_rows(&[vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(max_nn_score(&ExpertWeights::mlp(up, down).unwrap()), 6.0);
    }

    #[test]
    fn partition_extremes() {
        let r = report_with(vec![5.0, 1.0, 2.0]);
        let none = make_partition(&r, 0.0, Metric::MaxNnScore).unwrap();
        assert!(none.digital.is_empty());
        assert_eq!(none.analog, vec![0, 1, 2]);
        let all = make_partition(&r, 1.0, Metric::MaxNnScore).unwrap();
        assert_eq!(all.digital, vec![0, 1, 2]);
        assert!(make_partition(&r, 1.5, Metric::MaxNnScore).is_err());
    }

    #[test]
    fn partition_eighth_of_eight() {
        let r = report_with(vec![5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0]);
        let p = make_partition(&r, 0.125, Metric::MaxNnScore).unwrap();
        assert_eq!(p.digital, vec![7]);
        assert_eq!(p.analog, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn ceil_rounding() {
        assert_eq!(digital_count(0.125, 64), 8);
        assert_eq!(digital_count(0.25, 64), 16);
        assert_eq!(digital_count(0.3, 10), 3);
        assert_eq!(digital_count(0.01, 8), 1);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let r = report_with(vec![1.0, 2.0, 2.0, 0.5]);
        assert_eq!(make_partition(&r, 0.25, Metric::MaxNnScore).unwrap().digital, vec![1]);
    }

    #[test]
    fn unknown_metric_name() {
        assert!(matches!("entropy".parse::<Metric>(), Err(Error::Parameter(_))));
        assert_eq!("router_norm".parse::<Metric>().unwrap(), Metric::RouterNorm);
    }

    fn identity_block(router: Matrix, fanout: usize) -> MoeBlock {
        let (d, k) = router.shape();
        let experts = (0..k)
            .map(|_| ExpertWeights::mlp(Matrix::identity(d), Matrix::identity(d)).unwrap())
            .collect();
        MoeBlock::new(experts, router, RoutingMode::TokenChoice, Activation::Relu, fanout).unwrap()
    }

    #[test]
    fn router_norms_and_frequencies() {
        let router = Matrix::from_rows(&[vec![1.0, 3.0], vec![0.0, 4.0]]).unwrap();
        let block = identity_block(router, 1);
        // Tokens along -e2 favor expert 0 (score 0 vs -4).
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![-1.0, -1.0, -1.0]]).unwrap();
        let r = baseline_scores(&block, Some(&[x])).unwrap();
        assert_eq!(r.router_norm, vec![1.0, 5.0]);
        assert_eq!(r.activation_frequency, vec![1.0, 0.0]);
        assert_eq!(r.activation_weight, vec![1.0, 0.0]);
        assert_eq!(r.never_activated, vec![false, true]);
    }

    #[test]
    fn data_metrics_need_data() {
        let block = identity_block(Matrix::identity(2), 1);
        let r = baseline_scores(&block, None).unwrap();
        assert!(r.ranking(Metric::ActivationFrequency).is_err());
        assert!(r.ranking(Metric::RouterNorm).is_ok());
        assert!(matches!(baseline_scores(&block, Some(&[Matrix::zeros(2, 0)])), Err(Error::Parameter(_))));
    }

    #[test]
    fn uniform_router_balances_frequencies() {
        let k = 4;
        let d = 8;
        let mut rng = RngStream::new(21, 0);
        // Every router column is the same vector up to a permutation of
        // coordinates, and tokens are symmetric Gaussians.
        let base: Vec<f64> = (0..d).map(|i| i as f64 / d as f64).collect();
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|s| (0..d).map(|i| base[(i + 2 * s) % d]).collect())
            .collect();
        let block = identity_block(Matrix::from_columns(&cols).unwrap(), 2);
        let seqs: Vec<Matrix> = (0..200).map(|_| gaussian(&mut rng, 0.0, 1.0, d, 50).unwrap()).collect();
        let r = baseline_scores(&block, Some(&seqs)).unwrap();
        let total: f64 = r.activation_frequency.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for f in &r.activation_frequency {
            assert!((f - 0.25).abs() < 0.01, "{f}");
        }
    }

    proptest::proptest! {
        #[test]
        fn nested_partitions(scores in proptest::collection::vec(0.0f64..10.0, 1..16), g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
            let r = report_with(scores);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let small = make_partition(&r, lo, Metric::MaxNnScore).unwrap();
            let large = make_partition(&r, hi, Metric::MaxNnScore).unwrap();
            proptest::prop_assert!(small.digital.iter().all(|s| large.digital.contains(s)));
            proptest::prop_assert_eq!(large.digital.len() + large.analog.len(), r.k());
        }

        #[test]
        fn scaling_up_projection_scales_score(alpha in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let up = gaussian(&mut rng, 0.0, 1.0, 4, 3).unwrap();
            let down = gaussian(&mut rng, 0.0, 1.0, 3, 4).unwrap();
            let base = max_nn_score(&ExpertWeights::mlp(up.clone(), down.clone()).unwrap());
            let scaled = max_nn_score(&ExpertWeights::mlp(up.scaled(alpha).unwrap(), down).unwrap());
            proptest::prop_assert!((scaled - alpha * base).abs() <= 1e-12 * scaled.abs().max(1.0));
        }
    }
}
