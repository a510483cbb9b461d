//! Mixture-of-experts block: MLP and gated-MLP experts, token-choice and
//! expert-choice routing, and a forward pass that dispatches each expert to
//! the digital or the analog backend.
//!
//! Tokens are row vectors: an expert computes `phi(x^T W_up) W_down` with
//! `W_up: d x m` and `W_down: m x d`. A sequence is a `d x n` matrix whose
//! columns are tokens. The router is always evaluated digitally.

use serde::{Deserialize, Serialize};

use crate::analog::AnalogLayer;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::prognoise::NoiseSpec;
use crate::quantizer::QuantizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Mlp,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    up: Matrix,
    down: Matrix,
    gate: Option<Matrix>,
}

impl ExpertWeights {
    pub fn mlp(up: Matrix, down: Matrix) -> Result<Self> {
        Self::checked(up, down, None)
    }

    pub fn gated(up: Matrix, gate: Matrix, down: Matrix) -> Result<Self> {
        Self::checked(up, down, Some(gate))
    }

    fn checked(up: Matrix, down: Matrix, gate: Option<Matrix>) -> Result<Self> {
        let (d, m) = up.shape();
        if d == 0 || m == 0 {
            return Err(Error::shape("expert projections must be nonempty"));
        }
        if down.shape() != (m, d) {
            return Err(Error::shape(format!(
                "down projection is {:?}, expected {:?}",
                down.shape(),
                (m, d)
            )));
        }
        if let Some(g) = &gate {
            if g.shape() != (d, m) {
                return Err(Error::shape(format!(
                    "gate projection is {:?}, expected {:?}",
                    g.shape(),
                    (d, m)
                )));
            }
        }
        Ok(Self { up, down, gate })
    }

    pub fn kind(&self) -> ExpertKind {
        if self.gate.is_some() {
            ExpertKind::Gated
        } else {
            ExpertKind::Mlp
        }
    }

    pub fn d(&self) -> usize {
        self.up.rows()
    }

    pub fn m(&self) -> usize {
        self.up.cols()
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn gate(&self) -> Option<&Matrix> {
        self.gate.as_ref()
    }

    pub fn param_count(&self) -> usize {
        2 * self.d() * self.m() + self.gate.as_ref().map_or(0, |_| self.d() * self.m())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Each token takes its top-`fanout` experts.
    TokenChoice,
    /// Each expert takes its top-`fanout` tokens of the sequence.
    ExpertChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBlock {
    experts: Vec<ExpertWeights>,
    router: Matrix,
    routing: RoutingMode,
    activation: Activation,
    fanout: usize,
}

impl MoeBlock {
    pub fn new(
        experts: Vec<ExpertWeights>,
        router: Matrix,
        routing: RoutingMode,
        activation: Activation,
        fanout: usize,
    ) -> Result<Self> {
        let k = experts.len();
        if k == 0 {
            return Err(Error::shape("an MoE block needs at least one expert"));
        }
        let d = experts[0].d();
        if experts.iter().any(|e| e.d() != d) {
            return Err(Error::shape("experts disagree on the token dimension"));
        }
        if router.shape() != (d, k) {
            return Err(Error::shape(format!(
                "router is {:?}, expected {:?}",
                router.shape(),
                (d, k)
            )));
        }
        if fanout == 0 {
            return Err(Error::param("fanout must be at least 1"));
        }
        if routing == RoutingMode::TokenChoice && fanout > k {
            return Err(Error::param(format!("top-{fanout} routing over {k} experts")));
        }
        Ok(Self {
            experts,
            router,
            routing,
            activation,
            fanout,
        })
    }

    /// The analyzable block: ReLU MLP experts with fixed down projections
    /// `sign[s] * ones(m, d)` and expert-choice routing with capacity `l`.
    pub fn theory(up: &[Matrix], router: Matrix, signs: &[f64], l: usize) -> Result<Self> {
        if up.len() != signs.len() {
            return Err(Error::shape("one output sign per expert"));
        }
        let experts = up
            .iter()
            .zip(signs)
            .map(|(w, &a)| ExpertWeights::mlp(w.clone(), Matrix::filled(w.cols(), w.rows(), a)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(experts, router, RoutingMode::ExpertChoice, Activation::Relu, l)
    }

    pub fn experts(&self) -> &[ExpertWeights] {
        &self.experts
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn routing(&self) -> RoutingMode {
        self.routing
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn d(&self) -> usize {
        self.router.rows()
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    /// Reorders experts, router columns follow. `order[i]` is the old index of
    /// the new expert `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<MoeBlock> {
        let k = self.k();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&o| o >= k || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::param("not a permutation of the experts"));
        }
        let columns = self.router.columns();
        let router = Matrix::from_columns(&order.iter().map(|&o| columns[o].clone()).collect::<Vec<_>>())?;
        let experts = order.iter().map(|&o| self.experts[o].clone()).collect();
        MoeBlock::new(experts, router, self.routing, self.activation, self.fanout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Digital,
    Analog,
}

/// Backend of every expert. Dense modules (the router) are always digital.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendAssignment {
    pub experts: Vec<Backend>,
}

impl BackendAssignment {
    pub fn all(k: usize, backend: Backend) -> Self {
        Self {
            experts: vec![backend; k],
        }
    }

    /// Experts in `digital` run digitally, all others on analog tiles.
    pub fn with_digital(k: usize, digital: &[usize]) -> Self {
        let mut experts = vec![Backend::Analog; k];
        for &s in digital {
            experts[s] = Backend::Digital;
        }
        Self { experts }
    }

    pub fn router(&self) -> Backend {
        Backend::Digital
    }

    pub fn digital_count(&self) -> usize {
        self.experts.iter().filter(|&&b| b == Backend::Digital).count()
    }
}

/// Indices of the `count` largest scores, best first; ties go to the lower
/// index.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    /// Selected experts, best first.
    pub experts: Vec<usize>,
    /// Softmax over the selected experts' scores.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRoute {
    /// Selected token positions, best first.
    pub tokens: Vec<usize>,
    /// Softmax over the selected tokens' scores.
    pub weights: Vec<f64>,
}

impl ExpertRoute {
    /// Routing weight of token `j`, zero when the expert did not select it.
    pub fn weight_of(&self, j: usize) -> f64 {
        self.tokens
            .iter()
            .position(|&t| t == j)
            .map_or(0.0, |p| self.weights[p])
    }
}

pub fn route_token_choice(block: &MoeBlock, x: &[f64]) -> Result<TokenRoute> {
    let scores = block.router.vecmat(x)?;
    let experts = top_indices(&scores, block.fanout);
    let selected: Vec<f64> = experts.iter().map(|&s| scores[s]).collect();
    Ok(TokenRoute {
        weights: softmax(&selected),
        experts,
    })
}

/// Router scores `X^T Sigma` as an `n x k` matrix.
pub fn router_scores(block: &MoeBlock, tokens: &Matrix) -> Result<Matrix> {
    if tokens.rows() != block.d() {
        return Err(Error::shape(format!(
            "sequence has token dimension {}, block expects {}",
            tokens.rows(),
            block.d()
        )));
    }
    tokens.transpose().matmul(&block.router)
}

pub fn route_expert_choice(block: &MoeBlock, tokens: &Matrix) -> Result<Vec<ExpertRoute>> {
    let scores = router_scores(block, tokens)?;
    expert_choice_from_scores(&scores, block.fanout)
}

/// Expert-choice selection from an `n x k` score matrix: each expert takes
/// its `capacity` best tokens and softmaxes their scores.
pub fn expert_choice_from_scores(scores: &Matrix, capacity: usize) -> Result<Vec<ExpertRoute>> {
    let (n, k) = scores.shape();
    if capacity > n {
        return Err(Error::param(format!(
            "expert capacity {capacity} exceeds sequence length {n}"
        )));
    }
    Ok((0..k)
        .map(|s| {
            let column = scores.column(s);
            let chosen = top_indices(&column, capacity);
            let selected: Vec<f64> = chosen.iter().map(|&j| column[j]).collect();
            ExpertRoute {
                weights: softmax(&selected),
                tokens: chosen,
            }
        })
        .collect())
}

/// The three projections of one expert placed on analog tiles.
#[derive(Debug, Clone)]
pub struct AnalogExpert {
    pub up: AnalogLayer,
    pub gate: Option<AnalogLayer>,
    pub down: AnalogLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalogSettings {
    pub quantizer: QuantizerConfig,
    pub noise: NoiseSpec,
    pub tile_size: usize,
    pub seed: u64,
}

/// Programmed and calibrated analog layers for the analog experts of a block.
#[derive(Debug, Clone, Default)]
pub struct AnalogContext {
    experts: Vec<Option<AnalogExpert>>,
}

impl AnalogContext {
    pub fn digital_only(k: usize) -> Self {
        Self {
            experts: vec![None; k],
        }
    }

    /// Programs every analog expert with noise streams keyed by
    /// `(expert, projection)` and calibrates input ranges on
    /// `calibration` (a `d x N` token matrix). The down projection is
    /// calibrated on the clean hidden activations of the same tokens.
    pub fn build(
        block: &MoeBlock,
        assignment: &BackendAssignment,
        settings: &AnalogSettings,
        calibration: &Matrix,
    ) -> Result<Self> {
        if assignment.experts.len() != block.k() {
            return Err(Error::shape("assignment does not cover every expert"));
        }
        let inputs = calibration.transpose();
        if inputs.cols() != block.d() {
            return Err(Error::shape("calibration tokens have the wrong dimension"));
        }
        let mut experts = Vec::with_capacity(block.k());
        for (s, (e, backend)) in block.experts.iter().zip(&assignment.experts).enumerate() {
            if *backend == Backend::Digital {
                experts.push(None);
                continue;
            }
            let layer = |w: &Matrix, slot: u64, xs: &Matrix| -> Result<AnalogLayer> {
                let mut l = AnalogLayer::new(w.clone(), settings.tile_size, settings.quantizer)?;
                l.program(&settings.noise, &RngStream::for_path(settings.seed, &[s as u64, slot]))?;
                l.calibrate(xs)?;
                Ok(l)
            };
            let mut hidden = Matrix::zeros(inputs.rows(), e.m());
            for b in 0..inputs.rows() {
                let h = hidden_digital(e, inputs.row(b), block.activation)?;
                for (r, v) in h.into_iter().enumerate() {
                    hidden.set(b, r, v);
                }
            }
            experts.push(Some(AnalogExpert {
                up: layer(&e.up, 0, &inputs)?,
                gate: e.gate.as_ref().map(|g| layer(g, 1, &inputs)).transpose()?,
                down: layer(&e.down, 2, &hidden)?,
            }));
        }
        Ok(Self { experts })
    }

    pub fn expert(&self, s: usize) -> Option<&AnalogExpert> {
        self.experts.get(s).and_then(Option::as_ref)
    }
}

fn hidden_digital(e: &ExpertWeights, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    let up = e.up.vecmat(x)?;
    let mut h: Vec<f64> = up.into_iter().map(|v| act.apply(v)).collect();
    if let Some(g) = &e.gate {
        for (hv, gv) in h.iter_mut().zip(g.vecmat(x)?) {
            *hv *= gv;
        }
    }
    Ok(h)
}

/// `weight * [phi(x^T W_up) (.* x^T W_gate)] W_down` on the given backend.
/// On the analog backend every projection goes through its tiles; the routing
/// weight is applied digitally afterwards.
pub fn expert_forward(
    e: &ExpertWeights,
    x: &[f64],
    weight: f64,
    activation: Activation,
    backend: Backend,
    analog: Option<&AnalogExpert>,
) -> Result<Vec<f64>> {
    if x.len() != e.d() {
        return Err(Error::shape(format!("token of length {} for expert with d={}", x.len(), e.d())));
    }
    let out = match backend {
        Backend::Digital => e.down.vecmat(&hidden_digital(e, x, activation)?)?,
        Backend::Analog => {
            let a = analog.ok_or_else(|| Error::State("analog expert has no programmed tiles".into()))?;
            let mut h: Vec<f64> = a.up.mvm(x)?.into_iter().map(|v| activation.apply(v)).collect();
            if let Some(g) = &a.gate {
                for (hv, gv) in h.iter_mut().zip(g.mvm(x)?) {
                    *hv *= gv;
                }
            }
            a.down.mvm(&h)?
        }
    };
    Ok(out.into_iter().map(|v| weight * v).collect())
}

/// Full block output, one output token per input column (`d x n`).
///
/// Each output token sums its expert contributions in descending router-score
/// order, so relabeling experts (with the router columns and backends) leaves
/// the result bit-identical.
pub fn block_forward(
    block: &MoeBlock,
    tokens: &Matrix,
    assignment: &BackendAssignment,
    ctx: &AnalogContext,
) -> Result<Matrix> {
    if assignment.experts.len() != block.k() {
        return Err(Error::shape("assignment does not cover every expert"));
    }
    let (d, n) = tokens.shape();
    let scores = router_scores(block, tokens)?;
    // (token, expert, weight) triples.
    let mut routed: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    match block.routing {
        RoutingMode::TokenChoice => {
            for (j, slot) in routed.iter_mut().enumerate() {
                let r = route_token_choice(block, &tokens.column(j))?;
                slot.extend(r.experts.into_iter().zip(r.weights));
            }
        }
        RoutingMode::ExpertChoice => {
            for (s, r) in route_expert_choice(block, tokens)?.into_iter().enumerate() {
                for (j, g) in r.tokens.into_iter().zip(r.weights) {
                    routed[j].push((s, g));
                }
            }
        }
    }
    let mut out = Matrix::zeros(d, n);
    for (j, mut contributions) in routed.into_iter().enumerate() {
        contributions.sort_by(|a, b| scores.get(j, b.0).total_cmp(&scores.get(j, a.0)).then(a.0.cmp(&b.0)));
        let x = tokens.column(j);
        let mut acc = vec![0.0; d];
        for (s, g) in contributions {
            let y = expert_forward(
                &block.experts[s],
                &x,
                g,
                block.activation,
                assignment.experts[s],
                ctx.expert(s),
            )?;
            for (a, v) in acc.iter_mut().zip(y) {
                *a += v;
            }
        }
        for (i, v) in acc.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Scalar head `(1/d) * sum_j 1^T x_out^(j)`.
pub fn theory_head(outputs: &Matrix) -> f64 {
    outputs.as_slice().iter().sum::<f64>() / outputs.rows() as f64
}
