use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{block_forward, softmax, theory_head, top_indices, AnalogContext, Backend, BackendAssignment, MoeBlock};
use crate::numerics::{Matrix, RngStream};
use crate::partition::max_nn_score;
use crate::synthetic::{Relevant, Task, TokenId};
use super::train::TrainConfig;

/// Trainable state of the analyzable MoE: one `d x m` up projection per
/// expert, the `d x k` router and the fixed output signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryModel {
    up: Vec<Matrix>,
    router: Matrix,
    signs: Vec<f64>,
    l: usize,
}

impl TheoryModel {
    pub fn new(up: Vec<Matrix>, router: Matrix, signs: Vec<f64>, l: usize) -> Result<Self> {
        let k = up.len();
        if k == 0 {
            return Err(Error::shape("model needs at least one expert"));
        }
        let (d, m) = up[0].shape();
        if d == 0 || m == 0 || up.iter().any(|w| w.shape() != (d, m)) {
            return Err(Error::shape("up projections must share a nonempty d x m shape"));
        }
        if router.shape() != (d, k) {
            return Err(Error::shape(format!("router is {:?}, expected {:?}", router.shape(), (d, k))));
        }
        if signs.len() != k || signs.iter().any(|&a| a != 1.0 && a != -1.0) {
            return Err(Error::param("one output sign in {+1, -1} per expert"));
        }
        if l == 0 {
            return Err(Error::param("expert capacity l must be at least 1"));
        }
        Ok(Self { up, router, signs, l })
    }

    /// Gaussian initialization for `task`.
    ///
    /// The router is redrawn until (i) no expert ties two distinct signed
    /// vocabulary tokens and (ii) within each label class, the experts with
    /// that class's output sign include at least one that initially prefers
    /// the class's rare token and one that prefers its negation. Every redraw
    /// is logged.
    pub fn init(task: &Task, cfg: &TrainConfig, rng: &mut RngStream) -> Result<Self> {
        let vocab = task.vocab();
        let d = vocab.rows();
        let up = (0..cfg.k)
            .map(|_| crate::numerics::gaussian(rng, 0.0, cfg.init_scale_up, d, cfg.m))
            .collect::<Result<Vec<_>>>()?;
        let signs = cfg.signs();
        if !(signs.contains(&1.0) && signs.contains(&-1.0)) {
            return Err(Error::param("both output signs need at least one expert"));
        }
        for attempt in 0..MAX_INIT_ATTEMPTS {
            let router = crate::numerics::gaussian(rng, 0.0, cfg.init_scale_router, d, cfg.k)?;
            let model = Self::new(up.clone(), router, signs.clone(), cfg.l)?;
            if router_margin(&model, vocab)? <= 0.0 {
                log::warn!("router init ties two tokens, redrawing (attempt {})", attempt + 1);
                continue;
            }
            if !covers_relevant_tokens(&model, task) {
                log::debug!("router init leaves a rare token uncovered, redrawing (attempt {})", attempt + 1);
                continue;
            }
            return Ok(model);
        }
        Err(Error::param(format!(
            "no admissible router initialization in {MAX_INIT_ATTEMPTS} draws"
        )))
    }

    pub fn up(&self) -> &[Matrix] {
        &self.up
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn d(&self) -> usize {
        self.router.rows()
    }

    pub fn k(&self) -> usize {
        self.up.len()
    }

    pub fn m(&self) -> usize {
        self.up[0].cols()
    }

    /// Replaces the up projections, e.g. with noisy copies.
    pub fn with_up(&self, up: Vec<Matrix>) -> Result<Self> {
        Self::new(up, self.router.clone(), self.signs.clone(), self.l)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Matrix], &mut Matrix) {
        (&mut self.up, &mut self.router)
    }

    pub fn to_block(&self) -> Result<MoeBlock> {
        MoeBlock::theory(&self.up, self.router.clone(), &self.signs, self.l)
    }

    /// MaxNNScore of every expert, down projection included.
    pub fn max_nn_scores(&self) -> Vec<f64> {
        let block = self.to_block().expect("model invariants imply a valid block");
        block.experts().iter().map(max_nn_score).collect()
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.up
            .iter()
            .map(Matrix::max_abs)
            .fold(self.router.max_abs(), f64::max)
    }
}

const MAX_INIT_ATTEMPTS: usize = 100_000;

/// Whether each rare token has an expert of its class's sign that would
/// select it in every sequence at the current router: fewer than `l`
/// irrelevant tokens outscore it and its negation scores lower.
pub fn covers_relevant_tokens(model: &TheoryModel, task: &Task) -> bool {
    let score = |s: usize, v: &[f64]| -> f64 {
        model.router.column(s).iter().zip(v).map(|(a, b)| a * b).sum()
    };
    let irrelevant: Vec<Vec<f64>> = task
        .irrelevant_indices()
        .iter()
        .map(|&i| task.token_vector(TokenId::positive(i)))
        .collect();
    [(Relevant::O1, Relevant::NegO1, 1.0), (Relevant::O2, Relevant::NegO2, -1.0)]
        .into_iter()
        .all(|(v, neg, class)| {
            let o = task.token_vector(task.relevant_token(v));
            let o_neg = task.token_vector(task.relevant_token(neg));
            (0..model.k()).filter(|&s| model.signs[s] == class).any(|s| {
                let z = score(s, &o);
                let above = irrelevant.iter().filter(|q| score(s, q) > z).count();
                above < model.l && score(s, &o_neg) < z
            })
        })
}

/// Smallest gap between the router scores of two distinct signed vocabulary
/// tokens, over all experts. Positive means routing never ties.
pub fn router_margin(model: &TheoryModel, vocab: &Matrix) -> Result<f64> {
    if vocab.rows() != model.d() {
        return Err(Error::shape("vocabulary dimension differs from the model"));
    }
    let scores = vocab.transpose().matmul(&model.router)?;
    let mut margin = f64::INFINITY;
    for s in 0..model.k() {
        let mut values: Vec<f64> = scores.column(s).into_iter().flat_map(|v| [v, -v]).collect();
        values.sort_by(f64::total_cmp);
        for w in values.windows(2) {
            margin = margin.min(w[1] - w[0]);
        }
    }
    Ok(margin)
}

fn check_tokens(model: &TheoryModel, x: &Matrix) -> Result<()> {
    if x.rows() != model.d() {
        return Err(Error::shape(format!(
            "tokens have dimension {}, model expects {}",
            x.rows(),
            model.d()
        )));
    }
    if x.cols() < model.l {
        return Err(Error::param(format!(
            "sequence of {} tokens is shorter than capacity {}",
            x.cols(),
            model.l
        )));
    }
    Ok(())
}

/// Expert-choice selections `J_s`, best token first.
pub fn expert_choice_selection(model: &TheoryModel, x: &Matrix) -> Result<Vec<Vec<usize>>> {
    check_tokens(model, x)?;
    let scores = x.transpose().matmul(&model.router)?;
    Ok((0..model.k())
        .map(|s| top_indices(&scores.column(s), model.l))
        .collect())
}

fn relu_sum(w: &Matrix, x: &[f64]) -> Vec<f64> {
    w.vecmat(x).expect("token length checked").into_iter().map(|v| v.max(0.0)).collect()
}

/// Model output with the routing selections held fixed; the softmax weights
/// still follow the router.
pub fn forward_with_selection(model: &TheoryModel, x: &Matrix, selection: &[Vec<usize>]) -> Result<f64> {
    check_tokens(model, x)?;
    if selection.len() != model.k() {
        return Err(Error::shape("one selection per expert"));
    }
    let mut f = 0.0;
    for (s, chosen) in selection.iter().enumerate() {
        let router = model.router.column(s);
        let scores: Vec<f64> = chosen
            .iter()
            .map(|&j| x.column(j).iter().zip(&router).map(|(a, b)| a * b).sum())
            .collect();
        let g = softmax(&scores);
        let mut fs = 0.0;
        for (&j, gj) in chosen.iter().zip(g) {
            fs += gj * relu_sum(&model.up[s], &x.column(j)).iter().sum::<f64>();
        }
        f += model.signs[s] * fs;
    }
    Ok(f)
}

/// Scalar output in the per-expert form.
pub fn forward_theory(model: &TheoryModel, x: &Matrix) -> Result<f64> {
    let selection = expert_choice_selection(model, x)?;
    forward_with_selection(model, x, &selection)
}

/// Scalar output through the MoE block (fixed down projections) and the
/// averaging head.
pub fn forward_block(model: &TheoryModel, x: &Matrix) -> Result<f64> {
    let block = model.to_block()?;
    let k = model.k();
    let out = block_forward(
        &block,
        x,
        &BackendAssignment::all(k, Backend::Digital),
        &AnalogContext::digital_only(k),
    )?;
    Ok(theory_head(&out))
}

/// Gradients of a loss with respect to the up projections and the router.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub up: Vec<Matrix>,
    pub router: Matrix,
}

impl Grads {
    pub fn zeros_like(model: &TheoryModel) -> Self {
        Self {
            up: vec![Matrix::zeros(model.d(), model.m()); model.k()],
            router: Matrix::zeros(model.d(), model.k()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.up.iter().map(Matrix::max_abs).fold(self.router.max_abs(), f64::max)
    }
}

/// Output `f` and the gradients of `1 - y f` for one sequence `x` (`d x n`)
/// with the selections fixed at their current values.
///
/// Neuron `r` of expert `s` gets `-y a_s sum_{j in J_s} G_j x_j 1[<w_r, x_j> >= 0]`
/// and router column `s` gets `-y a_s sum_{j in J_s} G_j (h_j - hbar) x_j` with
/// `h_j = sum_r relu(<w_r, x_j>)` and `hbar = sum_j G_j h_j`.
pub fn surrogate_grads(model: &TheoryModel, x: &Matrix, y: f64) -> Result<(f64, Grads)> {
    let selection = expert_choice_selection(model, x)?;
    let (d, m) = (model.d(), model.m());
    let mut grads = Grads::zeros_like(model);
    let mut f = 0.0;
    for (s, chosen) in selection.iter().enumerate() {
        let a = model.signs[s];
        let router = model.router.column(s);
        let tokens: Vec<Vec<f64>> = chosen.iter().map(|&j| x.column(j)).collect();
        let scores: Vec<f64> = tokens
            .iter()
            .map(|t| t.iter().zip(&router).map(|(p, q)| p * q).sum())
            .collect();
        let g = softmax(&scores);
        let pre: Vec<Vec<f64>> = tokens.iter().map(|t| model.up[s].vecmat(t).unwrap()).collect();
        let h: Vec<f64> = pre.iter().map(|p| p.iter().map(|v| v.max(0.0)).sum()).collect();
        let hbar: f64 = g.iter().zip(&h).map(|(gj, hj)| gj * hj).sum();
        f += a * hbar;
        for (idx, t) in tokens.iter().enumerate() {
            let coef = -y * a * g[idx];
            for r in 0..m {
                if pre[idx][r] >= 0.0 {
                    for i in 0..d {
                        let cur = grads.up[s].get(i, r);
                        grads.up[s].set(i, r, cur + coef * t[i]);
                    }
                }
            }
            let rc = coef * (h[idx] - hbar);
            for i in 0..d {
                let cur = grads.router.get(i, s);
                grads.router.set(i, s, cur + rc * t[i]);
            }
        }
    }
    Ok((f, grads))
}

/// Router scores and neuron pre-activations of every (unsigned) vocabulary
/// token. Tokens of the synthetic task are signed vocabulary entries, so a
/// sequence's forward and backward pass reduce to table lookups.
pub(crate) struct Tables {
    k: usize,
    m: usize,
    p: usize,
    /// `score[s * p + i] = <sigma_s, v_i>`.
    score: Vec<f64>,
    /// `pre[(s * p + i) * m + r] = <w_r^s, v_i>`.
    pre: Vec<f64>,
}

/// Selected positions and softmax weights, `l` entries per expert.
pub(crate) type Route = Vec<(usize, f64)>;

impl Tables {
    pub(crate) fn new(model: &TheoryModel, vocab: &Matrix) -> Result<Self> {
        Self::with_up(model, &model.up, vocab)
    }

    /// Tables for `model`'s router and the given up projections.
    pub(crate) fn with_up(model: &TheoryModel, up: &[Matrix], vocab: &Matrix) -> Result<Self> {
        let (k, m, p) = (model.k(), model.m(), vocab.cols());
        let vt = vocab.transpose();
        let scores = vt.matmul(&model.router)?;
        let mut score = vec![0.0; k * p];
        for s in 0..k {
            for i in 0..p {
                score[s * p + i] = scores.get(i, s);
            }
        }
        let mut pre = Vec::with_capacity(k * p * m);
        for w in up {
            pre.extend_from_slice(vt.matmul(w)?.as_slice());
        }
        Ok(Self { k, m, p, score, pre })
    }

    pub(crate) fn vocab_size(&self) -> usize {
        self.p
    }

    #[inline]
    fn score(&self, s: usize, t: TokenId) -> f64 {
        t.sign() * self.score[s * self.p + t.index as usize]
    }

    #[inline]
    fn pre(&self, s: usize, t: TokenId) -> &[f64] {
        let base = (s * self.p + t.index as usize) * self.m;
        &self.pre[base..base + self.m]
    }

    #[inline]
    pub(crate) fn hidden(&self, s: usize, t: TokenId) -> f64 {
        let sign = t.sign();
        self.pre(s, t).iter().map(|&v| (sign * v).max(0.0)).sum()
    }

    pub(crate) fn route(&self, tokens: &[TokenId], l: usize) -> Vec<Route> {
        (0..self.k)
            .map(|s| {
                let scores: Vec<f64> = tokens.iter().map(|&t| self.score(s, t)).collect();
                let chosen = top_indices(&scores, l);
                let g = softmax(&chosen.iter().map(|&j| scores[j]).collect::<Vec<_>>());
                chosen.into_iter().zip(g).collect()
            })
            .collect()
    }

    pub(crate) fn forward(&self, signs: &[f64], tokens: &[TokenId], routes: &[Route]) -> f64 {
        routes
            .iter()
            .enumerate()
            .map(|(s, route)| {
                signs[s] * route.iter().map(|&(j, g)| g * self.hidden(s, tokens[j])).sum::<f64>()
            })
            .sum()
    }

    /// Adds `dloss_df * df/dparams` in vocabulary coordinates: `up[s]` is
    /// `p x m` and `router` is `p x k`.
    pub(crate) fn accumulate(
        &self,
        signs: &[f64],
        tokens: &[TokenId],
        routes: &[Route],
        dloss_df: f64,
        acc: &mut VocabGrads,
    ) {
        let m = self.m;
        for (s, route) in routes.iter().enumerate() {
            let a = signs[s];
            let h: Vec<f64> = route.iter().map(|&(j, _)| self.hidden(s, tokens[j])).collect();
            let hbar: f64 = route.iter().zip(&h).map(|(&(_, g), hj)| g * hj).sum();
            for (&(j, g), hj) in route.iter().zip(&h) {
                let t = tokens[j];
                let sign = t.sign();
                let coef = dloss_df * a * g * sign;
                let row = t.index as usize;
                let up = &mut acc.up[s][row * m..(row + 1) * m];
                for (slot, &z) in up.iter_mut().zip(self.pre(s, t)) {
                    if sign * z >= 0.0 {
                        *slot += coef;
                    }
                }
                acc.router[row * self.k + s] += coef * (hj - hbar);
            }
        }
    }
}

/// Gradient coefficients per vocabulary token.
#[derive(Debug, Clone)]
pub(crate) struct VocabGrads {
    pub up: Vec<Vec<f64>>,
    pub router: Vec<f64>,
}

impl VocabGrads {
    pub(crate) fn zeros(k: usize, m: usize, p: usize) -> Self {
        Self {
            up: vec![vec![0.0; p * m]; k],
            router: vec![0.0; p * k],
        }
    }

    pub(crate) fn add(&mut self, other: &VocabGrads) {
        for (a, b) in self.up.iter_mut().zip(&other.up) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.router.iter_mut().zip(&other.router) {
            *x += y;
        }
    }

    /// Maps back to parameter space, `V C * scale`.
    pub(crate) fn to_grads(&self, vocab: &Matrix, k: usize, m: usize, scale: f64) -> Result<Grads> {
        let p = vocab.cols();
        let up = self
            .up
            .iter()
            .map(|c| vocab.matmul(&Matrix::from_vec(p, m, c.iter().map(|v| v * scale).collect())?))
            .collect::<Result<Vec<_>>>()?;
        let router = vocab.matmul(&Matrix::from_vec(p, k, self.router.iter().map(|v| v * scale).collect())?)?;
        Ok(Grads { up, router })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn random_model(rng: &mut RngStream, d: usize, k: usize, m: usize, l: usize) -> TheoryModel {
        let up = (0..k).map(|_| gaussian(rng, 0.0, 1.0, d, m).unwrap()).collect();
        let router = gaussian(rng, 0.0, 1.0, d, k).unwrap();
        let signs = (0..k).map(|s| if s % 2 == 0 { 1.0 } else { -1.0 }).collect();
        TheoryModel::new(up, router, signs, l).unwrap()
    }

    #[test]
    fn zero_up_gives_zero() {
        let mut rng = RngStream::new(1, 0);
        let model = TheoryModel::new(
            vec![Matrix::zeros(4, 3); 2],
            gaussian(&mut rng, 0.0, 1.0, 4, 2).unwrap(),
            vec![1.0, -1.0],
            1,
        )
        .unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, 4, 3).unwrap();
        assert_eq!(forward_theory(&model, &x).unwrap(), 0.0);
    }

    #[test]
    fn single_neuron_hand_value() {
        let up = Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap();
        let router = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let model = TheoryModel::new(vec![up], router, vec![1.0], 1).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(forward_theory(&model, &x).unwrap(), 2.0);
    }

    #[test]
    fn both_forms_agree() {
        let mut rng = RngStream::new(2, 0);
        for i in 0..50 {
            let (d, k, m, n) = (3 + i % 5, 1 + i % 4, 2 + i % 3, 3 + i % 4);
            let l = 1 + i % 2;
            let model = random_model(&mut rng, d, k, m, l);
            let x = gaussian(&mut rng, 0.0, 1.0, d, n).unwrap();
            let a = forward_theory(&model, &x).unwrap();
            let b = forward_block(&model, &x).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn short_sequence_rejected() {
        let mut rng = RngStream::new(3, 0);
        let model = random_model(&mut rng, 4, 2, 2, 3);
        assert!(forward_theory(&model, &Matrix::zeros(4, 2)).is_err());
        assert!(forward_theory(&model, &Matrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn margin_detects_ties() {
        let up = vec![Matrix::zeros(2, 1)];
        let tied = TheoryModel::new(up.clone(), Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![1.0], 1).unwrap();
        assert_eq!(router_margin(&tied, &Matrix::identity(2)).unwrap(), 0.0);
        let zero = TheoryModel::new(up.clone(), Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(), vec![1.0], 1).unwrap();
        assert_eq!(router_margin(&zero, &Matrix::identity(2)).unwrap(), 0.0);
        let ok = TheoryModel::new(up, Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap(), vec![1.0], 1).unwrap();
        assert_eq!(router_margin(&ok, &Matrix::identity(2)).unwrap(), 2.0);
    }

    #[test]
    fn invalid_signs_rejected() {
        let r = TheoryModel::new(vec![Matrix::zeros(2, 1)], Matrix::zeros(2, 1), vec![0.5], 1);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
