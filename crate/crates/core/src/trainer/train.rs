use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Grads, Tables, TheoryModel, VocabGrads};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::synthetic::{Relevant, SequenceSample, Task};

/// Samples per parallel gradient chunk; partial sums are reduced in chunk
/// order so results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// SGD steps `T`.
    pub steps: usize,
    /// Batch size `B`.
    pub batch_size: usize,
    /// Expert (up projection) learning rate.
    pub eta_e: f64,
    /// Router learning rate.
    pub eta_r: f64,
    pub k: usize,
    pub m: usize,
    /// Expert-choice capacity.
    pub l: usize,
    /// Output sign per expert; defaults to `+1` for the first `ceil(k/2)`
    /// experts and `-1` for the rest.
    pub signs: Option<Vec<f64>>,
    pub init_scale_up: f64,
    pub init_scale_router: f64,
    /// Training aborts once any weight exceeds this magnitude.
    pub weight_bound: f64,
    /// History cadence in steps (0 records only the first and last step).
    pub record_every: usize,
    /// Specialization probe cadence in steps (0 disables probes in history).
    pub probe_every: usize,
    /// Sequences per relevant token in a specialization probe.
    pub probe_size: usize,
    /// Held-out sequences for the loss recorded in history.
    pub eval_size: usize,
    /// An expert counts as specialized on `v` when `p_v` reaches this value.
    pub specialization_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            eta_e: 0.05,
            eta_r: 0.0005,
            k: 8,
            m: 16,
            l: 2,
            signs: None,
            init_scale_up: 0.05,
            init_scale_router: 0.05,
            weight_bound: 1e6,
            record_every: 100,
            probe_every: 0,
            probe_size: 200,
            eval_size: 512,
            specialization_threshold: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn signs(&self) -> Vec<f64> {
        match &self.signs {
            Some(s) => s.clone(),
            None => (0..self.k)
                .map(|s| if s < self.k.div_ceil(2) { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 || self.m == 0 || self.l == 0 {
            return bad("k, m and l must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("eta_e", self.eta_e), ("eta_r", self.eta_r)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [
            ("init_scale_up", self.init_scale_up),
            ("init_scale_router", self.init_scale_router),
            ("weight_bound", self.weight_bound),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if !(self.specialization_threshold > 0.0 && self.specialization_threshold <= 1.0) {
            return bad("specialization_threshold must be in (0, 1]".into());
        }
        if self.probe_size == 0 {
            return bad("probe_size must be positive".into());
        }
        let signs = self.signs();
        if signs.len() != self.k || signs.iter().any(|&a| a != 1.0 && a != -1.0) {
            return bad(format!("signs must hold {} entries in {{+1, -1}}", self.k));
        }
        let positive = signs.iter().filter(|&&a| a > 0.0).count() as f64;
        let imbalance = (2.0 * positive - self.k as f64).abs();
        let allowed = (self.k as f64).sqrt().round();
        if imbalance > allowed {
            return bad(format!(
                "sign imbalance {imbalance} exceeds round(sqrt(k)) = {allowed}"
            ));
        }
        Ok(())
    }
}

/// Mean hinge loss `max(1 - y f, 0)` of a batch and the mean gradients of the
/// surrogate `1 - y f`.
pub fn hinge_loss_and_grads(model: &TheoryModel, task: &Task, batch: &[SequenceSample]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let tables = Tables::new(model, task.vocab())?;
    let (loss, acc) = batch_terms(model, &tables, batch);
    let b = batch.len() as f64;
    let grads = acc.to_grads(task.vocab(), model.k(), model.m(), 1.0 / b)?;
    Ok((loss / b, grads))
}

fn batch_terms(model: &TheoryModel, tables: &Tables, batch: &[SequenceSample]) -> (f64, VocabGrads) {
    let (k, m, p) = (model.k(), model.m(), tables.vocab_size());
    let partials: Vec<(f64, VocabGrads)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = VocabGrads::zeros(k, m, p);
            let mut loss = 0.0;
            for s in chunk {
                let routes = tables.route(&s.tokens, model.l());
                let f = tables.forward(model.signs(), &s.tokens, &routes);
                loss += (1.0 - s.label * f).max(0.0);
                tables.accumulate(model.signs(), &s.tokens, &routes, -s.label, &mut acc);
            }
            (loss, acc)
        })
        .collect();
    let mut total = VocabGrads::zeros(k, m, p);
    let mut loss = 0.0;
    for (l, acc) in &partials {
        loss += l;
        total.add(acc);
    }
    (loss, total)
}

/// Mean hinge loss without gradients.
pub(crate) fn mean_hinge(model: &TheoryModel, tables: &Tables, samples: &[SequenceSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let routes = tables.route(&s.tokens, model.l());
            (1.0 - s.label * tables.forward(model.signs(), &s.tokens, &routes)).max(0.0)
        })
        .sum();
    total / samples.len() as f64
}

/// Specialization estimates per expert and relevant token, indexed like
/// [`Relevant::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationProbe {
    /// `p[s][v]`: fraction of probe sequences holding `v` in which expert `s`
    /// gives `v` a routing weight of at least `1/l`.
    pub p: Vec<[f64; 4]>,
    /// `p_bar[s][v]`: fraction in which `v` is among expert `s`'s selections.
    pub p_bar: Vec<[f64; 4]>,
    pub probe_size: usize,
}

impl SpecializationProbe {
    pub fn p_of(&self, s: usize, v: Relevant) -> f64 {
        self.p[s][relevant_index(v)]
    }

    pub fn p_bar_of(&self, s: usize, v: Relevant) -> f64 {
        self.p_bar[s][relevant_index(v)]
    }
}

pub(crate) fn relevant_index(v: Relevant) -> usize {
    Relevant::ALL.iter().position(|&r| r == v).expect("listed")
}

/// Monte-Carlo specialization estimates over `probe_size` sequences per
/// relevant token, drawn from the sampler conditioned on that token.
pub fn probe_specialization(
    model: &TheoryModel,
    task: &Task,
    probe_size: usize,
    rng: &mut RngStream,
) -> Result<SpecializationProbe> {
    if probe_size == 0 {
        return Err(Error::param("probe_size must be at least 1"));
    }
    let tables = Tables::new(model, task.vocab())?;
    let k = model.k();
    let threshold = 1.0 / model.l() as f64;
    let mut p = vec![[0.0; 4]; k];
    let mut p_bar = vec![[0.0; 4]; k];
    for (vi, &v) in Relevant::ALL.iter().enumerate() {
        for _ in 0..probe_size {
            let sample = task.sample_with(v, rng);
            for (s, route) in tables.route(&sample.tokens, model.l()).iter().enumerate() {
                if let Some(&(_, g)) = route.iter().find(|&&(j, _)| j == sample.position) {
                    p_bar[s][vi] += 1.0;
                    // Tolerance for softmax rounding at exact ties.
                    if g >= threshold - 1e-12 {
                        p[s][vi] += 1.0;
                    }
                }
            }
        }
    }
    let n = probe_size as f64;
    for row in p.iter_mut().chain(p_bar.iter_mut()) {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(SpecializationProbe { p, p_bar, probe_size })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    /// Mean hinge loss of the batch drawn at this step.
    pub batch_loss: f64,
    /// Mean hinge loss on a fixed held-out set.
    pub eval_loss: f64,
    pub max_nn_scores: Vec<f64>,
    pub probe: Option<SpecializationProbe>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn first(&self) -> Option<&HistoryRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

/// `cfg.steps` SGD steps on fresh batches from `task`. Records the state
/// before the first update, every `record_every` steps and after the last
/// update.
pub fn train(
    mut model: TheoryModel,
    task: &Task,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(TheoryModel, History)> {
    cfg.validate()?;
    let mut data = rng.derive(0);
    let mut eval_rng = rng.derive(1);
    let mut probe_rng = rng.derive(2);
    let eval_set = task.sample_many(cfg.eval_size.max(1), &mut eval_rng);
    let mut history = History::default();
    let vocab = task.vocab();
    let b = cfg.batch_size as f64;
    for step in 0..=cfg.steps {
        let tables = Tables::new(&model, vocab)?;
        let batch = task.sample_many(cfg.batch_size, &mut data);
        let (loss, acc) = batch_terms(&model, &tables, &batch);
        let record = step == 0
            || step == cfg.steps
            || (cfg.record_every > 0 && step % cfg.record_every == 0);
        if record {
            let probe = if cfg.probe_every > 0 && step % cfg.probe_every == 0 {
                Some(probe_specialization(&model, task, cfg.probe_size, &mut probe_rng)?)
            } else {
                None
            };
            history.records.push(HistoryRecord {
                step,
                batch_loss: loss / b,
                eval_loss: mean_hinge(&model, &tables, &eval_set),
                max_nn_scores: model.max_nn_scores(),
                probe,
            });
        }
        if step == cfg.steps {
            break;
        }
        if cfg.eta_e == 0.0 && cfg.eta_r == 0.0 {
            continue;
        }
        let grads = acc.to_grads(vocab, model.k(), model.m(), 1.0 / b)?;
        let (up, router) = model.parts_mut();
        for (w, g) in up.iter_mut().zip(&grads.up) {
            w.axpy(-cfg.eta_e, g)?;
        }
        router.axpy(-cfg.eta_r, &grads.router)?;
        let largest = model.max_abs_weight();
        if largest > cfg.weight_bound {
            return Err(Error::Divergence {
                step: step + 1,
                detail: format!(
                    "weight magnitude {largest:.3e} exceeds bound {:.3e}",
                    cfg.weight_bound
                ),
            });
        }
    }
    Ok((model, history))
}
