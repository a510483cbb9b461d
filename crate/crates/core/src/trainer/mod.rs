//! Training of the analyzable MoE on the synthetic task.
//!
//! The model is `f(X) = sum_s a_s sum_{j in J_s} G_j^s sum_r relu(<w_r^s, x_j>)`
//! where `J_s` holds the `l` tokens expert `s` picks by router score and `G^s`
//! is the softmax of those scores. It is equal to the MoE block with fixed
//! down projections `a_s * ones(m, d)` followed by the head
//! `(1/d) sum_j 1^T x_out_j`.
//!
//! Gradients are taken on the surrogate `1 - y f` for every sample, including
//! samples whose hinge `max(1 - y f, 0)` is already zero. Routing selections
//! are treated as constants; the router receives the gradient through the
//! softmax weights.

mod experiments;
mod model;
mod train;

pub use experiments::{
    binomial_two_sided_p, classify_specialization, compare_partitions, lemma1_report,
    train_runs_any_alpha,
    run_lemma1_experiment, run_theorem1_experiment, theorem1_report, train_run, train_runs,
    CompareConfig, CompareCurve, CompareReport, CompareSummary, GammaChoice, Lemma1Report,
    Lemma1Seed, NoiseSweepConfig, Specialization, TestSet, Theorem1Report, Theorem1Seed,
    TrainedRun,
};
pub use model::{
    expert_choice_selection, forward_block, forward_theory, forward_with_selection,
    covers_relevant_tokens, router_margin, surrogate_grads, Grads, TheoryModel,
};
pub use train::{
    hinge_loss_and_grads, probe_specialization, train, History, HistoryRecord,
    SpecializationProbe, TrainConfig,
};
