//! Scores, the score matrix and the performance / robustness suite.

mod matrix;
mod report;
mod score;
mod strata;

pub use matrix::{ScoreKind, ScoreMatrix};
pub use report::{BestEval, MetricsReport, StratumReport, TrainSetRow};
pub use score::{
    accuracy, argmax, average_precision, evaluate, evaluate_sets, logits_for_sets, mean_average_precision,
    score_logits,
};
pub use strata::{aggregate, best_eval_sets, enumerate_pairs, performance, robustness, Aggregate, Stratum};
