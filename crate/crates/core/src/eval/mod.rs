//! Validation apparatus: kNN recall against full-scan ground truth,
//! leave-one-out retraining, correlation reports and the timing benchmark.

mod bench;
mod correlate;
mod recall;
mod retrain;

pub use bench::{benchmark, converged_lissa, fast_lissa, standard_variants, Sample, TimingReport, TimingRow, Variant};
pub use correlate::{average_ranks, correlate, correlate_shared, kendall_counts, kendall_tau_b, pearson, spearman, CorrelationReport};
pub use recall::{ground_truth_solver, mean_std, recall_at_m, recall_experiment, write_recall_csv, RecallConfig, RecallReport, Split};
pub use retrain::{loo_retrain, loo_train_config, sign_validation, LooOracle, RetrainReport, SignCheck};

#[cfg(test)]
mod tests;
