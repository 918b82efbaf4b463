//! Reconstruction and ranking metrics plus the analysis sweeps.

mod metrics;
mod ranking;
mod sweeps;

pub use metrics::{
    bleu, lcs_len, metric_tokens, reconstruction_metrics, rouge1, rouge_l, token_f1, MetricSummary,
    ReconstructionReport,
};
pub use ranking::{ranking_metrics, spearman, RankingReport};
pub use sweeps::{
    assignment_map, compression_csv, compression_sweep, forgetting_csv, forgetting_curve, hit_permutation_test,
    noise_sweep, reconstruct_with, reconstruction_summary, retrieval_eval, AssignmentMap, ForgetRow, LengthRow,
    NoiseRow, NoiseTable, ReconSettings, RetrievalQuery,
};

#[cfg(test)]
mod tests;
