//! Ranking metrics, end-to-end evaluation, ablation suites and reports.

mod ablation;
mod metrics;
mod pipeline;
mod plot;
mod report;

pub use ablation::{run_ablation_suite, SuiteConfig, SuiteReport, Sweep, SweepParam, SweepPoint, SweepReport, Variant};
pub use metrics::{mean, ndcg_at_k, ndcg_name, ndcg_per_user, recall_at_k, recall_name, recall_per_user, RankedLists};
pub use pipeline::{
    generate_and_evaluate, inherit_vectors, metrics_of, rank_users, rankings_jsonl, tokenize, EvalConfig, GenerationRun, IdBundle, Tokenized,
    UserRanking,
};
pub use plot::{plot_lines, plot_sweep, plot_variant_bars};
pub use report::{ordered_names, paired_t_test, MetricReport, RunMetrics, VariantSummary};
