//! Experiment protocols: stratified splits, metrics, significance tests,
//! ablation drivers and report files.

pub mod ablate;
pub mod metrics;
mod report;
mod splits;
mod ttest;

pub use ablate::{
    checkpoint_features, checkpoint_iters_ablation, data_ratio_ablation, few_ratio_ablation,
    kfold_probe_eval, load_corpus_patches, report_rows_for_series, DEFAULT_FEW_RATIOS,
};
pub use metrics::{accuracy, auc_ovr, balanced_accuracy, macro_f1, AucResult, Confusion};
pub use report::{
    append_report_rows, read_report_rows, write_summary_csv, FoldMetrics, MetricsReport,
    ReportRow,
};
pub use splits::{stratified_split, subsample_ratio, SplitPlan, SplitScheme};
pub use ttest::{paired_t_test, reg_inc_beta, two_sided_p, TTest};
