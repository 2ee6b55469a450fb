//! Segmentation metrics, subject evaluation and report aggregation.

pub mod eval;
pub mod overlap;
pub mod wilcoxon;

pub use overlap::{assd, boundary_points, dice_coefficient, Assd, BinaryMask};
pub use wilcoxon::{doubled_ranks, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N, MIN_NONZERO};
pub use eval::{
    aggregate_report, compare_slice, evaluate_checkpoint, evaluate_subject, method_name, write_pairwise_csv,
    write_report_csv, MethodResults, MetricsReport, PValue, PairRow, ReportRow, Skipped, SubjectEval, TaskResult,
    PAIRWISE_HEADER, REPORT_HEADER,
};
