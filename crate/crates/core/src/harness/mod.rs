//! Pipeline orchestration: configuration, training loops, artifacts and
//! the comparison report.

mod artifacts;
mod config;
mod pipeline;
mod report;
mod train;

pub use artifacts::{
    load_graph, load_params, save_graph, save_params, Metrics, GRAPH_FILE, LOG_FILE, METRICS_FILE, PARAMS_FILE,
};
pub use config::{
    variant_dir, BackboneConfig, BranchConfig, DataConfig, DetectorConfig, PipelineConfig, PruneConfig, VARIANTS,
};
pub use pipeline::{
    branch_scope, build_detector, classification_data, detection_data, detector_head, feature_node, make_plan,
    run_pipeline, stage_seed, PipelineOutcome, NUM_CLASSES,
};
pub use report::{collect, report, to_csv, ReportRow, RowValues, EXPECTED_FILE, REPORT_HEADER};
pub use train::{log_csv, train_detector, Teacher, TrainLogRow, TrainSchedule, LOG_HEADER};
