//! Pose-error scoring, trajectory integration, report rendering and
//! hardware-metric capture.

mod hardware;
mod report;
mod rmse;

pub use hardware::{
    capture_hardware_metrics, parse_numeric_line, CommandProbe, HardwareMetrics, HardwareProbe, Reading, StubProbe,
};
pub use report::{
    bar_chart_svg, harbor_baselines, render_reports, text_table, BaselineRow, ReportDocument, ReportFiles, Units,
    REFERENCE_LABEL, RMSE_DEFINITION,
};
pub use rmse::{
    compute_rmse, compute_rmse_with, evaluate_sequence, integrate_trajectory, mean_rmse, split_three, RmseConvention,
    RmseReport, RotationError,
};
