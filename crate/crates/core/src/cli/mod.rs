//! Command-line plumbing: layered configuration, report files, plots and the
//! command implementations behind the `numvae` binary.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

pub use commands::RunConfig;
pub use config::{render_resolved, resolve, write_resolved, RawConfig, RESOLVED_CONFIG_FILE};
pub use plot::{profile_plot, render_profile_plot, render_traversal_grid, traversal_image};
pub use report::{emit_report, fmt_num, read_report, Report, ReportFormat};
