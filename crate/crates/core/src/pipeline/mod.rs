//! Data ingestion, the robustness benchmark, the architecture comparison and
//! the coupling analysis driver.

mod ablate;
mod benchmark;
mod coupling;
mod dataset;

pub use ablate::{ablate, ablation_protocol, AblationCell, AblationReport, AblationRow, ParamCounts, ABLATION_QUALITIES};
pub use benchmark::{
    default_sweeps, evaluate, run_plan, thread_count, with_thread_pool, BenchmarkPlan, BenchmarkReport, BenchmarkRow,
    CellSummary, Protocol, Sweep, CSV_HEADER, THREADS_ENV,
};
pub use coupling::{analysis_message, analyze, analyze_image, CouplingPanels, CouplingRecord};
pub use dataset::{image_files, load_dataset, load_image, load_named, prepare_image, save_png};
