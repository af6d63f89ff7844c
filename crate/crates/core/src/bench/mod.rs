//! Synthetic line-retrieval tasks, fidelity against the uncompressed model,
//! and grid sweeps with CSV / JSON output.
//!
//! Every cell is teacher-forced on the baseline's greedy continuation, so
//! per-position errors compare like with like. Retrieval is scored on a
//! separate free-running generation.

mod emit;
mod fidelity;
mod sweep;
mod task;

pub use emit::{
    csv_rows, emit_csv, emit_plot_data, plot_data, read_csv, render_summary, summarize, CellSeries,
    CsvRow, CurveSeries, PlotData, SummaryRow, CSV_HEADER,
};
pub use fidelity::{layer_residuals, output_fidelity, teacher_forced, FidelityReport, Run};
pub use sweep::{
    baseline_grid, baseline_run, evaluate_cell, init_grid, kv_split_grid, matched_budget,
    quant_grid, run_sweep, window_grid, BaselineRun, CellMetrics, CellResult, CellSpec, FitRecord,
    FitSpec, Method, QuantMode, SweepConfig, SweepResult, TaskSpec, ABLATION_RATIOS,
    KV_SPLIT_TOTALS, WINDOW_GRID,
};
pub use task::{
    calibration_streams, gen_lines_task, score_retrieval, RetrievalScore, RetrievalTask,
    VocabProfile, VALUE_DIGITS,
};

#[cfg(test)]
mod tests;
