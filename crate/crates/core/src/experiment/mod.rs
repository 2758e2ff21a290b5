//! End-to-end experiments from a single config file.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod synthetic;

use std::path::{Path, PathBuf};

pub use config::{
    AlignmentConfig, DataSource, EvalConfig, ExperimentConfig, ModalitySource, RenderSource,
};
pub use pipeline::{check_complete, history_tokens, read_json, write_bytes, Pipeline, RunGuard, RunOutcome, Stage};
pub use report::{emit_report, HarnessReport, HarnessRow, ReportFormat};
pub use synthetic::{SyntheticData, SyntheticStudy};

use crate::error::{Error, Result};

/// Full pipeline; the report is written as `report.{json,csv,txt}` under the output directory.
pub fn run_experiment(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<RunOutcome> {
    Pipeline::new(cfg, out)?
        .run(Stage::Eval)?
        .ok_or_else(|| Error::Contract("evaluation stage produced no outcome".into()))
}

/// Repeats the experiment once per rendering resolution, each in
/// `out/res-{r}`, and writes `harness.{json,csv,txt}` under `out`.
pub fn run_resolution_harness(cfg: &ExperimentConfig, resolutions: &[usize], out: &Path) -> Result<HarnessReport> {
    cfg.validate()?;
    let render = cfg
        .render_source()
        .ok_or_else(|| Error::Config("the resolution harness needs a `render` modality source".into()))?
        .clone();
    if resolutions.is_empty() {
        return Err(Error::Config("no resolutions given".into()));
    }
    for &r in resolutions {
        config::check_resolution(&render.render, r)?;
    }
    let mut rows = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let mut c = cfg.clone();
        for src in [&mut c.text, &mut c.image].into_iter().flatten() {
            if let ModalitySource::Render(rs) = src {
                rs.resolution = r;
            }
        }
        let outcome = run_experiment(c, Some(out.join(format!("res-{r}"))))?;
        rows.push(HarnessRow {
            resolution: r,
            report: outcome.report,
        });
    }
    let report = HarnessReport::new(&cfg.name, cfg.fusion.as_str(), rows)?;
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Table] {
        write_bytes(&out.join(format!("harness.{}", f.extension())), report.emit(f)?.as_bytes())?;
    }
    Ok(report)
}
