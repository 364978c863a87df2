//! Writes an experiment report to disk.

use std::path::{Path, PathBuf};

use r2n2::experiments::{ExperimentReport, Table};
use r2n2::superstructure::ParamsFile;
use r2n2::training::TrainingRun;

use crate::plot::emit_plot;
use crate::{CliError, Result};

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Loss history as `epoch,train_loss,test_loss` (empty test cells on
/// epochs without evaluation).
pub fn write_history(run: &TrainingRun, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "test_loss"])?;
    for r in &run.history {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            r.test_loss.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes every artifact of `report` into `dir` and returns the paths.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    let put = |name: String, contents: String| -> Result<PathBuf> {
        let path = dir.join(name);
        write(&path, &contents)?;
        Ok(path)
    };

    written.push(put("config.json".into(), to_json(&report.config)?)?);
    written.push(put("summary.json".into(), to_json(&report.summary)?)?);
    for (label, ds) in &report.datasets {
        written.push(put(format!("{label}.json"), ds.to_json()?)?);
    }
    for (label, run) in &report.runs {
        written.push(put(format!("{label}_manifest.json"), to_json(&run.manifest())?)?);
        written.push(put(
            format!("{label}_params.json"),
            ParamsFile::new(&run.params, &run.config).to_json()?,
        )?);
        let history = dir.join(format!("{label}_history.csv"));
        write_history(run, &history)?;
        written.push(history);
    }
    for table in &report.tables {
        let path = dir.join(format!("{}.csv", table.name));
        write_table(table, &path)?;
        written.push(path);
    }
    for plot in &report.plots {
        let csv = dir.join(format!("{}.csv", plot.table));
        written.push(emit_plot(&csv, plot.kind, plot.guide_slope)?);
    }
    Ok(written)
}
