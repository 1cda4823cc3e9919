//! Run directories: `<root>/<timestamp>-<hash8>/` with `record.json`,
//! `config.json`, one CSV per table and any extra files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::record::RunRecord;

/// Root used when neither `--out` nor `BDLAB_OUT_DIR` is given.
pub const DEFAULT_ROOT: &str = "runs";

pub fn run_dir_name(record: &RunRecord) -> String {
    let stamp = chrono::DateTime::parse_from_rfc3339(&record.started_at)
        .map(|t| t.format("%Y%m%dT%H%M%S%.3f").to_string())
        .unwrap_or_else(|_| "unknown".into());
    format!("{stamp}-{}", record.config_hash)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes the run directory under `root` and returns its path.
pub fn write_run(
    root: &Path,
    record: &RunRecord,
    files: &[(String, String)],
) -> Result<PathBuf, CliError> {
    let dir = root.join(run_dir_name(record));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(
        &dir.join("record.json"),
        &serde_json::to_string_pretty(record)?,
    )?;
    write(
        &dir.join("config.json"),
        &serde_json::to_string_pretty(&record.config)?,
    )?;
    for table in &record.tables {
        write(&dir.join(format!("{}.csv", table.name)), &table.to_csv())?;
    }
    for (name, contents) in files {
        write(&dir.join(name), contents)?;
    }
    Ok(dir)
}

/// Reads `record.json` from a file path or a run directory.
pub fn load_record(path: &Path) -> Result<RunRecord, CliError> {
    let file = if path.is_dir() {
        path.join("record.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::record::{Check, Table};

    fn record() -> RunRecord {
        let cfg = ExperimentConfig::default();
        let mut table = Table::new("sweep", &["level", "lhs"]);
        table.push(vec![1.0, 0.25]);
        RunRecord {
            version: "test".into(),
            experiment: cfg.experiment.clone(),
            config_hash: cfg.hash8(),
            config: cfg,
            started_at: "2026-01-02T03:04:05.678Z".into(),
            wall_clock_secs: 0.5,
            threads: 1,
            results: serde_json::json!({"x": 1.5}),
            tables: vec![table],
            checks: vec![Check::at_least("c", 1.0, 0.0)],
            passed: true,
            error: None,
        }
    }

    #[test]
    fn writes_and_reloads_a_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let r = record();
        let dir = write_run(tmp.path(), &r, &[("trace.jsonl".into(), "{}\n".into())]).unwrap();
        assert_eq!(
            dir.file_name().unwrap().to_str().unwrap(),
            format!("20260102T030405.678-{}", r.config_hash)
        );
        for f in ["record.json", "config.json", "sweep.csv", "trace.jsonl"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        assert_eq!(load_record(&dir).unwrap(), r);
        assert_eq!(load_record(&dir.join("record.json")).unwrap(), r);
        let cfg =
            ExperimentConfig::from_json(&fs::read_to_string(dir.join("config.json")).unwrap())
                .unwrap();
        assert_eq!(cfg, r.config);
    }

    #[test]
    fn missing_record_is_an_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_record(tmp.path()), Err(CliError::Io { .. })));
    }
}
