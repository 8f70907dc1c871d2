//! Run directories: manifest, line-delimited metric series and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nfrl_core::kv::KvText;

use crate::config::{RunConfig, META_PREFIX};
use crate::error::CliError;

pub const RUN_DIR_ENV: &str = "NFRL_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.nfrl";
/// Second model of runs that train two flows (the occupancy model of ugs).
pub const AUX_CHECKPOINT_FILE: &str = "aux.nfrl";

/// Crate version plus `git describe` of the build.
pub const CODE_VERSION: &str = nfrl_rl::GENERATOR_VERSION;

/// Output root: `$NFRL_RUN_DIR` if set, else `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

/// Appends one `key=value ...` line per record; the only writer of its run directory.
#[derive(Debug)]
pub struct MetricsSink {
    dir: PathBuf,
    series: BufWriter<File>,
}

impl MetricsSink {
    /// Creates `dir`, writes the manifest and truncates the metric series.
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest(config).to_string())?;
        let series = OpenOptions::new().create(true).write(true).truncate(true).open(dir.join(METRICS_FILE))?;
        Ok(Self { dir: dir.to_path_buf(), series: BufWriter::new(series) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// One record of series `series` at `step`.
    pub fn record(&mut self, series: &str, step: usize, values: &[(&str, f64)]) -> Result<(), CliError> {
        let mut kv = KvText::new();
        kv.set("series", series);
        kv.set("step", step);
        for (k, v) in values {
            kv.set(k, format!("{v:?}"));
        }
        writeln!(self.series, "{}", kv.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.series.flush()?;
        Ok(())
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        let _ = self.series.flush();
    }
}

/// Config snapshot plus code version; readable back as a config layer.
pub fn manifest(config: &RunConfig) -> KvText {
    let mut kv = KvText::new();
    kv.set(&format!("{META_PREFIX}code_version"), CODE_VERSION);
    kv.set(&format!("{META_PREFIX}seed"), config.seed);
    kv.overlay(&config.to_kv());
    kv
}

/// Parsed metric lines of a run, in file order.
pub fn read_metrics(dir: &Path) -> Result<Vec<KvText>, CliError> {
    let text = std::fs::read_to_string(dir.join(METRICS_FILE)).map_err(|e| CliError::Usage(format!("{}: {e}", dir.join(METRICS_FILE).display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| KvText::parse_line(l).map_err(|e| CliError::Usage(format!("metrics line: {e}"))))
        .collect()
}

/// Long-format table `run,series,step,metric,value` of one or more runs.
pub fn export_long<W: Write>(mut w: W, runs: &[PathBuf]) -> Result<usize, CliError> {
    writeln!(w, "run,series,step,metric,value")?;
    let mut rows = 0;
    for dir in runs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        for rec in read_metrics(dir)? {
            let series = rec.get("series").unwrap_or("");
            let step = rec.get("step").unwrap_or("");
            for (k, v) in rec.entries() {
                if k == "series" || k == "step" {
                    continue;
                }
                writeln!(w, "{name},{series},{step},{k},{v}")?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algorithm;

    #[test]
    fn manifest_reads_back_as_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::defaults(Algorithm::Gcbc);
        c.seed = 17;
        c.steps = 5;
        MetricsSink::create(dir.path(), &c).unwrap();
        let back = RunConfig::from_layers(&[&dir.path().join(MANIFEST_FILE)], &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn long_export_has_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r1");
        {
            let mut sink = MetricsSink::create(&run, &RunConfig::defaults(Algorithm::Bc)).unwrap();
            sink.record("train", 0, &[("loss", 1.5), ("lr", 0.001)]).unwrap();
            sink.record("eval", 10, &[("success", 0.5)]).unwrap();
        }
        let mut out = Vec::new();
        assert_eq!(export_long(&mut out, &[run]).unwrap(), 3);
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().any(|l| l == "r1,train,0,loss,1.5"));
        assert!(text.lines().any(|l| l == "r1,eval,10,success,0.5"));
    }
}
