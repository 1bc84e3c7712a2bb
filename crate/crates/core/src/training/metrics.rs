//! Tab-separated per-step loss log. The column set is fixed at creation;
//! appending from a resumed run reuses the existing header. Floats print in
//! Rust's shortest-roundtrip form, so equal runs produce equal bytes.

use crate::error::{Error, Result};
use crate::objectives::LossReport;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct MetricsLog {
    path: PathBuf,
    file: std::fs::File,
    columns: Vec<&'static str>,
}

impl MetricsLog {
    /// Opens (appending) or creates the log for the given report shape.
    pub fn open(path: &Path, sample: &LossReport) -> Result<MetricsLog> {
        let columns: Vec<&'static str> = sample.entries().iter().map(|(n, _)| *n).collect();
        let existed = path.exists()
            && std::fs::metadata(path)
                .map(|m| m.len() > 0)
                .unwrap_or(false);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if existed {
            let header = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))?
                .lines()
                .next()
                .unwrap_or_default()
                .to_string();
            let expect = Self::header_line(&columns);
            if header != expect {
                return Err(Error::Data(format!(
                    "existing metrics log {} has columns `{header}`, expected `{expect}`",
                    path.display()
                )));
            }
        } else {
            writeln!(file, "{}", Self::header_line(&columns)).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
            columns,
        })
    }

    fn header_line(columns: &[&'static str]) -> String {
        let mut parts = vec!["step".to_string(), "epoch".to_string(), "lr".to_string()];
        parts.extend(columns.iter().map(|c| c.to_string()));
        parts.join("\t")
    }

    pub fn append(&mut self, step: u64, epoch: usize, lr: f64, report: &LossReport) -> Result<()> {
        let entries = report.entries();
        if entries.len() != self.columns.len()
            || entries.iter().zip(&self.columns).any(|((n, _), c)| n != c)
        {
            return Err(Error::Config(
                "loss report shape changed between steps".to_string(),
            ));
        }
        let mut line = format!("{step}\t{epoch}\t{lr}");
        for (_, v) in entries {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(total: f64) -> LossReport {
        LossReport {
            gan_g: 0.1,
            gan_f: 0.2,
            d_x: 0.3,
            d_y: 0.4,
            nce_x: 1.5,
            nce_y: 1.25,
            idt: 0.5,
            sim: None,
            cycle: None,
            total_g: total,
        }
    }

    #[test]
    fn header_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        let mut log = MetricsLog::open(&path, &report(0.0)).unwrap();
        log.append(0, 0, 1e-4, &report(7.0)).unwrap();
        log.append(1, 0, 1e-4, &report(6.5)).unwrap();
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "step\tepoch\tlr\tgan_G\tgan_F\td_X\td_Y\tnce_X\tnce_Y\tidt\ttotal_G"
        );
        assert!(lines[1].starts_with("0\t0\t0.0001\t"));
        assert!(lines[1].ends_with("\t7"));
    }

    #[test]
    fn reopening_appends_without_new_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        {
            let mut log = MetricsLog::open(&path, &report(0.0)).unwrap();
            log.append(0, 0, 1e-4, &report(7.0)).unwrap();
        }
        {
            let mut log = MetricsLog::open(&path, &report(0.0)).unwrap();
            log.append(1, 0, 1e-4, &report(6.0)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("step")).count(), 1);
    }

    #[test]
    fn mismatched_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        {
            let mut log = MetricsLog::open(&path, &report(0.0)).unwrap();
            log.append(0, 0, 1e-4, &report(7.0)).unwrap();
        }
        let with_sim = LossReport {
            sim: Some(1.0),
            ..report(0.0)
        };
        assert!(MetricsLog::open(&path, &with_sim).is_err());
    }
}
