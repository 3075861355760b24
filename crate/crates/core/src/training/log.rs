//! Per-step training log as CSV.
//!
//! The first line is a `#` comment with the variant, seed and config hash;
//! the second is the column header. Floats are written in shortest
//! round-trip form so two identical runs produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::LossReport;

use super::schedule::ParamGroup;

pub const COLUMNS: [&str; 12] = [
    "epoch",
    "step",
    "location_loss",
    "view_loss",
    "adversarial_loss",
    "combined_loss",
    "alpha",
    "lr_backbone",
    "lr_encoder_rest",
    "lr_classifier",
    "lr_discriminator",
    "batch_size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    /// Batch sums.
    pub report: LossReport,
    /// Effective rates by [`ParamGroup::index`].
    pub lrs: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub header: String,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn new(config: &Config) -> Self {
        Self {
            header: format!(
                "# variant={} seed={} config_hash={}",
                config.schedule.variant,
                config.seed,
                config.hash()
            ),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.header);
        s.push('\n');
        s.push_str(&COLUMNS.join(","));
        s.push('\n');
        for r in &self.rows {
            let p = &r.report;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.step, p.location_loss, p.view_loss, p.adversarial_loss, p.combined, p.alpha
            );
            for g in ParamGroup::ALL {
                let _ = write!(s, ",{}", r.lrs[g.index()]);
            }
            let _ = writeln!(s, ",{}", p.batch_size);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("training log line {line}: {what}"));
        let mut lines = text.lines().enumerate();
        let header = match lines.next() {
            Some((_, h)) if h.starts_with('#') => h.to_string(),
            _ => return Err(bad(1, "missing metadata line")),
        };
        match lines.next() {
            Some((_, c)) if c == COLUMNS.join(",") => {}
            _ => return Err(bad(2, "unexpected column header")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(i + 1, "wrong number of fields"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
            rows.push(LogRow {
                epoch: int(0)?,
                step: int(1)?,
                report: LossReport {
                    location_loss: num(2)?,
                    view_loss: num(3)?,
                    adversarial_loss: num(4)?,
                    combined: num(5)?,
                    alpha: num(6)?,
                    batch_size: int(11)?,
                },
                lrs: [num(7)?, num(8)?, num(9)?, num(10)?],
            });
        }
        Ok(Self { header, rows })
    }

    /// Mean per-sample losses of one epoch, for progress messages.
    pub fn epoch_summary(&self, epoch: usize) -> String {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        if rows.is_empty() {
            return String::new();
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&LossReport) -> f64| rows.iter().map(|r| f(&r.report.per_sample())).sum::<f64>() / n;
        format!(
            "loc {:.4} view {:.4} adv {:.4}",
            mean(&|r| r.location_loss),
            mean(&|r| r.view_loss),
            mean(&|r| r.adversarial_loss)
        )
    }

    /// Per-epoch means of the per-sample losses: `(epoch, loc, view, adv, combined)`.
    pub fn epoch_means(&self) -> Vec<(usize, [f64; 4])> {
        let mut out: Vec<(usize, [f64; 4], usize)> = Vec::new();
        for r in &self.rows {
            let p = r.report.per_sample();
            let v = [p.location_loss, p.view_loss, p.adversarial_loss, p.combined];
            match out.last_mut() {
                Some((e, acc, n)) if *e == r.epoch => {
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += x;
                    }
                    *n += 1;
                }
                _ => out.push((r.epoch, v, 1)),
            }
        }
        out.into_iter().map(|(e, acc, n)| (e, acc.map(|a| a / n as f64))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, step: usize, x: f64) -> LogRow {
        LogRow {
            epoch,
            step,
            report: LossReport::new(x, 0.1 * x, 1.0 / 3.0, 0.9, 8).unwrap(),
            lrs: [0.001, 0.01, 0.0064, 0.002],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let log = TrainLog { header: "# test".into(), rows: vec![row(0, 0, 1.234567890123), row(0, 1, 2.0), row(1, 0, 1e-17)] };
        let back = TrainLog::parse(&log.to_csv()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn epoch_means_average_rows() {
        let log = TrainLog { header: "#".into(), rows: vec![row(0, 0, 8.0), row(0, 1, 16.0), row(1, 0, 4.0)] };
        let m = log.epoch_means();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].1[0], 1.5);
        assert_eq!(m[1].1[0], 0.5);
    }

    #[test]
    fn rejects_malformed() {
        assert!(TrainLog::parse("epoch,step\n").is_err());
        let text = format!("#\n{}\n1,2,3\n", COLUMNS.join(","));
        assert!(TrainLog::parse(&text).is_err());
    }
}
