//! Metrics CSV with a fixed column order. Missing values are empty fields.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "step,flow_current,flow_future,kl,reward_mse,critic,actor,eval_return_mean,eval_return_std,wall_ms";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub flow_current: Option<f64>,
    pub flow_future: Option<f64>,
    pub kl: Option<f64>,
    pub reward_mse: Option<f64>,
    pub critic: Option<f64>,
    pub actor: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub wall_ms: u64,
}

fn cell(v: Option<f64>) -> String {
    // `{:?}` prints the shortest representation that round-trips exactly.
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.flow_current),
            cell(self.flow_future),
            cell(self.kl),
            cell(self.reward_mse),
            cell(self.critic),
            cell(self.actor),
            cell(self.eval_return_mean),
            cell(self.eval_return_std),
            self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |d: String| Error::Format { what: "metrics row", detail: d };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("{} fields in `{line}`", f.len())));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("`{s}` is not a number")))
            }
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| bad(format!("step `{}`", f[0])))?,
            flow_current: opt(f[1])?,
            flow_future: opt(f[2])?,
            kl: opt(f[3])?,
            reward_mse: opt(f[4])?,
            critic: opt(f[5])?,
            actor: opt(f[6])?,
            eval_return_mean: opt(f[7])?,
            eval_return_std: opt(f[8])?,
            wall_ms: f[9].parse().map_err(|_| bad(format!("wall_ms `{}`", f[9])))?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format { what: "metrics file", detail: "unexpected header".into() });
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// Appends rows, flushing each one so a crash leaves a readable file.
pub struct MetricsWriter {
    file: fs::File,
    last_step: Option<usize>,
}

impl MetricsWriter {
    /// Fresh file with only the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file, last_step: None })
    }

    /// Keep rows up to `step` from an existing file (if any), passed through
    /// `replay` (which may rewrite or drop them), then append.
    pub fn resume(path: &Path, step: usize, replay: impl Fn(MetricsRow) -> Option<MetricsRow>) -> Result<Self> {
        let kept = if path.exists() { read_metrics(path)? } else { Vec::new() };
        let mut w = Self::create(path)?;
        for r in kept.into_iter().filter(|r| r.step <= step).filter_map(replay) {
            w.write(&r)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::Format { what: "metrics row", detail: format!("step {} is not increasing", row.step) });
        }
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let r = MetricsRow { step: 5, flow_current: Some(0.1), kl: Some(1e-17), eval_return_mean: Some(16.0), ..Default::default() };
        assert_eq!(r.to_csv(), "5,0.1,,1e-17,,,,16.0,,0");
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        assert!(MetricsRow::parse("1,2").is_err());
    }

    #[test]
    fn resume_truncates_and_steps_increase() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p).unwrap();
        for s in [10, 20, 30] {
            w.write(&MetricsRow { step: s, ..Default::default() }).unwrap();
        }
        assert!(w.write(&MetricsRow { step: 30, ..Default::default() }).is_err());
        drop(w);
        let mut w = MetricsWriter::resume(&p, 20, |r| (r.step != 10).then_some(r)).unwrap();
        w.write(&MetricsRow { step: 25, ..Default::default() }).unwrap();
        drop(w);
        let steps: Vec<_> = read_metrics(&p).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![20, 25]);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with(METRICS_HEADER));
    }
}
