use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::contrastive::LossBreakdown;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step\tlr\tl_rgb\tl_flow\tl_rf\tl_lmc\ttotal";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_rgb: f64,
    pub l_flow: f64,
    pub l_rf: f64,
    pub l_lmc: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            lr,
            l_rgb: b.l_rgb,
            l_flow: b.l_flow,
            l_rf: b.l_rf,
            l_lmc: b.l_lmc,
            total: b.total,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.lr, self.l_rgb, self.l_flow, self.l_rf, self.l_lmc, self.total]
    }
}

/// Append-only per-step log; the TSV holds only deterministic columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
    /// Wall-clock seconds per step, kept out of the TSV.
    pub step_seconds: Vec<f64>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid(format!(
                    "step {} does not follow step {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}", r.step);
            for v in r.values() {
                let _ = write!(s, "\t{:e}", v);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: "metrics.tsv".into(),
            msg: m,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(bad("unexpected metrics header".into()));
        }
        let mut log = MetricsLog::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(bad(format!("line {}: expected 7 columns", i + 2)));
            }
            let step = cols[0]
                .parse()
                .map_err(|_| bad(format!("line {}: bad step", i + 2)))?;
            let mut v = [0.0; 6];
            for (slot, c) in v.iter_mut().zip(&cols[1..]) {
                *slot = c
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad number '{}'", i + 2, c)))?;
            }
            log.push(StepRecord {
                step,
                lr: v[0],
                l_rgb: v[1],
                l_flow: v[2],
                l_rf: v[3],
                l_lmc: v[4],
                total: v[5],
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, total: f64) -> StepRecord {
        StepRecord {
            step,
            lr: 0.01,
            l_rgb: 1.0 / 3.0,
            l_flow: 2.0,
            l_rf: 0.0,
            l_lmc: 1e-300,
            total,
        }
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let mut log = MetricsLog::new();
        log.push(rec(0, 5.5)).unwrap();
        log.push(rec(1, std::f64::consts::PI)).unwrap();
        let back = MetricsLog::parse_tsv(&log.to_tsv()).unwrap();
        assert_eq!(back.records(), log.records());
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::new();
        log.push(rec(3, 1.0)).unwrap();
        assert!(log.push(rec(3, 1.0)).is_err());
        assert!(MetricsLog::parse_tsv("nope\n").is_err());
    }
}
