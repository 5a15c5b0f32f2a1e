//! Metric logs written as CSV.

use std::fmt::Write as _;

use crate::error::{ExperimentError, Result};

pub const METRICS_HEADER: &str = "iteration,loss,residual,fid_sw_3,fid_sw_4,fid_sw_8,straightness_4,seconds";

/// Student step counts behind the `fid_sw_*` columns.
pub const LOGGED_STEPS: [usize; 3] = [3, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    /// NaN before the first update.
    pub loss: f64,
    pub residual: f64,
    /// Fidelity at 3, 4 and 8 student steps.
    pub fidelity: [f64; 3],
    pub straightness_4: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss,
            self.residual,
            self.fidelity[0],
            self.fidelity[1],
            self.fidelity[2],
            self.straightness_4,
            self.seconds
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(ExperimentError::Format(format!("metrics row has {} fields: {line}", fields.len())));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| ExperimentError::Format(format!("bad number {:?} in metrics row", fields[i])))
        };
        Ok(MetricsRecord {
            iteration: fields[0]
                .parse()
                .map_err(|_| ExperimentError::Format(format!("bad iteration {:?}", fields[0])))?,
            loss: f(1)?,
            residual: f(2)?,
            fidelity: [f(3)?, f(4)?, f(5)?],
            straightness_4: f(6)?,
            seconds: f(7)?,
        })
    }
}

/// Records in strictly increasing iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(ExperimentError::Format(format!(
                    "iteration {} does not follow {}",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == METRICS_HEADER => {}
            other => {
                return Err(ExperimentError::Format(format!("unexpected metrics header {other:?}")));
            }
        }
        let mut log = MetricsLog::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            log.push(MetricsRecord::parse_row(line)?)?;
        }
        Ok(log)
    }
}

/// `iteration,loss` rows of a teacher run.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, l);
    }
    out
}
