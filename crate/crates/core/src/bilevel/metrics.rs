//! Per-iteration training records and their CSV form.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "iteration,epoch,emp_loss,meta_loss,mean_kl,sigma_norm,meta_grad_sq,test_acc,wall_ms";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricRow {
    /// 1-based global iteration.
    pub iteration: usize,
    /// 0-based epoch.
    pub epoch: usize,
    pub emp_loss: Option<f64>,
    pub meta_loss: Option<f64>,
    pub mean_kl: Option<f64>,
    pub sigma_norm: Option<f64>,
    pub meta_grad_sq: Option<f64>,
    /// Set on the last iteration of each epoch.
    pub test_acc: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_field(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Data(format!("metrics line {line}: bad number `{s}`")))
}

impl RunMetrics {
    pub fn push(&mut self, row: MetricRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.iteration < row.iteration));
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn series(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(f).collect()
    }

    pub fn sigma_norms(&self) -> Vec<f64> {
        self.series(|r| r.sigma_norm)
    }

    pub fn meta_grad_sq(&self) -> Vec<f64> {
        self.series(|r| r.meta_grad_sq)
    }

    pub fn test_accuracies(&self) -> Vec<f64> {
        self.series(|r| r.test_acc)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.test_accuracies().last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let cols = [
                r.iteration.to_string(),
                r.epoch.to_string(),
                field(r.emp_loss),
                field(r.meta_loss),
                field(r.mean_kl),
                field(r.sigma_norm),
                field(r.meta_grad_sq),
                field(r.test_acc),
                field(r.wall_ms),
            ];
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Data("metrics header mismatch".into()));
        }
        let mut metrics = RunMetrics::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let line_no = i + 2;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(Error::Data(format!("metrics line {line_no}: expected 9 fields")));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Data(format!("metrics line {line_no}: bad integer `{s}`")))
            };
            metrics.rows.push(MetricRow {
                iteration: int(cols[0])?,
                epoch: int(cols[1])?,
                emp_loss: parse_field(cols[2], line_no)?,
                meta_loss: parse_field(cols[3], line_no)?,
                mean_kl: parse_field(cols[4], line_no)?,
                sigma_norm: parse_field(cols[5], line_no)?,
                meta_grad_sq: parse_field(cols[6], line_no)?,
                test_acc: parse_field(cols[7], line_no)?,
                wall_ms: parse_field(cols[8], line_no)?,
            });
        }
        Ok(metrics)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_fields() {
        let mut m = RunMetrics::default();
        m.push(MetricRow {
            iteration: 1,
            epoch: 0,
            emp_loss: Some(0.5),
            meta_grad_sq: Some(1e-7),
            ..Default::default()
        });
        m.push(MetricRow {
            iteration: 2,
            epoch: 0,
            test_acc: Some(0.75),
            ..Default::default()
        });
        let text = m.to_csv();
        assert!(text.starts_with("iteration,epoch,emp_loss,meta_loss,mean_kl,sigma_norm,meta_grad_sq,test_acc,wall_ms\n"));
        assert_eq!(text.lines().nth(2).unwrap(), "2,0,,,,,,0.75,");
        assert_eq!(RunMetrics::parse_csv(&text).unwrap(), m);
        assert_eq!(m.final_test_accuracy(), Some(0.75));
    }
}
