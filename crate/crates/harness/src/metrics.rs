//! Per-epoch metrics records and JSON-lines output.

use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{HarnessError, Result};

/// `correct / total` kept exact until formatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        assert!(total > 0 && correct <= total, "accuracy {correct}/{total}");
        Self { correct, total }
    }

    pub fn ratio(self) -> Ratio<u64> {
        Ratio::new(self.correct, self.total)
    }

    pub fn value(self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub mode: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub train_acc_exact: String,
    pub test_acc: f64,
    pub test_acc_exact: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_ratio: f64,
}

impl MetricsRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        phase: &str,
        mode: &str,
        epoch: usize,
        lr: f64,
        loss: f64,
        train: Accuracy,
        test: Accuracy,
        trainable: usize,
        total: usize,
    ) -> Self {
        Self {
            phase: phase.into(),
            mode: mode.into(),
            epoch,
            lr,
            loss,
            train_acc: train.value(),
            train_acc_exact: train.ratio().to_string(),
            test_acc: test.value(),
            test_acc_exact: test.ratio().to_string(),
            trainable_params: trainable,
            total_params: total,
            trainable_ratio: trainable as f64 / total as f64,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record") + "\n"
    }
}

/// Appends JSON lines to a file, or collects them in memory when no path is given.
pub struct MetricsSink {
    file: Option<(std::fs::File, String)>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self {
            file: None,
            records: Vec::new(),
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            file: Some((f, path.display().to_string())),
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some((f, path)) = &mut self.file {
            f.write_all(rec.to_json_line().as_bytes())
                .map_err(|e| HarnessError::io(path.as_str(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_is_reduced_exactly() {
        let a = Accuracy::new(30, 300);
        assert_eq!(a.ratio().to_string(), "1/10");
        assert_eq!(a.value(), 0.1);
    }

    #[test]
    fn record_serializes_as_one_line() {
        let r = MetricsRecord::new("tune", "pcsa", 0, 0.05, 1.25, Accuracy::new(1, 2), Accuracy::new(3, 3), 10, 100);
        let line = r.to_json_line();
        assert_eq!(line.matches('\n').count(), 1);
        assert!(line.contains("\"test_acc_exact\":\"1\""));
        assert!(line.contains("\"trainable_ratio\":0.1"));
    }
}
