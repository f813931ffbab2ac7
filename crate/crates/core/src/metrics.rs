//! Accuracy matrix and the Transfer / Average / Last continual-learning metrics.
//!
//! Row `i ≥ 1` holds accuracies after training on the `i`-th task; the
//! optional row 0 holds the pre-stream model. Columns are the continual
//! domains in training order plus, optionally, a held-out column named
//! [`REFERENCE_COLUMN`] that is never trained on.
//!
//! For task column `j` (1-indexed):
//! - Transfer: mean of rows `1..j` (absent for `j = 1`; row 0 is excluded),
//! - Average: mean of rows `1..=T`,
//! - Last: row `T`.
//!
//! The reference column's Transfer is the mean of rows `1..=T`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REFERENCE_COLUMN: &str = "reference";

/// Whether the zero-shot row takes part in Transfer averages.
pub const TRANSFER_INCLUDES_ZERO_SHOT: bool = false;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("incomplete accuracy matrix: {0}")]
    Incomplete(String),
    #[error("accuracy {value} at step {step}, column `{column}` is outside [0, 1]")]
    OutOfRange { step: usize, column: String, value: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed accuracy csv: {0}")]
    Format(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyMatrix {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    /// Builds a matrix from rows `1..=T` over task columns only.
    pub fn from_task_rows(rows: &[Vec<f64>]) -> Self {
        let columns = (1..=rows.first().map_or(0, Vec::len))
            .map(|j| format!("task_{j}"))
            .collect();
        Self {
            columns,
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, values)| AccuracyRow {
                    step: i + 1,
                    values: values.clone(),
                })
                .collect(),
        }
    }

    pub fn push_row(&mut self, step: usize, values: Vec<f64>) {
        self.rows.push(AccuracyRow { step, values });
    }

    pub fn reference_index(&self) -> Option<usize> {
        self.columns.iter().position(|c| c == REFERENCE_COLUMN)
    }

    /// Continual-domain column indices in training order.
    pub fn task_indices(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&j| self.columns[j] != REFERENCE_COLUMN)
            .collect()
    }

    pub fn row(&self, step: usize) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|r| r.step == step)
            .map(|r| r.values.as_slice())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_indices().len()
    }

    /// Checks that steps `1..=T` are each present once, rows are full width
    /// and every value is an accuracy.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_tasks();
        if t == 0 {
            return Err(MetricsError::Incomplete("no task columns".into()));
        }
        if self.reference_index().is_some() && self.columns.iter().filter(|c| *c == REFERENCE_COLUMN).count() > 1 {
            return Err(MetricsError::Format("duplicate reference column".into()));
        }
        for step in 1..=t {
            let n = self.rows.iter().filter(|r| r.step == step).count();
            if n != 1 {
                return Err(MetricsError::Incomplete(format!(
                    "step {step} appears {n} times, expected once"
                )));
            }
        }
        for row in &self.rows {
            if row.step > t {
                return Err(MetricsError::Incomplete(format!(
                    "step {} exceeds the {t} task columns",
                    row.step
                )));
            }
            if row.values.len() != self.columns.len() {
                return Err(MetricsError::Incomplete(format!(
                    "step {} has {} values for {} columns",
                    row.step,
                    row.values.len(),
                    self.columns.len()
                )));
            }
            for (value, column) in row.values.iter().zip(&self.columns) {
                if !(0.0..=1.0).contains(value) {
                    return Err(MetricsError::OutOfRange {
                        step: row.step,
                        column: column.clone(),
                        value: *value,
                    });
                }
            }
        }
        if self.rows.iter().filter(|r| r.step == 0).count() > 1 {
            return Err(MetricsError::Incomplete("step 0 appears more than once".into()));
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        self.validate()?;
        let tasks = self.task_indices();
        let t = tasks.len();
        let cell = |step: usize, col: usize| self.row(step).expect("validated")[col];
        let mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len() as f64;

        let mut transfer = Vec::with_capacity(t);
        let mut average = Vec::with_capacity(t);
        let mut last = Vec::with_capacity(t);
        for (j, &col) in tasks.iter().enumerate() {
            let first = if TRANSFER_INCLUDES_ZERO_SHOT && self.row(0).is_some() { 0 } else { 1 };
            let before: Vec<f64> = (first..=j).map(|i| cell(i, col)).collect();
            transfer.push((!before.is_empty()).then(|| mean(&before)));
            let all: Vec<f64> = (1..=t).map(|i| cell(i, col)).collect();
            average.push(mean(&all));
            last.push(cell(t, col));
        }
        let defined: Vec<f64> = transfer.iter().flatten().copied().collect();
        let reference = self.reference_index().map(|col| {
            let all: Vec<f64> = (1..=t).map(|i| cell(i, col)).collect();
            ReferenceMetrics {
                zero_shot: self.row(0).map(|r| r[col]),
                transfer: mean(&all),
                last: cell(t, col),
            }
        });
        Ok(Metrics {
            columns: tasks.iter().map(|&j| self.columns[j].clone()).collect(),
            transfer_mean: (!defined.is_empty()).then(|| mean(&defined)),
            average_mean: mean(&average),
            last_mean: mean(&last),
            transfer,
            average,
            last,
            reference,
        })
    }

    /// `step,<column>,...` with one line per row, RFC-4180 quoting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.step.to_string()];
            rec.extend(row.values.iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers()?.clone();
        let mut fields = header.iter();
        if fields.next() != Some("step") {
            return Err(MetricsError::Format("first column must be `step`".into()));
        }
        let columns: Vec<String> = fields.map(str::to_string).collect();
        if columns.is_empty() {
            return Err(MetricsError::Format("no accuracy columns".into()));
        }
        let mut matrix = Self::new(columns);
        for record in r.records() {
            let record = record?;
            let step = record
                .get(0)
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| MetricsError::Format(format!("bad step in line {:?}", record.position())))?;
            let values = record
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| MetricsError::Format(format!("bad accuracy `{s}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            matrix.push_row(step, values);
        }
        Ok(matrix)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub zero_shot: Option<f64>,
    pub transfer: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub columns: Vec<String>,
    pub transfer: Vec<Option<f64>>,
    pub average: Vec<f64>,
    pub last: Vec<f64>,
    pub transfer_mean: Option<f64>,
    pub average_mean: f64,
    pub last_mean: f64,
    pub reference: Option<ReferenceMetrics>,
}
