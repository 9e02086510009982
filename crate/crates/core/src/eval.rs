//! Accuracy metrics and Friedman mean ranks.

use std::io::{Read, Write};

use thiserror::Error;

use crate::model::EctnModel;
use crate::tensor::{Dims, ObservedTensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("model shape {model} does not match tensor shape {tensor}")]
    DimMismatch { model: Dims, tensor: Dims },
    #[error("position {position} out of range for tensor with {len} entries")]
    BadPosition { position: usize, len: usize },
    #[error("degenerate result table: {0}")]
    DegenerateTable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Error of a model over a set of entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

/// RMSE and MAE of `model` over the given entry positions of `tensor`.
pub fn evaluate(model: &EctnModel, tensor: &ObservedTensor, positions: &[usize]) -> Result<Metrics, EvalError> {
    if model.dims() != tensor.dims() {
        return Err(EvalError::DimMismatch {
            model: model.dims(),
            tensor: tensor.dims(),
        });
    }
    if positions.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut z = model.scratch();
    let (mut sq, mut abs) = (0.0, 0.0);
    for &p in positions {
        if p >= tensor.len() {
            return Err(EvalError::BadPosition {
                position: p,
                len: tensor.len(),
            });
        }
        let e = tensor.entry(p);
        let res = e.value - model.predict_with(e.i, e.j, e.k, &mut z);
        sq += res * res;
        abs += res.abs();
    }
    let n = positions.len() as f64;
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        count: positions.len(),
    })
}

/// Mean RMSE and MAE over repeated runs; `count` is the total number of entries.
pub fn aggregate(runs: &[Metrics]) -> Result<Metrics, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = runs.len() as f64;
    Ok(Metrics {
        rmse: runs.iter().map(|m| m.rmse).sum::<f64>() / n,
        mae: runs.iter().map(|m| m.mae).sum::<f64>() / n,
        count: runs.iter().map(|m| m.count).sum(),
    })
}

/// One metric for several models across several dataset cases.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    rows: Vec<String>,
    columns: Vec<String>,
    cells: Vec<Vec<f64>>,
}

impl ResultTable {
    pub fn new(rows: Vec<String>, columns: Vec<String>, cells: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if cells.len() != rows.len() {
            return Err(EvalError::DegenerateTable(format!(
                "{} row labels for {} rows",
                rows.len(),
                cells.len()
            )));
        }
        for (label, row) in rows.iter().zip(&cells) {
            if row.len() != columns.len() {
                return Err(EvalError::DegenerateTable(format!(
                    "row {label:?} has {} cells, expected {}",
                    row.len(),
                    columns.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::DegenerateTable(format!("row {label:?} has a non-finite cell")));
            }
        }
        Ok(ResultTable { rows, columns, cells })
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    /// Reads a CSV with a header of model ids (first header cell labels the
    /// case column) and one row per case. A trailing `F-Rank` row is ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let label = record.get(0).unwrap_or_default().to_owned();
            if label.eq_ignore_ascii_case("f-rank") {
                continue;
            }
            let values: Result<Vec<f64>, _> = record.iter().skip(1).map(str::parse::<f64>).collect();
            let values = values.map_err(|e| EvalError::DegenerateTable(format!("row {label:?}: {e}")))?;
            rows.push(label);
            cells.push(values);
        }
        Self::new(rows, columns, cells)
    }

    /// Writes the table as CSV, optionally followed by an `F-Rank` row.
    pub fn write_csv<W: Write>(&self, writer: W, franks: Option<&[f64]>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["case".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        if let Some(ranks) = franks {
            let mut rec = vec!["F-Rank".to_owned()];
            rec.extend(ranks.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Ranks `values` 1..n, averaging the positions of tied values.
pub fn rank_row(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&x, &y| {
        let ord = values[x].total_cmp(&values[y]);
        if lower_is_better {
            ord
        } else {
            ord.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let shared = (start + 1 + end) as f64 / 2.0;
        for &col in &order[start..end] {
            ranks[col] = shared;
        }
        start = end;
    }
    ranks
}

/// Friedman mean rank of every model (column) across all cases (rows).
pub fn friedman_rank(table: &ResultTable, lower_is_better: bool) -> Result<Vec<f64>, EvalError> {
    if table.columns.len() < 2 {
        return Err(EvalError::DegenerateTable("need at least two models".into()));
    }
    if table.rows.is_empty() {
        return Err(EvalError::DegenerateTable("need at least one case".into()));
    }
    let mut totals = vec![0.0; table.columns.len()];
    for row in &table.cells {
        for (t, r) in totals.iter_mut().zip(rank_row(row, lower_is_better)) {
            *t += r;
        }
    }
    let n = table.rows.len() as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}
