//! Long-format result table and its CSV form.

use std::io::{Read, Write};

use bilevel::solvers::{RunRecord, RunRow};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One metric value of one logged iteration of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub t: usize,
    pub oracle_calls: u64,
    pub wall_time: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

/// Metrics present in every row of `record`; the optional ones are all or
/// nothing within a run.
fn metrics_of(row: &RunRow) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("value", row.value),
        ("grad_norm_sq", row.grad_norm_sq),
        ("grad_norm_sq_avg", row.grad_norm_sq_avg),
        ("grad_norm_sq_inf", row.grad_norm_sq_inf),
        ("delta_z", row.delta_z),
        ("delta_v", row.delta_v),
    ];
    if let Some(s) = row.suboptimality {
        out.push(("suboptimality", s));
    }
    if let Some(e) = row.test_error {
        out.push(("test_error", e));
    }
    out
}

pub fn records_to_rows(label: &str, record: &RunRecord) -> Vec<ResultRow> {
    record
        .rows
        .iter()
        .flat_map(|row| {
            metrics_of(row).into_iter().map(move |(name, value)| ResultRow {
                method: label.to_string(),
                seed: record.seed,
                t: row.t,
                oracle_calls: row.oracle_calls(),
                wall_time: row.wall_seconds,
                metric_name: name.to_string(),
                metric_value: value,
            })
        })
        .collect()
}

/// RFC 4180 CSV with a header row.
pub fn write_csv<W: Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
