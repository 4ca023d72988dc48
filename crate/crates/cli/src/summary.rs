//! Per-method aggregation of the long table over seeds.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};
use crate::manifest::Manifest;
use crate::table::{read_csv, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Median,
    Mean,
    /// Running infimum over `t` of the median curve.
    Inf,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "median" => Ok(Aggregation::Median),
            "mean" => Ok(Aggregation::Mean),
            "inf" => Ok(Aggregation::Inf),
            _ => Err(format!("unknown aggregation {s:?} (median, mean, inf)")),
        }
    }
}

/// One point of an aggregated curve. The oracle-call and wall-time axes are
/// aggregated the same way as the value (median for `inf`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub metric_name: String,
    pub t: usize,
    pub oracle_calls: f64,
    pub wall_time: f64,
    pub value: f64,
    pub seeds: usize,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn combine(values: &mut [f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Median | Aggregation::Inf => median(values),
    }
}

#[derive(Default)]
struct Point {
    value: Vec<f64>,
    calls: Vec<f64>,
    wall: Vec<f64>,
}

/// Aggregates over seeds for every `(method, metric, t)`; cells listed in
/// `excluded` are dropped.
pub fn summarize(rows: &[ResultRow], excluded: &HashSet<(String, u64)>, agg: Aggregation) -> Result<Vec<CurveRow>> {
    let mut metric_sets: BTreeMap<(&str, u64), BTreeSet<&str>> = BTreeMap::new();
    let mut points: BTreeMap<(&str, &str, usize), Point> = BTreeMap::new();
    let mut dropped = BTreeSet::new();
    for row in rows {
        if excluded.contains(&(row.method.clone(), row.seed)) {
            dropped.insert((row.method.as_str(), row.seed));
            continue;
        }
        metric_sets
            .entry((&row.method, row.seed))
            .or_default()
            .insert(&row.metric_name);
        let point = points
            .entry((&row.method, &row.metric_name, row.t))
            .or_default();
        point.value.push(row.metric_value);
        point.calls.push(row.oracle_calls as f64);
        point.wall.push(row.wall_time);
    }
    if !dropped.is_empty() {
        log::warn!("excluded {} diverged cell(s) from aggregation", dropped.len());
    }
    let mut sets = metric_sets.iter();
    let Some((first_key, first)) = sets.next() else {
        return Err(CliError::Empty("no completed cells".into()));
    };
    for (key, set) in sets {
        if set != first {
            return Err(CliError::MixedMetrics(format!(
                "{} seed {} logs {:?} but {} seed {} logs {:?}",
                first_key.0, first_key.1, first, key.0, key.1, set
            )));
        }
    }

    let mut curves = Vec::with_capacity(points.len());
    let mut running: Option<(&str, &str, f64)> = None;
    for ((method, metric, t), mut point) in points {
        let seeds = point.value.len();
        let mut value = combine(&mut point.value, agg);
        if agg == Aggregation::Inf {
            if let Some((m, n, best)) = running {
                if m == method && n == metric {
                    value = value.min(best);
                }
            }
            running = Some((method, metric, value));
        }
        curves.push(CurveRow {
            method: method.to_string(),
            metric_name: metric.to_string(),
            t,
            oracle_calls: combine(&mut point.calls, agg),
            wall_time: combine(&mut point.wall, agg),
            value,
            seeds,
        });
    }
    Ok(curves)
}

/// Summarizes `merged.csv` of an output directory, excluding the cells its
/// manifest marks as diverged, and writes `summary_<agg>.csv` next to it.
pub fn summarize_dir(dir: &Path, agg: Aggregation) -> Result<(Vec<CurveRow>, std::path::PathBuf)> {
    let manifest = Manifest::load(&dir.join(crate::manifest::MANIFEST_FILE))?;
    let excluded: HashSet<(String, u64)> = manifest
        .cells
        .iter()
        .filter(|c| c.status.is_diverged())
        .map(|c| (c.method.clone(), c.seed))
        .collect();
    let merged = dir.join(crate::manifest::MERGED_FILE);
    let file = std::fs::File::open(&merged).at(&merged)?;
    let rows = read_csv(file)?;
    let curves = summarize(&rows, &excluded, agg)?;
    let name = match agg {
        Aggregation::Median => "summary_median.csv",
        Aggregation::Mean => "summary_mean.csv",
        Aggregation::Inf => "summary_inf.csv",
    };
    let out = dir.join(name);
    let file = std::fs::File::create(&out).at(&out)?;
    let mut w = csv::Writer::from_writer(file);
    for c in &curves {
        w.serialize(c)?;
    }
    w.flush().at(&out)?;
    Ok((curves, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, t: usize, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            method: method.into(),
            seed,
            t,
            oracle_calls: 2 * t as u64,
            wall_time: t as f64 * 1e-3,
            metric_name: metric.into(),
            metric_value: value,
        }
    }

    #[test]
    fn median_of_three() {
        let rows: Vec<_> = [1.0, 2.0, 100.0]
            .iter()
            .enumerate()
            .map(|(s, &v)| row("saba", s as u64, 5, "value", v))
            .collect();
        let curves = summarize(&rows, &HashSet::new(), Aggregation::Median).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].value, 2.0);
        assert_eq!(curves[0].seeds, 3);
        let mean = summarize(&rows, &HashSet::new(), Aggregation::Mean).unwrap();
        assert!((mean[0].value - 103.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_seed_reproduces_its_curve() {
        let rows: Vec<_> = (0..6).map(|t| row("soba", 4, t, "grad_norm_sq", (t as f64).sin())).collect();
        for agg in [Aggregation::Median, Aggregation::Mean] {
            let curves = summarize(&rows, &HashSet::new(), agg).unwrap();
            for (c, r) in curves.iter().zip(&rows) {
                assert_eq!((c.t, c.value, c.oracle_calls), (r.t, r.metric_value, r.oracle_calls as f64));
            }
        }
    }

    #[test]
    fn infimum_never_increases() {
        let rows: Vec<_> = (0..50)
            .flat_map(|t| (0..3).map(move |s| row("saba", s, t, "grad_norm_sq", 1.0 + ((t as u64 * (s + 2)) as f64).cos())))
            .collect();
        let curves = summarize(&rows, &HashSet::new(), Aggregation::Inf).unwrap();
        assert_eq!(curves.len(), 50);
        assert!(curves.windows(2).all(|w| w[1].value <= w[0].value));
    }

    #[test]
    fn infimum_restarts_per_metric() {
        let rows = vec![
            row("a", 0, 0, "value", 1.0),
            row("a", 0, 0, "delta_z", 5.0),
            row("a", 0, 1, "value", 3.0),
            row("a", 0, 1, "delta_z", 7.0),
        ];
        let curves = summarize(&rows, &HashSet::new(), Aggregation::Inf).unwrap();
        let dz: Vec<f64> = curves.iter().filter(|c| c.metric_name == "delta_z").map(|c| c.value).collect();
        assert_eq!(dz, vec![5.0, 5.0]);
    }

    #[test]
    fn diverged_cells_are_excluded() {
        let rows = vec![row("soba", 0, 0, "value", 1.0), row("soba", 1, 0, "value", f64::INFINITY)];
        let excluded = HashSet::from([("soba".to_string(), 1)]);
        let curves = summarize(&rows, &excluded, Aggregation::Mean).unwrap();
        assert_eq!((curves[0].value, curves[0].seeds), (1.0, 1));
        assert!(matches!(
            summarize(&rows[1..], &excluded, Aggregation::Mean),
            Err(CliError::Empty(_))
        ));
    }

    #[test]
    fn mixed_metric_sets_are_rejected() {
        let rows = vec![row("soba", 0, 0, "value", 1.0), row("saba", 0, 0, "test_error", 0.1)];
        assert!(matches!(
            summarize(&rows, &HashSet::new(), Aggregation::Median),
            Err(CliError::MixedMetrics(_))
        ));
    }
}
