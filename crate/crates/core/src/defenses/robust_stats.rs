//! Coordinate-wise robust aggregators.

use std::sync::Arc;

use crate::engine::{check_layouts, sorted_by_client, ClientUpdate};
use crate::params::ParamVector;
use crate::{Error, Execution, Result};

/// Number of values trimmed from each end: `floor(beta * n)`, which must
/// leave at least one value.
pub(crate) fn trim_count(n: usize, trim_beta: f64) -> Result<usize> {
    let k = (trim_beta * n as f64).floor() as usize;
    if 2 * k >= n {
        return Err(Error::Config(format!(
            "trim_beta = {trim_beta} trims all {n} updates (need 2 * floor(beta * n) < n)"
        )));
    }
    Ok(k)
}

/// Applies `kernel` to the sorted column of every coordinate.
fn per_coordinate(
    updates: &[ClientUpdate],
    kernel: impl Fn(&[f64]) -> f64 + Sync + Send,
) -> Result<ParamVector> {
    check_layouts(updates)?;
    let sorted = sorted_by_client(updates);
    let layout = Arc::clone(sorted[0].params.layout());
    let values = Execution::default().map_range(layout.len(), |k| {
        let mut column: Vec<f64> = sorted.iter().map(|u| u.params.values()[k]).collect();
        column.sort_unstable_by(f64::total_cmp);
        kernel(&column)
    });
    Ok(ParamVector::from_raw(values, layout))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn trimmed(sorted: &[f64], k: usize) -> f64 {
    let kept = &sorted[k..sorted.len() - k];
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn coord_median_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    per_coordinate(updates, median)
}

/// Per coordinate, drops the `floor(beta * n)` smallest and largest values
/// and averages the rest.
pub fn trimmed_mean_aggregate(updates: &[ClientUpdate], trim_beta: f64) -> Result<ParamVector> {
    let k = trim_count(updates.len(), trim_beta)?;
    per_coordinate(updates, |c| trimmed(c, k))
}

/// `(1 - alpha) * prev + alpha * trimmed_mean(updates)`.
pub fn slsgd_aggregate(
    updates: &[ClientUpdate],
    prev: &ParamVector,
    trim_beta: f64,
    alpha: f64,
) -> Result<ParamVector> {
    let agg = trimmed_mean_aggregate(updates, trim_beta)?;
    prev.scale(1.0 - alpha).add(&agg.scale(alpha))
}

/// Robust learning rate: per coordinate, if at least `theta` more clients
/// agree on the sign of their delta than disagree, step `prev` by `+eta`
/// times the sample-weighted mean delta, otherwise by `-eta` times it.
pub fn robust_lr_aggregate(
    updates: &[ClientUpdate],
    prev: &ParamVector,
    theta: usize,
    eta: f64,
) -> Result<ParamVector> {
    check_layouts(updates)?;
    prev.ensure_compatible(&updates[0].params)?;
    let sorted = sorted_by_client(updates);
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Contract(
            "total sample count of updates is zero".into(),
        ));
    }
    let base = prev.values();
    let values = Execution::default().map_range(prev.len(), |k| {
        let mut votes = 0i64;
        let mut mean_delta = 0.0;
        for u in &sorted {
            let d = u.params.values()[k] - base[k];
            votes += if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            };
            mean_delta += (u.sample_count as f64 / total as f64) * d;
        }
        let lr = if votes.unsigned_abs() as usize >= theta {
            eta
        } else {
            -eta
        };
        base[k] + lr * mean_delta
    });
    Ok(ParamVector::from_raw(values, Arc::clone(prev.layout())))
}
