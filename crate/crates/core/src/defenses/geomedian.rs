//! Weighted geometric median via smoothed Weiszfeld iterations.

use crate::engine::{check_layouts, sorted_by_client, weighted_mean, ClientUpdate};
use crate::params::ParamVector;
use crate::{Error, Result};

/// Iteration stops once a step moves the iterate by less than this.
const STEP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GeoMedian {
    pub median: ParamVector,
    pub iterations: usize,
    /// Smoothed objective at the starting point and after every iteration.
    pub objective_history: Vec<f64>,
}

/// `sum_i a_i * ||z - w_i||`.
pub fn weighted_distance_sum(
    z: &ParamVector,
    points: &[&ParamVector],
    weights: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (p, a) in points.iter().zip(weights) {
        total += a * z.dist(p)?;
    }
    Ok(total)
}

/// Huber-smoothed objective minimised by smoothed Weiszfeld:
/// each distance `d` contributes `d` if `d >= nu`, else `d^2 / (2 nu) + nu / 2`.
pub fn smoothed_objective(
    z: &ParamVector,
    points: &[&ParamVector],
    weights: &[f64],
    nu: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (p, a) in points.iter().zip(weights) {
        let d = z.dist(p)?;
        total += a * if d >= nu {
            d
        } else {
            d * d / (2.0 * nu) + nu / 2.0
        };
    }
    Ok(total)
}

pub fn geometric_median(
    points: &[&ParamVector],
    weights: &[f64],
    nu: f64,
    iters: usize,
) -> Result<GeoMedian> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(Error::Contract(format!(
            "geometric median needs matching nonempty points and weights ({} vs {})",
            points.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Contract(
            "geometric median weights must be positive".into(),
        ));
    }
    for p in &points[1..] {
        points[0].ensure_compatible(p)?;
    }

    let mut z = weighted_mean(points, weights)?;
    let mut objective_history = vec![smoothed_objective(&z, points, weights, nu)?];
    let mut iterations = 0;
    while iterations < iters {
        let betas = points
            .iter()
            .zip(weights)
            .map(|(p, a)| Ok(a / z.dist(p)?.max(nu)))
            .collect::<Result<Vec<f64>>>()?;
        let next = weighted_mean(points, &betas)?;
        let step = next.dist(&z)?;
        z = next;
        iterations += 1;
        objective_history.push(smoothed_objective(&z, points, weights, nu)?);
        if step < STEP_TOLERANCE {
            break;
        }
    }
    Ok(GeoMedian {
        median: z,
        iterations,
        objective_history,
    })
}

/// Geometric median of the update parameters weighted by sample count,
/// taken in client-id order. `weighted = false` uses equal weights.
pub fn rfa_aggregate(
    updates: &[ClientUpdate],
    nu: f64,
    iters: usize,
    weighted: bool,
) -> Result<ParamVector> {
    check_layouts(updates)?;
    let sorted = sorted_by_client(updates);
    let points: Vec<&ParamVector> = sorted.iter().map(|u| &u.params).collect();
    let weights: Vec<f64> = if weighted {
        let total: usize = sorted.iter().map(|u| u.sample_count).sum();
        sorted
            .iter()
            .map(|u| u.sample_count as f64 / total as f64)
            .collect()
    } else {
        vec![1.0 / sorted.len() as f64; sorted.len()]
    };
    Ok(geometric_median(&points, &weights, nu, iters)?.median)
}
