//! Norm clipping and clip-plus-noise defenses.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::engine::{check_layouts, fedavg_aggregate, sorted_by_client, ClientUpdate};
use crate::params::ParamVector;
use crate::rng::StreamRng;
use crate::Result;

fn clip_factor(norm: f64, tau: f64) -> f64 {
    if norm > tau {
        tau / norm
    } else {
        1.0
    }
}

fn add_noise(v: ParamVector, sigma: f64, rng: &mut StreamRng) -> ParamVector {
    if sigma == 0.0 {
        return v;
    }
    let layout = Arc::clone(v.layout());
    let values = v
        .into_values()
        .into_iter()
        .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ParamVector::from_raw(values, layout)
}

/// Scales each delta `w_i - global` down to norm at most `clip_tau`.
pub fn norm_clip(
    updates: Vec<ClientUpdate>,
    global: &ParamVector,
    clip_tau: f64,
) -> Result<Vec<ClientUpdate>> {
    updates
        .into_iter()
        .map(|u| {
            let delta = u.params.sub(global)?;
            let s = clip_factor(delta.norm(), clip_tau);
            if s >= 1.0 {
                return Ok(u);
            }
            Ok(ClientUpdate {
                params: global.axpy(s, &delta)?,
                ..u
            })
        })
        .collect()
}

/// Norm clipping, FedAvg, then i.i.d. `N(0, sigma^2)` noise on every
/// coordinate of the aggregate.
pub fn weak_dp_aggregate(
    updates: &[ClientUpdate],
    global: &ParamVector,
    clip_tau: f64,
    noise_sigma: f64,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    let clipped = norm_clip(updates.to_vec(), global, clip_tau)?;
    Ok(add_noise(fedavg_aggregate(&clipped)?, noise_sigma, rng))
}

/// Centered clipping around `center`:
/// `v + sum_i p_i * clip(w_i - v, tau)` with sample-count weights `p_i`.
pub fn cclip_aggregate(
    updates: &[ClientUpdate],
    center: &ParamVector,
    clip_tau: f64,
) -> Result<ParamVector> {
    check_layouts(updates)?;
    let sorted = sorted_by_client(updates);
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(crate::Error::Contract(
            "total sample count of updates is zero".into(),
        ));
    }
    let mut acc = vec![0.0; center.len()];
    for u in sorted {
        let delta = u.params.sub(center)?;
        let s = clip_factor(delta.norm(), clip_tau);
        let p = u.sample_count as f64 / total as f64;
        acc.iter_mut()
            .zip(delta.values())
            .for_each(|(a, d)| *a += p * s * d);
    }
    center.add(&center.with_values(acc)?)
}

/// Clips the global model to norm `clip_tau` and adds `N(0, sigma^2)` noise.
pub fn crfl_postprocess(
    global: ParamVector,
    clip_tau: f64,
    noise_sigma: f64,
    rng: &mut StreamRng,
) -> ParamVector {
    let s = clip_factor(global.norm(), clip_tau);
    let clipped = if s < 1.0 { global.scale(s) } else { global };
    add_noise(clipped, noise_sigma, rng)
}
