//! Foolsgold: down-weights clients whose accumulated updates look alike.

use super::DefenderState;
use crate::engine::{check_layouts, ClientUpdate};
use crate::params::ParamVector;
use crate::Result;

/// Value substituted for a normalised weight of exactly 1 before the logit.
const LOGIT_CAP: f64 = 0.99;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-client weights in `[0, 1]` from accumulated update histories.
///
/// Pipeline: pairwise cosine similarity (self-similarity counted as 0),
/// pardoning of clients that are less similar to anyone than their peer is,
/// `1 - max similarity`, rescaling by the largest weight, then
/// `clamp(kappa * (logit(w) + 0.5), 0, 1)`. Clients whose history is all
/// zeros get weight 1.
pub fn foolsgold_weights(histories: &[&[f64]], kappa: f64) -> Vec<f64> {
    let n = histories.len();
    let zero: Vec<bool> = histories
        .iter()
        .map(|h| h.iter().all(|&v| v == 0.0))
        .collect();
    let mut cs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i * n + j] = cosine(histories[i], histories[j]);
            }
        }
    }
    let row_max = |cs: &[f64], i: usize| cs[i * n..(i + 1) * n].iter().cloned().fold(0.0, f64::max);
    let max_cs: Vec<f64> = (0..n).map(|i| row_max(&cs, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && max_cs[i] < max_cs[j] {
                cs[i * n + j] *= max_cs[i] / max_cs[j];
            }
        }
    }
    let mut weights: Vec<f64> = (0..n)
        .map(|i| (1.0 - row_max(&cs, i)).clamp(0.0, 1.0))
        .collect();
    let top = weights.iter().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        weights.iter_mut().for_each(|w| *w /= top);
    }
    weights
        .iter()
        .zip(zero)
        .map(|(&w, is_zero)| {
            if is_zero {
                return 1.0;
            }
            let w = if w == 1.0 { LOGIT_CAP } else { w };
            let logit = (w / (1.0 - w)).ln();
            let scaled = kappa * (logit + 0.5);
            if scaled.is_nan() {
                0.0
            } else {
                scaled.clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Adds this round's deltas to the per-client histories, then scales each
/// update's delta from `global` by its Foolsgold weight.
pub fn foolsgold_reweight(
    updates: Vec<ClientUpdate>,
    global: &ParamVector,
    state: &mut DefenderState,
    kappa: f64,
) -> Result<Vec<ClientUpdate>> {
    check_layouts(&updates)?;
    let mut deltas = Vec::with_capacity(updates.len());
    for u in &updates {
        let delta = u.params.sub(global)?;
        let history = state
            .foolsgold_history
            .entry(u.client_id)
            .or_insert_with(|| vec![0.0; delta.len()]);
        if history.len() != delta.len() {
            *history = vec![0.0; delta.len()];
        }
        history
            .iter_mut()
            .zip(delta.values())
            .for_each(|(h, d)| *h += d);
        deltas.push(delta);
    }
    let histories: Vec<&[f64]> = updates
        .iter()
        .map(|u| state.foolsgold_history[&u.client_id].as_slice())
        .collect();
    let weights = foolsgold_weights(&histories, kappa);

    updates
        .into_iter()
        .zip(deltas)
        .zip(weights)
        .map(|((u, delta), w)| {
            if w == 1.0 {
                return Ok(u);
            }
            Ok(ClientUpdate {
                params: global.axpy(w, &delta)?,
                ..u
            })
        })
        .collect()
}
