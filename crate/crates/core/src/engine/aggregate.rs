//! Server-side aggregation: FedAvg and FedOpt (server SGD-momentum / Adam on
//! the averaged pseudo-gradient).

use std::sync::Arc;

use super::ClientUpdate;
use crate::params::ParamVector;
use crate::{Error, Result};

/// Updates sorted by client id. Every reduction runs in this order so that
/// results do not depend on how the list was assembled.
pub(crate) fn sorted_by_client(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

pub(crate) fn check_layouts(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Contract("no client updates to aggregate".into()))?;
    for u in &updates[1..] {
        first.params.ensure_compatible(&u.params)?;
    }
    Ok(())
}

/// Weighted mean of `vectors` with the given non-negative weights, summed
/// sequentially in slice order.
pub(crate) fn weighted_mean(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Contract(format!(
            "aggregation weights sum to {total}"
        )));
    }
    let first = vectors[0];
    let mut acc = vec![0.0; first.len()];
    for (v, w) in vectors.iter().zip(weights) {
        let p = w / total;
        acc.iter_mut()
            .zip(v.values())
            .for_each(|(a, x)| *a += p * x);
    }
    Ok(ParamVector::from_raw(acc, Arc::clone(first.layout())))
}

/// Coordinate-wise mean weighted by `sample_count`.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    check_layouts(updates)?;
    let sorted = sorted_by_client(updates);
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Contract(
            "total sample count of updates is zero".into(),
        ));
    }
    let vectors: Vec<&ParamVector> = sorted.iter().map(|u| &u.params).collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.sample_count as f64).collect();
    weighted_mean(&vectors, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerRule {
    /// `m <- momentum * m + delta; w <- w + lr * m`
    Sgd { momentum: f64 },
    /// Adam on the pseudo-gradient without bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl ServerRule {
    pub const DEFAULT_ADAM: ServerRule = ServerRule::Adam {
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-3,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OptimizerSpec {
    #[default]
    FedAvg,
    FedOpt {
        server_lr: f64,
        rule: ServerRule,
    },
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerSpec::FedAvg => Ok(()),
            OptimizerSpec::FedOpt { server_lr, rule } => {
                if !(server_lr.is_finite() && server_lr >= 0.0) {
                    return Err(Error::Config(format!(
                        "optimizer.server_lr must be finite and non-negative, got {server_lr}"
                    )));
                }
                match rule {
                    ServerRule::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                        Err(Error::Config(format!(
                            "optimizer.momentum must be in [0, 1), got {momentum}"
                        )))
                    }
                    ServerRule::Adam { beta1, beta2, eps }
                        if !(0.0..1.0).contains(&beta1)
                            || !(0.0..1.0).contains(&beta2)
                            || eps <= 0.0 =>
                    {
                        Err(Error::Config(
                            "optimizer.beta1/beta2 must be in [0, 1) and eps positive".into(),
                        ))
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

/// Server optimizer with state that persists across rounds.
#[derive(Debug, Clone)]
pub struct ServerOptimizer {
    spec: OptimizerSpec,
    first_moment: Option<Vec<f64>>,
    second_moment: Option<Vec<f64>>,
}

impl ServerOptimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            first_moment: None,
            second_moment: None,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn aggregate(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
    ) -> Result<ParamVector> {
        match self.spec {
            OptimizerSpec::FedAvg => fedavg_aggregate(updates),
            OptimizerSpec::FedOpt { server_lr, rule } => {
                self.fedopt_step(global, updates, server_lr, rule)
            }
        }
    }

    fn fedopt_step(
        &mut self,
        global: &ParamVector,
        updates: &[ClientUpdate],
        server_lr: f64,
        rule: ServerRule,
    ) -> Result<ParamVector> {
        let avg = fedavg_aggregate(updates)?;
        let delta = avg.sub(global)?;
        let n = delta.len();
        let mut out = global.values().to_vec();
        match rule {
            ServerRule::Sgd { momentum } => {
                let m = self.first_moment.get_or_insert_with(|| vec![0.0; n]);
                for ((w, m), d) in out.iter_mut().zip(m.iter_mut()).zip(delta.values()) {
                    *m = momentum * *m + d;
                    *w += server_lr * *m;
                }
            }
            ServerRule::Adam { beta1, beta2, eps } => {
                let m = self.first_moment.get_or_insert_with(|| vec![0.0; n]);
                let v = self.second_moment.get_or_insert_with(|| vec![0.0; n]);
                for (((w, m), v), d) in out
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(delta.values())
                {
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v = beta2 * *v + (1.0 - beta2) * d * d;
                    *w += server_lr * *m / (v.sqrt() + eps);
                }
            }
        }
        Ok(ParamVector::from_raw(out, Arc::clone(global.layout())))
    }
}

/// One FedOpt step with fresh optimizer state.
pub fn fedopt_step(
    global: &ParamVector,
    updates: &[ClientUpdate],
    spec: OptimizerSpec,
) -> Result<ParamVector> {
    ServerOptimizer::new(spec)?.aggregate(global, updates)
}
