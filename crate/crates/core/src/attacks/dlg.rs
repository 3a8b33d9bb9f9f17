//! Gradient-matching data reconstruction ("deep leakage from gradients").
//!
//! Dummy inputs and label logits start from `N(0, 1)` and are moved by gradient
//! descent to minimise `||grad_params L(x, softmax(u)) - g_target||^2`. A step
//! that would increase the match loss is halved and retried, so the recorded
//! loss sequence never increases. Accepted steps grow the step size again.
//!
//! Logistic regression uses an analytic derivative of the match loss; MLPs
//! fall back to central finite differences over the dummy variables.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{self, softmax, ModelKind, ModelSpec};
use crate::params::ParamVector;
use crate::rng::StreamRng;
use crate::{Error, Result};

const MAX_HALVINGS: usize = 60;
const STEP_GROWTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlgConfig {
    pub iters: usize,
    /// Initial step size.
    pub lr: f64,
    /// Number of dummy samples reconstructed jointly.
    pub num_dummies: usize,
    /// Stop early once the match loss drops to this value.
    pub tolerance: f64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 1.0,
            num_dummies: 1,
            tolerance: 1e-14,
        }
    }
}

impl DlgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.num_dummies == 0 {
            return Err(Error::Config(
                "dlg_iters and dlg_num_dummies must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "dlg_lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config(
                "dlg_tolerance must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The gradient the attacker tries to explain.
#[derive(Debug, Clone, Copy)]
pub enum GradientTarget<'a> {
    /// A shared gradient, evaluated at the reconstruction parameters.
    Gradient(&'a ParamVector),
    /// One-step approximation from two models:
    /// `(before - after) / (learning_rate * steps)`.
    ModelDelta {
        before: &'a ParamVector,
        after: &'a ParamVector,
        learning_rate: f64,
        steps: usize,
    },
}

impl GradientTarget<'_> {
    pub fn gradient(&self) -> Result<ParamVector> {
        match *self {
            GradientTarget::Gradient(g) => Ok(g.clone()),
            GradientTarget::ModelDelta {
                before,
                after,
                learning_rate,
                steps,
            } => {
                let denom = learning_rate * steps as f64;
                if !(denom.is_finite() && denom > 0.0) {
                    return Err(Error::Contract(
                        "model-delta gradient target needs a positive learning rate and step count"
                            .into(),
                    ));
                }
                Ok(before.sub(after)?.scale(1.0 / denom))
            }
        }
    }
}

pub enum DummyInit<'a> {
    Gaussian(&'a mut StreamRng),
    /// Explicit starting point: `num_dummies` rows of features and of label
    /// logits.
    Given {
        features: Vec<f64>,
        label_logits: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub features: Vec<Vec<f64>>,
    pub label_probs: Vec<Vec<f64>>,
    pub match_loss: f64,
    /// Match loss before the first step and after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

struct Problem<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    target: Vec<f64>,
    n: usize,
}

impl Problem<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.spec.input_dim, self.spec.num_classes)
    }

    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64]) {
        z.split_at(self.n * self.spec.input_dim)
    }

    fn label_probs(&self, logits: &[f64]) -> Vec<f64> {
        let c = self.spec.num_classes;
        logits.chunks(c).flat_map(softmax).collect()
    }

    fn match_loss(&self, z: &[f64]) -> Result<f64> {
        let (x, u) = self.split(z);
        let (_, grad) =
            model::forward_loss_grad_soft(self.spec, self.params, x, &self.label_probs(u))?;
        Ok(grad
            .values()
            .iter()
            .zip(&self.target)
            .map(|(g, t)| (g - t) * (g - t))
            .sum())
    }

    /// Writes the match-loss gradient into `grad` and returns the loss.
    fn match_loss_grad(&self, z: &[f64], grad: &mut [f64], scratch: &mut Scratch) -> Result<f64> {
        match self.spec.kind {
            ModelKind::Logreg => Ok(self.logreg_loss_grad(z, grad, scratch)),
            ModelKind::Mlp => {
                let loss = self.match_loss(z)?;
                let mut probe = z.to_vec();
                for i in 0..z.len() {
                    let h = 1e-6 * z[i].abs().max(1.0);
                    probe[i] = z[i] + h;
                    let up = self.match_loss(&probe)?;
                    probe[i] = z[i] - h;
                    let down = self.match_loss(&probe)?;
                    probe[i] = z[i];
                    grad[i] = (up - down) / (2.0 * h);
                }
                Ok(loss)
            }
        }
    }

    /// Closed form for softmax regression. With `e_s = p_s - y_s`, the shared
    /// gradient is `G_W = mean_s e_s x_s^T`, `G_b = mean_s e_s`.
    fn logreg_loss_grad(&self, z: &[f64], grad: &mut [f64], scratch: &mut Scratch) -> f64 {
        let (d, c) = self.dims();
        let n = self.n;
        let w = self.params.values();
        let (xs, us) = self.split(z);
        let inv_n = 1.0 / n as f64;
        let Scratch {
            residual,
            probs,
            labels,
            row,
        } = scratch;

        for (r, t) in residual.iter_mut().zip(&self.target) {
            *r = -t;
        }
        for s in 0..n {
            let x = &xs[s * d..(s + 1) * d];
            for k in 0..c {
                row[k] = w[c * d + k] + (0..d).map(|j| w[k * d + j] * x[j]).sum::<f64>();
            }
            let p = &mut probs[s * c..(s + 1) * c];
            softmax_into(row, p);
            let y = &mut labels[s * c..(s + 1) * c];
            softmax_into(&us[s * c..(s + 1) * c], y);
            for k in 0..c {
                let e = p[k] - y[k];
                for j in 0..d {
                    residual[k * d + j] += inv_n * e * x[j];
                }
                residual[c * d + k] += inv_n * e;
            }
        }
        let loss: f64 = residual.iter().map(|r| r * r).sum();
        let (r_w, r_b) = residual.split_at(c * d);

        let (gx, gu) = grad.split_at_mut(n * d);
        for s in 0..n {
            let x = &xs[s * d..(s + 1) * d];
            let p = &probs[s * c..(s + 1) * c];
            let y = &labels[s * c..(s + 1) * c];
            // row = dLoss/de_s
            for k in 0..c {
                row[k] =
                    2.0 * inv_n * (r_b[k] + (0..d).map(|j| r_w[k * d + j] * x[j]).sum::<f64>());
            }
            let pq: f64 = p.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let yq: f64 = y.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for j in 0..d {
                let mut direct = 0.0;
                let mut through_logits = 0.0;
                for k in 0..c {
                    direct += r_w[k * d + j] * (p[k] - y[k]);
                    // (diag(p) - p p^T) q
                    through_logits += w[k * d + j] * (p[k] * (row[k] - pq));
                }
                gx[s * d + j] = 2.0 * inv_n * direct + through_logits;
            }
            for k in 0..c {
                gu[s * c + k] = -(y[k] * (row[k] - yq));
            }
        }
        loss
    }
}

/// Buffers for [`Problem::logreg_loss_grad`], reused across iterations.
struct Scratch {
    residual: Vec<f64>,
    probs: Vec<f64>,
    labels: Vec<f64>,
    row: Vec<f64>,
}

impl Scratch {
    fn new(problem: &Problem<'_>) -> Self {
        let c = problem.spec.num_classes;
        Self {
            residual: vec![0.0; problem.target.len()],
            probs: vec![0.0; problem.n * c],
            labels: vec![0.0; problem.n * c],
            row: vec![0.0; c],
        }
    }
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Reconstructs dummy samples whose gradient at `params` matches `target`.
/// No model is modified.
pub fn reconstruct_data(
    spec: &ModelSpec,
    params: &ParamVector,
    target: GradientTarget<'_>,
    cfg: &DlgConfig,
    init: DummyInit<'_>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let target = target.gradient()?;
    params.ensure_compatible(&target)?;
    let (d, c) = (spec.input_dim, spec.num_classes);
    let n = cfg.num_dummies;

    let mut z: Vec<f64> = match init {
        DummyInit::Gaussian(rng) => (0..n * (d + c))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        DummyInit::Given {
            features,
            label_logits,
        } => {
            if features.len() != n * d || label_logits.len() != n * c {
                return Err(Error::Contract(format!(
                    "dummy init must hold {n} rows of {d} features and {c} label logits"
                )));
            }
            features.into_iter().chain(label_logits).collect()
        }
    };

    let problem = Problem {
        spec,
        params,
        target: target.into_values(),
        n,
    };
    let mut scratch = Scratch::new(&problem);
    let mut grad = vec![0.0; z.len()];
    let mut loss = problem.match_loss_grad(&z, &mut grad, &mut scratch)?;
    if !loss.is_finite() {
        return Err(Error::ReconstructionDiverged { iteration: 0, loss });
    }
    let mut history = vec![loss];
    let mut step = cfg.lr;
    let mut iterations = 0;
    let mut candidate = vec![0.0; z.len()];
    let mut cand_grad = vec![0.0; z.len()];

    while iterations < cfg.iters && loss > cfg.tolerance {
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for ((c, v), g) in candidate.iter_mut().zip(&z).zip(&grad) {
                *c = v - step * g;
            }
            let cand_loss = problem.match_loss_grad(&candidate, &mut cand_grad, &mut scratch)?;
            if cand_loss.is_finite() && cand_loss <= loss {
                std::mem::swap(&mut z, &mut candidate);
                std::mem::swap(&mut grad, &mut cand_grad);
                loss = cand_loss;
                step *= STEP_GROWTH;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no descent direction left at working precision
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::ReconstructionDiverged {
                iteration: iterations,
                loss,
            });
        }
        history.push(loss);
    }

    let (xs, us) = problem.split(&z);
    Ok(Reconstruction {
        features: xs.chunks(d).map(<[f64]>::to_vec).collect(),
        label_probs: us.chunks(c).map(softmax).collect(),
        match_loss: loss,
        history,
        iterations,
    })
}
