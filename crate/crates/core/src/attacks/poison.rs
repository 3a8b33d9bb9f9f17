use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AttackKind, BackdoorSource, ByzantineMode, FlipPair};
use crate::data::Dataset;
use crate::engine::{ClientUpdate, RoundState};
use crate::params::ParamVector;
use crate::rng::{Purpose, RngStreams};
use crate::{Error, Result};

/// The slice of round state that model poisoning needs.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub round_index: usize,
    pub global: Option<&'a ParamVector>,
    pub streams: &'a RngStreams,
}

impl<'a> From<&'a RoundState> for AttackContext<'a> {
    fn from(state: &'a RoundState) -> Self {
        Self {
            round_index: state.round_index,
            global: Some(&state.global_params),
            streams: &state.streams,
        }
    }
}

/// `w_g + (w_g - w_local)`
pub fn byzantine_flip(global: &ParamVector, local: &ParamVector) -> Result<ParamVector> {
    global.add(&global.sub(local)?)
}

/// `w_g + gamma * (w_backdoor - w_g)`
pub fn model_replacement(
    global: &ParamVector,
    backdoor: &ParamVector,
    gamma: f64,
) -> Result<ParamVector> {
    global.axpy(gamma, &backdoor.sub(global)?)
}

/// Replaces the updates of `malicious` clients according to `kind`.
///
/// Length, order, client ids and sample counts are preserved, and updates of
/// honest clients pass through untouched.
pub fn attack_model(
    updates: Vec<ClientUpdate>,
    ctx: AttackContext<'_>,
    kind: &AttackKind,
    malicious: &BTreeSet<usize>,
) -> Result<Vec<ClientUpdate>> {
    if malicious.is_empty() || !updates.iter().any(|u| malicious.contains(&u.client_id)) {
        return Ok(updates);
    }
    let total_samples: usize = updates.iter().map(|u| u.sample_count).sum();
    updates
        .into_iter()
        .map(|u| {
            if !malicious.contains(&u.client_id) {
                return Ok(u);
            }
            let params = match kind {
                AttackKind::Byzantine { mode, random_sigma } => match mode {
                    ByzantineMode::Zero => u.params.map(|_| 0.0),
                    ByzantineMode::Random => {
                        let mut rng = ctx.streams.stream(
                            Purpose::AttackNoise,
                            ctx.round_index as u64,
                            u.client_id as u64,
                        );
                        let values = (0..u.params.len())
                            .map(|_| random_sigma * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        u.params.with_values(values)?
                    }
                    ByzantineMode::Flip => {
                        byzantine_flip(ctx.global.ok_or(Error::MissingGlobalModel)?, &u.params)?
                    }
                },
                AttackKind::ModelReplacement {
                    scale_gamma,
                    backdoor,
                } => {
                    let global = ctx.global.ok_or(Error::MissingGlobalModel)?;
                    let gamma = match scale_gamma {
                        Some(g) => *g,
                        None if u.sample_count > 0 => total_samples as f64 / u.sample_count as f64,
                        None => 1.0,
                    };
                    let target = match backdoor {
                        BackdoorSource::Params(p) => p,
                        BackdoorSource::LabelFlip(_) => &u.params,
                    };
                    model_replacement(global, target, gamma)?
                }
                AttackKind::LabelFlip { .. } | AttackKind::Dlg(_) => {
                    return Err(Error::Contract(format!(
                        "attack `{}` does not poison models",
                        kind.name()
                    )))
                }
            };
            Ok(ClientUpdate { params, ..u })
        })
        .collect()
}

/// Relabels every sample whose label is a flip source. Features are untouched.
pub fn poison_data(data: &Dataset, flip_pairs: &[FlipPair]) -> Result<Dataset> {
    super::validate_flip_pairs(flip_pairs, data.num_classes())?;
    if flip_pairs.is_empty() {
        return Ok(data.clone());
    }
    let mut map: Vec<usize> = (0..data.num_classes()).collect();
    for p in flip_pairs {
        map[p.source] = p.target;
    }
    data.with_labels(data.labels().iter().map(|&l| map[l]).collect())
}
