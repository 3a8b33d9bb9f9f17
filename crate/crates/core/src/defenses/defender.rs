use crate::engine::{ClientUpdate, DefenseHook, RoundState};
use crate::params::ParamVector;
use crate::rng::Purpose;
use crate::Result;

use super::{
    cclip_aggregate, coord_median_aggregate, crfl_postprocess, foolsgold_reweight, krum_select,
    norm_clip, rfa_aggregate, robust_lr_aggregate, slsgd_aggregate, trimmed_mean_aggregate,
    weak_dp_aggregate, DefenderState, DefenseSpec, Stages,
};

/// Noise stream client slots, so weak DP and CRFL never share draws.
const WEAK_DP_SLOT: u64 = 0;
const CRFL_SLOT: u64 = 1;

/// Runs one [`DefenseSpec`] at the stages it occupies.
#[derive(Debug, Clone)]
pub struct Defender {
    spec: DefenseSpec,
    stages: Stages,
    state: DefenderState,
}

impl Defender {
    pub fn new(spec: DefenseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            stages: spec.stages(),
            state: DefenderState::default(),
        })
    }

    pub fn spec(&self) -> &DefenseSpec {
        &self.spec
    }

    pub fn state(&self) -> &DefenderState {
        &self.state
    }

    pub fn is_stateful(&self) -> bool {
        matches!(self.spec, DefenseSpec::Foolsgold { .. })
    }
}

impl DefenseHook for Defender {
    fn name(&self) -> &str {
        self.spec.name()
    }

    fn is_defense_before_aggregation(&self) -> bool {
        self.stages.before
    }

    fn is_defense_on_aggregation(&self) -> bool {
        self.stages.on
    }

    fn is_defense_after_aggregation(&self) -> bool {
        self.stages.after
    }

    fn defend_before_aggregation(
        &mut self,
        updates: Vec<ClientUpdate>,
        aux: &RoundState,
    ) -> Result<Vec<ClientUpdate>> {
        match self.spec {
            DefenseSpec::Krum { byzantine_f } => krum_select(updates, byzantine_f, 1),
            DefenseSpec::MKrum {
                byzantine_f,
                krum_m,
            } => {
                self.spec.validate_for_clients(updates.len())?;
                krum_select(updates, byzantine_f, krum_m)
            }
            DefenseSpec::Foolsgold { kappa } => {
                foolsgold_reweight(updates, &aux.global_params, &mut self.state, kappa)
            }
            DefenseSpec::NormClip { clip_tau } => norm_clip(updates, &aux.global_params, clip_tau),
            _ => Ok(updates),
        }
    }

    fn defend_on_aggregation(
        &mut self,
        updates: &[ClientUpdate],
        aux: &RoundState,
    ) -> Result<Option<ParamVector>> {
        let round = aux.round_index as u64;
        let global = &aux.global_params;
        let out = match self.spec {
            DefenseSpec::GeoMedian { nu, iters } => rfa_aggregate(updates, nu, iters, false)?,
            DefenseSpec::Rfa { nu, iters } => rfa_aggregate(updates, nu, iters, true)?,
            DefenseSpec::Slsgd { trim_beta, alpha } => {
                slsgd_aggregate(updates, global, trim_beta, alpha)?
            }
            DefenseSpec::WeakDp {
                clip_tau,
                noise_sigma,
            } => {
                let mut rng = aux
                    .streams
                    .stream(Purpose::DefenseNoise, round, WEAK_DP_SLOT);
                weak_dp_aggregate(updates, global, clip_tau, noise_sigma, &mut rng)?
            }
            DefenseSpec::CClip { clip_tau } => cclip_aggregate(updates, global, clip_tau)?,
            DefenseSpec::CoordMedian => coord_median_aggregate(updates)?,
            DefenseSpec::TrimmedMean { trim_beta } => trimmed_mean_aggregate(updates, trim_beta)?,
            DefenseSpec::RobustLr { theta, eta } => {
                robust_lr_aggregate(updates, global, theta, eta)?
            }
            _ => return Ok(None),
        };
        Ok(Some(out))
    }

    fn defend_after_aggregation(
        &mut self,
        global: ParamVector,
        aux: &RoundState,
    ) -> Result<ParamVector> {
        match self.spec {
            DefenseSpec::Crfl {
                clip_tau,
                noise_sigma,
            } => {
                let mut rng =
                    aux.streams
                        .stream(Purpose::DefenseNoise, aux.round_index as u64, CRFL_SLOT);
                Ok(crfl_postprocess(global, clip_tau, noise_sigma, &mut rng))
            }
            _ => Ok(global),
        }
    }

    fn state_snapshot(&self) -> Option<Vec<u8>> {
        self.is_stateful().then(|| self.state.to_bytes())
    }
}
