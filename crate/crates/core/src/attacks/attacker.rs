use std::collections::BTreeSet;

use rand::seq::index;

use super::dlg::{reconstruct_data, DummyInit, GradientTarget};
use super::poison::{attack_model, poison_data};
use super::{
    is_data_poisoning_attack, is_data_reconstruction_attack, is_model_poisoning_attack, AttackKind,
    AttackSpec, BackdoorSource, MaliciousSelection,
};
use crate::data::Dataset;
use crate::engine::{AttackHook, ClientUpdate, ReconstructionReport, RoundObservation, RoundState};
use crate::model::ModelSpec;
use crate::rng::{Purpose, RngStreams};
use crate::Result;

/// `floor(ratio * n)` distinct clients, at least one when `ratio > 0`.
pub fn select_malicious(
    ratio: f64,
    num_clients: usize,
    streams: &RngStreams,
    draw: u64,
) -> BTreeSet<usize> {
    let mut count = (ratio * num_clients as f64).floor() as usize;
    if ratio > 0.0 {
        count = count.max(1);
    }
    let count = count.min(num_clients);
    let mut rng = streams.stream(Purpose::MaliciousSelection, draw, 0);
    index::sample(&mut rng, num_clients, count)
        .into_iter()
        .collect()
}

/// The run's attacker: an [`AttackSpec`] bound to a federation.
#[derive(Debug, Clone)]
pub struct Attacker {
    spec: AttackSpec,
    model: ModelSpec,
    num_clients: usize,
    fixed: BTreeSet<usize>,
}

impl Attacker {
    pub fn new(
        spec: AttackSpec,
        model: ModelSpec,
        num_clients: usize,
        streams: &RngStreams,
    ) -> Result<Self> {
        spec.validate(num_clients, model.num_classes)?;
        let fixed = match &spec.malicious {
            MaliciousSelection::Clients(ids) => ids.iter().copied().collect(),
            MaliciousSelection::Ratio { ratio, .. } => {
                select_malicious(*ratio, num_clients, streams, 0)
            }
        };
        Ok(Self {
            spec,
            model,
            num_clients,
            fixed,
        })
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn malicious_for_round(&self, state: &RoundState) -> BTreeSet<usize> {
        match self.spec.malicious {
            MaliciousSelection::Ratio {
                ratio,
                redraw_each_round: true,
            } => select_malicious(
                ratio,
                self.num_clients,
                &state.streams,
                state.round_index as u64 + 1,
            ),
            _ => self.fixed.clone(),
        }
    }
}

impl AttackHook for Attacker {
    fn name(&self) -> &str {
        self.spec.kind.name()
    }

    fn is_data_poisoning_attack(&self) -> bool {
        is_data_poisoning_attack(Some(&self.spec))
    }

    fn is_model_poisoning_attack(&self) -> bool {
        is_model_poisoning_attack(Some(&self.spec))
    }

    fn is_data_reconstruction_attack(&self) -> bool {
        is_data_reconstruction_attack(Some(&self.spec))
    }

    fn poisons_training_data(&self) -> bool {
        matches!(
            self.spec.kind,
            AttackKind::LabelFlip { .. }
                | AttackKind::ModelReplacement {
                    backdoor: BackdoorSource::LabelFlip(_),
                    ..
                }
        )
    }

    fn malicious_clients(&self, aux: &RoundState) -> BTreeSet<usize> {
        self.malicious_for_round(aux)
    }

    fn poison_data(
        &self,
        client_id: usize,
        data: &Dataset,
        aux: &RoundState,
    ) -> Result<Option<Dataset>> {
        let pairs = match &self.spec.kind {
            AttackKind::LabelFlip { flip_pairs } => flip_pairs,
            AttackKind::ModelReplacement {
                backdoor: BackdoorSource::LabelFlip(pairs),
                ..
            } => pairs,
            _ => return Ok(None),
        };
        if !self.malicious_for_round(aux).contains(&client_id) {
            return Ok(None);
        }
        poison_data(data, pairs).map(Some)
    }

    fn attack_model(
        &self,
        updates: Vec<ClientUpdate>,
        aux: &RoundState,
    ) -> Result<Vec<ClientUpdate>> {
        if !self.is_model_poisoning_attack() {
            return Ok(updates);
        }
        attack_model(
            updates,
            aux.into(),
            &self.spec.kind,
            &self.malicious_for_round(aux),
        )
    }

    fn reconstruct_data(
        &self,
        observation: &RoundObservation<'_>,
        aux: &RoundState,
    ) -> Result<Vec<ReconstructionReport>> {
        let AttackKind::Dlg(cfg) = &self.spec.kind else {
            return Ok(Vec::new());
        };
        let victims = self.malicious_for_round(aux);
        let mut reports = Vec::new();
        for (update, &steps) in observation.updates.iter().zip(observation.local_steps) {
            if !victims.contains(&update.client_id) {
                continue;
            }
            let target = GradientTarget::ModelDelta {
                before: observation.global_before,
                after: &update.params,
                learning_rate: observation.local_learning_rate,
                steps,
            };
            let mut rng = aux.streams.stream(
                Purpose::Reconstruction,
                aux.round_index as u64,
                update.client_id as u64,
            );
            let rec = reconstruct_data(
                &self.model,
                observation.global_before,
                target,
                cfg,
                DummyInit::Gaussian(&mut rng),
            )?;
            reports.push(ReconstructionReport {
                client_id: update.client_id,
                features: rec.features,
                label_probs: rec.label_probs,
                match_loss: rec.match_loss,
                iterations: rec.iterations,
            });
        }
        Ok(reports)
    }
}
