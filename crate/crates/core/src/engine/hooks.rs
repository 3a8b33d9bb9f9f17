//! Extension points for attacks and defenses.
//!
//! A run holds at most one attacker and one defender. The engine consults them
//! at fixed stages of every round; implement [`AttackHook`] or
//! [`DefenseHook`] to plug in a new mechanism.

use std::collections::BTreeSet;

use super::{ClientUpdate, RoundState};
use crate::data::Dataset;
use crate::params::ParamVector;
use crate::{Error, Result};

/// What the server can observe at the end of a round; input to passive
/// reconstruction attacks.
#[derive(Debug, Clone, Copy)]
pub struct RoundObservation<'a> {
    /// Global model broadcast at the start of the round.
    pub global_before: &'a ParamVector,
    /// Global model produced by the round.
    pub global_after: &'a ParamVector,
    /// Updates as submitted by clients (after model poisoning, before any defense).
    pub updates: &'a [ClientUpdate],
    pub local_learning_rate: f64,
    /// Local SGD steps each client took, aligned with `updates`.
    pub local_steps: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub client_id: usize,
    pub features: Vec<Vec<f64>>,
    pub label_probs: Vec<Vec<f64>>,
    pub match_loss: f64,
    pub iterations: usize,
}

pub trait AttackHook: Send + Sync {
    fn name(&self) -> &str;

    fn is_data_poisoning_attack(&self) -> bool;
    fn is_model_poisoning_attack(&self) -> bool;
    fn is_data_reconstruction_attack(&self) -> bool;

    /// Whether clients' training data may be replaced before local training.
    /// Defaults to [`AttackHook::is_data_poisoning_attack`]; attacks that train
    /// a backdoor model on altered data override it.
    fn poisons_training_data(&self) -> bool {
        self.is_data_poisoning_attack()
    }

    /// Clients under the attacker's control in this round.
    fn malicious_clients(&self, _aux: &RoundState) -> BTreeSet<usize> {
        BTreeSet::new()
    }

    /// Replacement training data for `client_id`, or `None` to keep its own.
    fn poison_data(
        &self,
        _client_id: usize,
        _data: &Dataset,
        _aux: &RoundState,
    ) -> Result<Option<Dataset>> {
        Ok(None)
    }

    fn attack_model(
        &self,
        updates: Vec<ClientUpdate>,
        _aux: &RoundState,
    ) -> Result<Vec<ClientUpdate>> {
        Ok(updates)
    }

    fn reconstruct_data(
        &self,
        _observation: &RoundObservation<'_>,
        _aux: &RoundState,
    ) -> Result<Vec<ReconstructionReport>> {
        Ok(Vec::new())
    }
}

pub trait DefenseHook: Send {
    fn name(&self) -> &str;

    fn is_defense_before_aggregation(&self) -> bool;
    fn is_defense_on_aggregation(&self) -> bool;
    fn is_defense_after_aggregation(&self) -> bool;

    fn defend_before_aggregation(
        &mut self,
        updates: Vec<ClientUpdate>,
        _aux: &RoundState,
    ) -> Result<Vec<ClientUpdate>> {
        Ok(updates)
    }

    /// Robust replacement for the aggregation rule. `None` hands aggregation
    /// back to the configured server optimizer.
    fn defend_on_aggregation(
        &mut self,
        _updates: &[ClientUpdate],
        _aux: &RoundState,
    ) -> Result<Option<ParamVector>> {
        Ok(None)
    }

    fn defend_after_aggregation(
        &mut self,
        global: ParamVector,
        _aux: &RoundState,
    ) -> Result<ParamVector> {
        Ok(global)
    }

    /// Serialized cross-round state, for defenses that keep any.
    fn state_snapshot(&self) -> Option<Vec<u8>> {
        None
    }
}

/// Holds the run's single attacker and single defender.
#[derive(Default)]
pub struct HookRegistry {
    attacker: Option<Box<dyn AttackHook>>,
    defender: Option<Box<dyn DefenseHook>>,
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_attacker(&mut self, attacker: Box<dyn AttackHook>) -> Result<()> {
        if self.attacker.is_some() {
            return Err(Error::SingletonViolation("attacker"));
        }
        self.attacker = Some(attacker);
        Ok(())
    }

    pub fn register_defender(&mut self, defender: Box<dyn DefenseHook>) -> Result<()> {
        if self.defender.is_some() {
            return Err(Error::SingletonViolation("defender"));
        }
        self.defender = Some(defender);
        Ok(())
    }

    pub fn attacker(&self) -> Option<&dyn AttackHook> {
        self.attacker.as_deref()
    }

    pub fn defender(&self) -> Option<&dyn DefenseHook> {
        self.defender.as_deref()
    }

    pub fn defender_mut(&mut self) -> Option<&mut (dyn DefenseHook + 'static)> {
        self.defender.as_deref_mut()
    }

    pub fn take_defender(&mut self) -> Option<Box<dyn DefenseHook>> {
        self.defender.take()
    }
}

impl std::fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookRegistry")
            .field(
                "attacker",
                &self.attacker.as_ref().map(|a| a.name().to_string()),
            )
            .field(
                "defender",
                &self.defender.as_ref().map(|d| d.name().to_string()),
            )
            .finish()
    }
}
