//! The federated round loop.
//!
//! Each round runs a fixed pipeline:
//!
//! 1. client selection, optional data poisoning, local training (the only
//!    step that may run concurrently);
//! 2. model poisoning over the full update list;
//! 3. before-aggregation defense;
//! 4. on-aggregation defense, or the server optimizer when the defender does
//!    not replace aggregation;
//! 5. after-aggregation defense on the new global model;
//! 6. passive reconstruction, which only observes;
//! 7. evaluation on the held-out test set.

mod aggregate;
pub mod hooks;

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub(crate) use aggregate::{check_layouts, sorted_by_client, weighted_mean};
pub use aggregate::{fedavg_aggregate, fedopt_step, OptimizerSpec, ServerOptimizer, ServerRule};
pub use hooks::{AttackHook, DefenseHook, HookRegistry, ReconstructionReport, RoundObservation};

use crate::data::Dataset;
use crate::model::{self, ModelSpec, TrainConfig};
use crate::params::ParamVector;
use crate::rng::{Purpose, RngStreams};
use crate::{Error, Execution, Result};

/// A client's submission for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub sample_count: usize,
    pub params: ParamVector,
}

impl ClientUpdate {
    pub fn new(client_id: usize, sample_count: usize, params: ParamVector) -> Self {
        Self {
            client_id,
            sample_count,
            params,
        }
    }
}

/// Auxiliary information threaded through every hook.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round_index: usize,
    /// Model broadcast to clients at the start of this round.
    pub global_params: ParamVector,
    /// Model broadcast in the previous round; absent at round 0.
    pub prev_global_params: Option<ParamVector>,
    pub streams: RngStreams,
}

impl RoundState {
    pub fn initial(global_params: ParamVector, streams: RngStreams) -> Self {
        Self {
            round_index: 0,
            global_params,
            prev_global_params: None,
            streams,
        }
    }
}

/// Static description of the federation: model, clients, test data.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: ModelSpec,
    /// Local training settings. The `seed` field is ignored; each client gets
    /// a fresh seed per round from the run's streams.
    pub train: TrainConfig,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub clients_per_round: usize,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub client_id: usize,
    pub match_loss: f64,
    pub iterations: usize,
}

/// Per-round outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub train_loss_mean: f64,
    pub num_updates_aggregated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_selected_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_poisoned_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<Vec<ReconstructionSummary>>,
    pub wall_time_ms: u64,
}

impl MetricsRecord {
    /// Equality ignoring `wall_time_ms`.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        Self {
            wall_time_ms: 0,
            ..self.clone()
        } == Self {
            wall_time_ms: 0,
            ..other.clone()
        }
    }
}

/// Pipeline stages, as recorded by an instrumented round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    DataPoison(usize),
    LocalTrain(usize),
    ModelPoison,
    DefenseBefore,
    Aggregate,
    DefenseOn,
    DefenseAfter,
    Reconstruct,
    Evaluate,
}

/// Uniform sample of `num_per_round` distinct client ids, sorted ascending.
pub fn select_clients(
    round_index: usize,
    num_total: usize,
    num_per_round: usize,
    streams: &RngStreams,
) -> Result<Vec<usize>> {
    if num_per_round == 0 || num_per_round > num_total {
        return Err(Error::Config(format!(
            "clients_per_round must be in 1..={num_total}, got {num_per_round}"
        )));
    }
    if num_per_round == num_total {
        return Ok((0..num_total).collect());
    }
    let mut rng = streams.stream(Purpose::ClientSelection, round_index as u64, 0);
    let mut ids = index::sample(&mut rng, num_total, num_per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn record(trace: &mut Option<&mut Vec<Stage>>, stage: Stage) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(stage);
    }
}

/// Executes one round and returns the next state with the round's metrics.
pub fn run_round(
    fed: &Federation,
    state: &RoundState,
    registry: &mut HookRegistry,
    optimizer: &mut ServerOptimizer,
    mut trace: Option<&mut Vec<Stage>>,
) -> Result<(RoundState, MetricsRecord)> {
    let started = Instant::now();
    let round = state.round_index;
    let selected = select_clients(
        round,
        fed.clients.len(),
        fed.clients_per_round,
        &state.streams,
    )?;

    // (1) data views are decided sequentially; training may fan out
    let mut poisoned: Vec<usize> = Vec::new();
    let mut tasks: Vec<(usize, Cow<'_, Dataset>, u64)> = Vec::with_capacity(selected.len());
    for &id in &selected {
        let mut data = Cow::Borrowed(&fed.clients[id]);
        if let Some(attacker) = registry.attacker().filter(|a| a.poisons_training_data()) {
            if let Some(view) = attacker.poison_data(id, &fed.clients[id], state)? {
                record(&mut trace, Stage::DataPoison(id));
                poisoned.push(id);
                data = Cow::Owned(view);
            }
        }
        let seed = state
            .streams
            .seed(Purpose::LocalTraining, round as u64, id as u64);
        tasks.push((id, data, seed));
    }

    let reports = fed.execution.map(&tasks, |(_, data, seed)| {
        let cfg = TrainConfig {
            seed: *seed,
            ..fed.train
        };
        model::local_train_report(&fed.model, &state.global_params, data, &cfg)
    });

    let mut updates = Vec::with_capacity(tasks.len());
    let mut local_steps = Vec::with_capacity(tasks.len());
    let mut train_losses = Vec::with_capacity(tasks.len());
    for ((id, data, _), report) in tasks.iter().zip(reports) {
        record(&mut trace, Stage::LocalTrain(*id));
        match report {
            Ok(r) => {
                updates.push(ClientUpdate::new(*id, data.len(), r.params));
                local_steps.push(r.steps);
                train_losses.push(r.mean_loss);
            }
            Err(Error::EmptyDataset) => continue,
            Err(e) => return Err(e),
        }
    }
    if updates.is_empty() {
        return Err(Error::Contract(format!(
            "round {round}: no selected client could train"
        )));
    }
    let train_loss_mean = train_losses.iter().sum::<f64>() / train_losses.len() as f64;

    // (2) model poisoning
    if let Some(attacker) = registry
        .attacker()
        .filter(|a| a.is_model_poisoning_attack())
    {
        record(&mut trace, Stage::ModelPoison);
        let malicious = attacker.malicious_clients(state);
        poisoned.extend(
            updates
                .iter()
                .map(|u| u.client_id)
                .filter(|id| malicious.contains(id)),
        );
        updates = attacker.attack_model(updates, state)?;
        if updates.iter().any(|u| !u.params.is_finite()) {
            return Err(Error::NonFinite(format!(
                "updates after attack `{}`",
                attacker.name()
            )));
        }
    }
    poisoned.sort_unstable();
    poisoned.dedup();
    let submitted = updates.clone();

    // (3) before-aggregation defense
    let mut defense_selected_ids = None;
    if let Some(defender) = registry
        .defender_mut()
        .filter(|d| d.is_defense_before_aggregation())
    {
        record(&mut trace, Stage::DefenseBefore);
        updates = defender.defend_before_aggregation(updates, state)?;
        if updates.is_empty() {
            return Err(Error::EmptyAggregation {
                defense: defender.name().to_string(),
            });
        }
        defense_selected_ids = Some(updates.iter().map(|u| u.client_id).collect());
    }

    // (4) aggregation
    let mut aggregated = None;
    if let Some(defender) = registry
        .defender_mut()
        .filter(|d| d.is_defense_on_aggregation())
    {
        record(&mut trace, Stage::DefenseOn);
        aggregated = defender.defend_on_aggregation(&updates, state)?;
    }
    let mut global = match aggregated {
        Some(g) => g,
        None => {
            record(&mut trace, Stage::Aggregate);
            optimizer.aggregate(&state.global_params, &updates)?
        }
    };

    // (5) after-aggregation defense
    if let Some(defender) = registry
        .defender_mut()
        .filter(|d| d.is_defense_after_aggregation())
    {
        record(&mut trace, Stage::DefenseAfter);
        global = defender.defend_after_aggregation(global, state)?;
    }
    if !global.is_finite() {
        return Err(Error::NonFinite(format!(
            "global model after round {round}"
        )));
    }

    // (6) passive reconstruction
    let mut reconstruction = None;
    if let Some(attacker) = registry
        .attacker()
        .filter(|a| a.is_data_reconstruction_attack())
    {
        record(&mut trace, Stage::Reconstruct);
        let observation = RoundObservation {
            global_before: &state.global_params,
            global_after: &global,
            updates: &submitted,
            local_learning_rate: fed.train.learning_rate,
            local_steps: &local_steps,
        };
        let reports = attacker.reconstruct_data(&observation, state)?;
        reconstruction = Some(
            reports
                .iter()
                .map(|r| ReconstructionSummary {
                    client_id: r.client_id,
                    match_loss: r.match_loss,
                    iterations: r.iterations,
                })
                .collect(),
        );
    }

    // (7) evaluation
    record(&mut trace, Stage::Evaluate);
    let eval = model::evaluate(&fed.model, &global, &fed.test)?;
    let has_attacker = registry
        .attacker()
        .is_some_and(|a| !a.is_data_reconstruction_attack());

    let metrics = MetricsRecord {
        round,
        test_accuracy: eval.accuracy,
        test_loss: eval.loss,
        train_loss_mean,
        num_updates_aggregated: updates.len(),
        defense_selected_ids,
        attack_poisoned_ids: has_attacker.then_some(poisoned),
        reconstruction,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    let next = RoundState {
        round_index: round + 1,
        global_params: global,
        prev_global_params: Some(state.global_params.clone()),
        streams: state.streams,
    };
    Ok((next, metrics))
}

/// Multi-round driver around [`run_round`].
pub struct Simulation {
    federation: Federation,
    registry: HookRegistry,
    optimizer: ServerOptimizer,
    state: RoundState,
}

impl Simulation {
    pub fn new(
        federation: Federation,
        registry: HookRegistry,
        optimizer: ServerOptimizer,
        initial_params: ParamVector,
        streams: RngStreams,
    ) -> Result<Self> {
        if federation.clients.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        federation.train.validate()?;
        Ok(Self {
            federation,
            registry,
            optimizer,
            state: RoundState::initial(initial_params, streams),
        })
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn registry(&self) -> &HookRegistry {
        &self.registry
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        self.step_traced(None)
    }

    pub fn step_traced(&mut self, trace: Option<&mut Vec<Stage>>) -> Result<MetricsRecord> {
        let (next, metrics) = run_round(
            &self.federation,
            &self.state,
            &mut self.registry,
            &mut self.optimizer,
            trace,
        )?;
        self.state = next;
        Ok(metrics)
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<MetricsRecord>> {
        (0..rounds).map(|_| self.step()).collect()
    }
}
