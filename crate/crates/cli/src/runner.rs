//! Builds a federation from a config and runs it.

use fedsim_core::attacks::Attacker;
use fedsim_core::data::{partition_dirichlet, Dataset, GaussianClusters};
use fedsim_core::defenses::Defender;
use fedsim_core::engine::{Federation, HookRegistry, MetricsRecord, ServerOptimizer, Simulation};
use fedsim_core::model::init_params;
use fedsim_core::rng::{Purpose, RngStreams};
use fedsim_core::Execution;
use rand::seq::SliceRandom;

use crate::config::{DataSource, ExperimentConfig};
use crate::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup failed: {0}")]
    Setup(#[source] fedsim_core::Error),
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: fedsim_core::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    /// Serialized defender memory, for defenses that keep any.
    pub defender_state: Option<Vec<u8>>,
}

/// Client partitions and the test set.
pub fn build_data(
    cfg: &ExperimentConfig,
    streams: &RngStreams,
) -> Result<(Vec<Dataset>, Dataset), RunError> {
    let d = &cfg.data;
    let n = cfg.common.clients_total;
    let (train, test) = match d.source {
        DataSource::Synthetic => {
            let clusters = GaussianClusters::new(
                d.num_classes,
                d.dim,
                d.mean_scale,
                &mut streams.stream(Purpose::ClusterMeans, 0, 0),
            )
            .map_err(RunError::Setup)?;
            let train = clusters.sample(
                n * d.samples_per_client,
                &mut streams.stream(Purpose::TrainSamples, 0, 0),
            );
            let test = clusters.sample(
                d.test_samples,
                &mut streams.stream(Purpose::TestSamples, 0, 0),
            );
            (train, test)
        }
        DataSource::Csv => {
            let path = d.path.as_ref().expect("validated");
            let all = Dataset::from_csv(path, d.num_classes).map_err(RunError::Setup)?;
            if all.dim() != d.dim {
                return Err(ConfigError::invalid_msg(
                    "data.dim",
                    format!(
                        "{} has {} feature columns, config says {}",
                        path.display(),
                        all.dim(),
                        d.dim
                    ),
                )
                .into());
            }
            match &d.test_path {
                Some(tp) => {
                    let test = Dataset::from_csv(tp, d.num_classes).map_err(RunError::Setup)?;
                    if test.dim() != d.dim {
                        return Err(ConfigError::invalid_msg(
                            "data.test_path",
                            "feature count differs from data.path",
                        )
                        .into());
                    }
                    (all, test)
                }
                None => {
                    let mut idx: Vec<usize> = (0..all.len()).collect();
                    idx.shuffle(&mut streams.stream(Purpose::Partition, 1, 0));
                    let held = ((all.len() as f64) * d.test_fraction).round() as usize;
                    let held = held.clamp(1, all.len().saturating_sub(1).max(1));
                    let (test_idx, train_idx) = idx.split_at(held);
                    let (mut test_idx, mut train_idx) = (test_idx.to_vec(), train_idx.to_vec());
                    test_idx.sort_unstable();
                    train_idx.sort_unstable();
                    (all.select(&train_idx), all.select(&test_idx))
                }
            }
        }
    };
    let clients = partition_dirichlet(
        &train,
        n,
        d.dirichlet_alpha,
        &mut streams.stream(Purpose::Partition, 0, 0),
    )
    .map_err(RunError::Setup)?;
    Ok((clients, test))
}

/// Wires the engine, attacker and defender for `cfg`.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation, RunError> {
    cfg.validate()?;
    let streams = RngStreams::new(cfg.common.seed);
    let model = cfg.model_spec();
    let (clients, test) = build_data(cfg, &streams)?;

    let mut registry = HookRegistry::new();
    if let Some(spec) = cfg.attack_spec()? {
        let attacker =
            Attacker::new(spec, model.clone(), clients.len(), &streams).map_err(RunError::Setup)?;
        registry
            .register_attacker(Box::new(attacker))
            .map_err(RunError::Setup)?;
    }
    if let Some(spec) = cfg.defense_spec()? {
        registry
            .register_defender(Box::new(Defender::new(spec).map_err(RunError::Setup)?))
            .map_err(RunError::Setup)?;
    }

    let init =
        init_params(&model, streams.seed(Purpose::ModelInit, 0, 0)).map_err(RunError::Setup)?;
    let federation = Federation {
        model,
        train: cfg.train_config(),
        clients,
        test,
        clients_per_round: cfg.clients_per_round(),
        execution: if cfg.common.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        },
    };
    let optimizer = ServerOptimizer::new(cfg.optimizer_spec()).map_err(RunError::Setup)?;
    Simulation::new(federation, registry, optimizer, init, streams).map_err(RunError::Setup)
}

/// Runs every configured round. Deterministic for a fixed config apart from
/// `wall_time_ms`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, RunError> {
    let mut sim = build_simulation(cfg)?;
    let mut records = Vec::with_capacity(cfg.common.rounds);
    for round in 0..cfg.common.rounds {
        records.push(
            sim.step()
                .map_err(|source| RunError::Round { round, source })?,
        );
    }
    let defender_state = sim.registry().defender().and_then(|d| d.state_snapshot());
    Ok(RunResult {
        records,
        defender_state,
    })
}
