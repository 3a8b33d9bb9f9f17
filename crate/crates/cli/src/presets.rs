//! Preset catalog. Every preset shares one base federation and differs only
//! in its `security` block.

use crate::config::{
    AttackArgs, CommonConfig, DataConfig, DefenseArgs, ExperimentConfig, LocalConfig, ModelConfig,
    OptimizerConfig, OutputConfig, SecurityConfig, DEFENSE_TYPES,
};
use crate::ConfigError;

/// Attacks compared against the benign run.
pub const ATTACK_PRESETS: &[&str] = &["byz_zero", "byz_random", "byz_flip", "label_flip"];
/// Defenses crossed with every attack in the `attackXdefense-*` grid.
pub const GRID_DEFENSES: &[&str] = &["mkrum", "foolsgold", "rfa"];
/// Attacks that only get a standalone preset.
const EXTRA_ATTACKS: &[&str] = &["model_replacement", "dlg"];

pub const BASE_SEED: u64 = 42;

/// The shared federation: 10 clients, logistic regression, non-IID
/// synthetic Gaussian clusters, 50 rounds of FedAvg.
pub fn base_config() -> ExperimentConfig {
    ExperimentConfig {
        common: CommonConfig {
            seed: BASE_SEED,
            rounds: 50,
            clients_total: 10,
            clients_per_round: None,
            parallel: true,
        },
        data: DataConfig {
            num_classes: 10,
            dim: 20,
            samples_per_client: 100,
            test_samples: 1000,
            dirichlet_alpha: 0.5,
            mean_scale: 1.0,
            ..DataConfig::default()
        },
        model: ModelConfig::default(),
        local: LocalConfig {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
        },
        optimizer: OptimizerConfig::default(),
        security: SecurityConfig::default(),
        output: OutputConfig::default(),
    }
}

fn attack_security(attack: &str) -> SecurityConfig {
    let args = AttackArgs {
        malicious_ratio: Some(0.1),
        flip_pairs: matches!(attack, "label_flip" | "model_replacement")
            .then(|| vec![(3, 9), (2, 1)]),
        ..AttackArgs::default()
    };
    SecurityConfig {
        enable_attack: true,
        attack_type: Some(attack.to_string()),
        attack_args: Some(args),
        ..SecurityConfig::default()
    }
}

fn with_defense(mut security: SecurityConfig, defense: &str) -> SecurityConfig {
    let args = match defense {
        "mkrum" => DefenseArgs {
            byzantine_f: Some(1),
            krum_m: Some(5),
            ..DefenseArgs::default()
        },
        "krum" => DefenseArgs {
            byzantine_f: Some(1),
            ..DefenseArgs::default()
        },
        _ => DefenseArgs::default(),
    };
    security.enable_defense = true;
    security.defense_type = Some(defense.to_string());
    security.defense_args = Some(args);
    security
}

pub fn preset_names() -> Vec<String> {
    let mut names = vec!["benign".to_string()];
    names.extend(
        ATTACK_PRESETS
            .iter()
            .chain(EXTRA_ATTACKS)
            .map(|a| format!("attack-{a}")),
    );
    names.extend(DEFENSE_TYPES.iter().map(|d| format!("defense-{d}")));
    for a in ATTACK_PRESETS {
        for d in GRID_DEFENSES {
            names.push(format!("attackXdefense-{a}-{d}"));
        }
    }
    names
}

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let security = if name == "benign" {
        Some(SecurityConfig::default())
    } else if let Some(attack) = name.strip_prefix("attack-") {
        (ATTACK_PRESETS.contains(&attack) || EXTRA_ATTACKS.contains(&attack))
            .then(|| attack_security(attack))
    } else if let Some(defense) = name.strip_prefix("defense-") {
        DEFENSE_TYPES
            .contains(&defense)
            .then(|| with_defense(SecurityConfig::default(), defense))
    } else if let Some(cell) = name.strip_prefix("attackXdefense-") {
        cell.rsplit_once('-')
            .filter(|(a, d)| ATTACK_PRESETS.contains(a) && GRID_DEFENSES.contains(d))
            .map(|(a, d)| with_defense(attack_security(a), d))
    } else {
        None
    };
    let security = security.ok_or_else(|| ConfigError::UnknownPreset {
        name: name.to_string(),
        catalog: preset_names().join("\n"),
    })?;
    Ok(ExperimentConfig {
        security,
        ..base_config()
    })
}
