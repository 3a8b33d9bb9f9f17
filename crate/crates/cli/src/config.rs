//! Experiment configuration: strict YAML schema, defaults, validation and
//! conversion into core specs.
//!
//! Every struct rejects unknown keys. See `docs/config.md` for the full key
//! reference.

use std::path::{Path, PathBuf};

use fedsim_core::attacks::{
    AttackKind, AttackSpec, BackdoorSource, ByzantineMode, DlgConfig, FlipPair, MaliciousSelection,
};
use fedsim_core::defenses::{DefenseSpec, DEFAULT_WEISZFELD_ITERS, DEFAULT_WEISZFELD_NU};
use fedsim_core::engine::{OptimizerSpec, ServerRule};
use fedsim_core::model::{ModelKind, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

pub const ATTACK_TYPES: &[&str] = &[
    "byzantine",
    "byz_zero",
    "byz_random",
    "byz_flip",
    "label_flip",
    "model_replacement",
    "dlg",
];

pub const DEFENSE_TYPES: &[&str] = &[
    "krum",
    "mkrum",
    "foolsgold",
    "norm_clip",
    "robust_lr",
    "slsgd",
    "geo_median",
    "weak_dp",
    "cclip",
    "coord_median",
    "trimmed_mean",
    "rfa",
    "crfl",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub common: CommonConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub security: SecurityConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonConfig {
    #[serde(default)]
    pub seed: u64,
    pub rounds: usize,
    pub clients_total: usize,
    /// Defaults to `clients_total`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    /// Train selected clients on a thread pool (results are identical).
    #[serde(default = "default_true")]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub dirichlet_alpha: f64,
    /// Per-coordinate standard deviation of the synthetic class means.
    pub mean_scale: f64,
    /// Training CSV (`source: csv`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Test CSV; when absent, `test_fraction` of `path` is held out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            dim: 20,
            samples_per_client: 100,
            test_samples: 1000,
            dirichlet_alpha: 0.5,
            mean_scale: 1.0,
            path: None,
            test_path: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logreg,
            hidden_dims: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Fedavg,
    Fedopt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerRuleKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub server_lr: f64,
    pub rule: ServerRuleKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let ServerRule::Adam { beta1, beta2, eps } = ServerRule::DEFAULT_ADAM else {
            unreachable!()
        };
        Self {
            kind: OptimizerKind::Fedavg,
            server_lr: 1.0,
            rule: ServerRuleKind::Sgd,
            momentum: 0.0,
            beta1,
            beta2,
            eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecurityConfig {
    #[serde(default)]
    pub enable_attack: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_args: Option<AttackArgs>,
    #[serde(default)]
    pub enable_defense: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_args: Option<DefenseArgs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByzantineModeArg {
    Zero,
    Random,
    Flip,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malicious_ratio: Option<f64>,
    /// Explicit malicious client ids; takes precedence over the ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malicious_clients: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redraw_each_round: Option<bool>,
    /// Required for `attack_type: byzantine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byzantine_mode: Option<ByzantineModeArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_pairs: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dlg_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dlg_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dlg_num_dummies: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dlg_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byzantine_f: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub krum_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slsgd_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rlr_theta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rlr_eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weiszfeld_nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weiszfeld_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foolsgold_kappa: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Defaults to `./runs/<timestamp>-<name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_RANDOM_SIGMA: f64 = 1.0;
pub const DEFAULT_MALICIOUS_RATIO: f64 = 0.1;
pub const DEFAULT_FLIP_PAIRS: &[(usize, usize)] = &[(3, 9), (2, 1)];
pub const DEFAULT_BYZANTINE_F: usize = 1;
pub const DEFAULT_KRUM_M: usize = 5;
pub const DEFAULT_CLIP_TAU: f64 = 1.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.001;
pub const DEFAULT_TRIM_BETA: f64 = 0.1;
pub const DEFAULT_SLSGD_ALPHA: f64 = 0.5;
pub const DEFAULT_RLR_THETA: usize = 4;
pub const DEFAULT_RLR_ETA: f64 = 1.0;
pub const DEFAULT_FOOLSGOLD_KAPPA: f64 = 1.0;

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_yaml(&text)?;
        // relative dataset paths are taken relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.path, &mut cfg.data.test_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    pub fn clients_per_round(&self) -> usize {
        self.common
            .clients_per_round
            .unwrap_or(self.common.clients_total)
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model.kind {
            ModelKind::Logreg => ModelSpec::logreg(self.data.dim, self.data.num_classes),
            ModelKind::Mlp => ModelSpec::mlp(
                self.data.dim,
                self.model.hidden_dims.clone(),
                self.data.num_classes,
            ),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            local_epochs: self.local.local_epochs,
            batch_size: self.local.batch_size,
            learning_rate: self.local.learning_rate,
            seed: 0,
        }
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        let o = &self.optimizer;
        match o.kind {
            OptimizerKind::Fedavg => OptimizerSpec::FedAvg,
            OptimizerKind::Fedopt => OptimizerSpec::FedOpt {
                server_lr: o.server_lr,
                rule: match o.rule {
                    ServerRuleKind::Sgd => ServerRule::Sgd {
                        momentum: o.momentum,
                    },
                    ServerRuleKind::Adam => ServerRule::Adam {
                        beta1: o.beta1,
                        beta2: o.beta2,
                        eps: o.eps,
                    },
                },
            },
        }
    }

    /// The active attack, or `None` when `enable_attack` is false.
    pub fn attack_spec(&self) -> Result<Option<AttackSpec>, ConfigError> {
        let sec = &self.security;
        if !sec.enable_attack {
            return Ok(None);
        }
        let kind_name = sec.attack_type.as_deref().ok_or_else(|| {
            ConfigError::missing(
                "security.attack_type",
                "required when enable_attack is true",
            )
        })?;
        let args = sec.attack_args.clone().unwrap_or_default();
        let flip_pairs = || -> Vec<FlipPair> {
            args.flip_pairs
                .clone()
                .unwrap_or_else(|| DEFAULT_FLIP_PAIRS.to_vec())
                .into_iter()
                .map(|(s, t)| FlipPair::new(s, t))
                .collect()
        };
        let byzantine = |mode| AttackKind::Byzantine {
            mode,
            random_sigma: args.random_sigma.unwrap_or(DEFAULT_RANDOM_SIGMA),
        };
        let kind = match kind_name {
            "byz_zero" => byzantine(ByzantineMode::Zero),
            "byz_random" => byzantine(ByzantineMode::Random),
            "byz_flip" => byzantine(ByzantineMode::Flip),
            "byzantine" => byzantine(
                match args.byzantine_mode.ok_or_else(|| {
                    ConfigError::missing(
                        "security.attack_args.byzantine_mode",
                        "required for attack_type byzantine",
                    )
                })? {
                    ByzantineModeArg::Zero => ByzantineMode::Zero,
                    ByzantineModeArg::Random => ByzantineMode::Random,
                    ByzantineModeArg::Flip => ByzantineMode::Flip,
                },
            ),
            "label_flip" => AttackKind::LabelFlip {
                flip_pairs: flip_pairs(),
            },
            "model_replacement" => AttackKind::ModelReplacement {
                scale_gamma: args.scale_gamma,
                backdoor: BackdoorSource::LabelFlip(flip_pairs()),
            },
            "dlg" => {
                let d = DlgConfig::default();
                AttackKind::Dlg(DlgConfig {
                    iters: args.dlg_iters.unwrap_or(d.iters),
                    lr: args.dlg_lr.unwrap_or(d.lr),
                    num_dummies: args.dlg_num_dummies.unwrap_or(d.num_dummies),
                    tolerance: args.dlg_tolerance.unwrap_or(d.tolerance),
                })
            }
            other => {
                return Err(ConfigError::Invalid {
                    key: "security.attack_type".into(),
                    message: format!(
                        "unknown attack `{other}` (known: {})",
                        ATTACK_TYPES.join(", ")
                    ),
                })
            }
        };
        let malicious = match &args.malicious_clients {
            Some(ids) => MaliciousSelection::Clients(ids.clone()),
            None => MaliciousSelection::Ratio {
                ratio: args.malicious_ratio.unwrap_or(DEFAULT_MALICIOUS_RATIO),
                redraw_each_round: args.redraw_each_round.unwrap_or(false),
            },
        };
        let spec = AttackSpec::new(kind).with_malicious(malicious);
        spec.validate(self.common.clients_total, self.data.num_classes)
            .map_err(|e| ConfigError::invalid("security.attack_args", e))?;
        Ok(Some(spec))
    }

    /// The active defense, or `None` when `enable_defense` is false.
    pub fn defense_spec(&self) -> Result<Option<DefenseSpec>, ConfigError> {
        let sec = &self.security;
        if !sec.enable_defense {
            return Ok(None);
        }
        let kind = sec.defense_type.as_deref().ok_or_else(|| {
            ConfigError::missing(
                "security.defense_type",
                "required when enable_defense is true",
            )
        })?;
        let a = sec.defense_args.clone().unwrap_or_default();
        let f = a.byzantine_f.unwrap_or(DEFAULT_BYZANTINE_F);
        let tau = a.clip_tau.unwrap_or(DEFAULT_CLIP_TAU);
        let sigma = a.noise_sigma.unwrap_or(DEFAULT_NOISE_SIGMA);
        let beta = a.trim_beta.unwrap_or(DEFAULT_TRIM_BETA);
        let nu = a.weiszfeld_nu.unwrap_or(DEFAULT_WEISZFELD_NU);
        let iters = a.weiszfeld_iters.unwrap_or(DEFAULT_WEISZFELD_ITERS);
        let spec = match kind {
            "krum" => DefenseSpec::Krum { byzantine_f: f },
            "mkrum" => DefenseSpec::MKrum {
                byzantine_f: f,
                krum_m: a.krum_m.unwrap_or(DEFAULT_KRUM_M),
            },
            "foolsgold" => DefenseSpec::Foolsgold {
                kappa: a.foolsgold_kappa.unwrap_or(DEFAULT_FOOLSGOLD_KAPPA),
            },
            "norm_clip" => DefenseSpec::NormClip { clip_tau: tau },
            "robust_lr" => DefenseSpec::RobustLr {
                theta: a.rlr_theta.unwrap_or(DEFAULT_RLR_THETA),
                eta: a.rlr_eta.unwrap_or(DEFAULT_RLR_ETA),
            },
            "slsgd" => DefenseSpec::Slsgd {
                trim_beta: beta,
                alpha: a.slsgd_alpha.unwrap_or(DEFAULT_SLSGD_ALPHA),
            },
            "geo_median" => DefenseSpec::GeoMedian { nu, iters },
            "weak_dp" => DefenseSpec::WeakDp {
                clip_tau: tau,
                noise_sigma: sigma,
            },
            "cclip" => DefenseSpec::CClip { clip_tau: tau },
            "coord_median" => DefenseSpec::CoordMedian,
            "trimmed_mean" => DefenseSpec::TrimmedMean { trim_beta: beta },
            "rfa" => DefenseSpec::Rfa { nu, iters },
            "crfl" => DefenseSpec::Crfl {
                clip_tau: tau,
                noise_sigma: sigma,
            },
            other => {
                return Err(ConfigError::Invalid {
                    key: "security.defense_type".into(),
                    message: format!(
                        "unknown defense `{other}` (known: {})",
                        DEFENSE_TYPES.join(", ")
                    ),
                })
            }
        };
        spec.validate()
            .map_err(|e| ConfigError::invalid("security.defense_args", e))?;
        spec.validate_for_clients(self.clients_per_round())
            .map_err(|e| ConfigError::invalid("security.defense_args", e))?;
        Ok(Some(spec))
    }

    /// Full validation; every error names the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.common;
        if c.rounds == 0 {
            return Err(ConfigError::invalid_msg(
                "common.rounds",
                "must be at least 1",
            ));
        }
        if c.clients_total == 0 {
            return Err(ConfigError::invalid_msg(
                "common.clients_total",
                "must be at least 1",
            ));
        }
        let per_round = self.clients_per_round();
        if per_round == 0 || per_round > c.clients_total {
            return Err(ConfigError::invalid_msg(
                "common.clients_per_round",
                format!("must be in 1..={} (clients_total)", c.clients_total),
            ));
        }

        let d = &self.data;
        if d.num_classes < 2 {
            return Err(ConfigError::invalid_msg(
                "data.num_classes",
                "must be at least 2",
            ));
        }
        if d.dim == 0 {
            return Err(ConfigError::invalid_msg("data.dim", "must be at least 1"));
        }
        if !(d.dirichlet_alpha.is_finite() && d.dirichlet_alpha > 0.0) {
            return Err(ConfigError::invalid_msg(
                "data.dirichlet_alpha",
                "must be positive",
            ));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.samples_per_client == 0 {
                    return Err(ConfigError::invalid_msg(
                        "data.samples_per_client",
                        "must be at least 1",
                    ));
                }
                if d.test_samples == 0 {
                    return Err(ConfigError::invalid_msg(
                        "data.test_samples",
                        "must be at least 1",
                    ));
                }
                if !(d.mean_scale.is_finite() && d.mean_scale > 0.0) {
                    return Err(ConfigError::invalid_msg(
                        "data.mean_scale",
                        "must be positive",
                    ));
                }
            }
            DataSource::Csv => {
                if d.path.is_none() {
                    return Err(ConfigError::missing(
                        "data.path",
                        "required when data.source is csv",
                    ));
                }
                if d.test_path.is_none() && !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
                    return Err(ConfigError::invalid_msg(
                        "data.test_fraction",
                        "must be in (0, 1)",
                    ));
                }
            }
        }

        self.model_spec()
            .validate()
            .map_err(|e| ConfigError::invalid("model", e))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::invalid("local", e))?;
        self.optimizer_spec()
            .validate()
            .map_err(|e| ConfigError::invalid("optimizer", e))?;
        if self.output.formats.is_empty() {
            return Err(ConfigError::invalid_msg(
                "output.formats",
                "must list at least one format",
            ));
        }
        self.attack_spec()?;
        self.defense_spec()?;
        Ok(())
    }
}
