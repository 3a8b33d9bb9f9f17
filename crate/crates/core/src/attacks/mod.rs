//! Attacks: model poisoning, data poisoning and data reconstruction.
//!
//! [`Attacker`] wires an [`AttackSpec`] into the engine's [`AttackHook`]
//! interface; the free functions are the underlying pure operations.
//!
//! [`AttackHook`]: crate::engine::AttackHook

mod attacker;
pub mod dlg;
mod poison;

use crate::params::ParamVector;
use crate::{Error, Result};

pub use attacker::{select_malicious, Attacker};
pub use dlg::{reconstruct_data, DlgConfig, DummyInit, GradientTarget, Reconstruction};
pub use poison::{attack_model, byzantine_flip, model_replacement, poison_data, AttackContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByzantineMode {
    /// Every parameter set to zero.
    Zero,
    /// Every parameter replaced by an independent Gaussian draw.
    Random,
    /// `w' = w_g + (w_g - w_local)`: pushes the global model backwards.
    Flip,
}

/// Source class relabelled as target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipPair {
    pub source: usize,
    pub target: usize,
}

impl FlipPair {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackdoorSource {
    /// A fixed backdoored model.
    Params(ParamVector),
    /// Malicious clients train their local model on data relabelled with these
    /// pairs; that local model is the backdoor.
    LabelFlip(Vec<FlipPair>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackKind {
    Byzantine {
        mode: ByzantineMode,
        /// Standard deviation for [`ByzantineMode::Random`].
        random_sigma: f64,
    },
    LabelFlip {
        flip_pairs: Vec<FlipPair>,
    },
    ModelReplacement {
        /// Boost factor; `None` uses total round samples / attacker samples.
        scale_gamma: Option<f64>,
        backdoor: BackdoorSource,
    },
    Dlg(DlgConfig),
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Byzantine { .. } => "byzantine",
            AttackKind::LabelFlip { .. } => "label_flip",
            AttackKind::ModelReplacement { .. } => "model_replacement",
            AttackKind::Dlg(_) => "dlg",
        }
    }
}

/// Which clients the attacker controls (or, for reconstruction, targets).
#[derive(Debug, Clone, PartialEq)]
pub enum MaliciousSelection {
    /// `floor(ratio * n)` clients, at least one when `ratio > 0`, drawn once
    /// at run start or re-drawn every round.
    Ratio {
        ratio: f64,
        redraw_each_round: bool,
    },
    Clients(Vec<usize>),
}

impl Default for MaliciousSelection {
    fn default() -> Self {
        MaliciousSelection::Ratio {
            ratio: 0.1,
            redraw_each_round: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub malicious: MaliciousSelection,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            malicious: MaliciousSelection::default(),
        }
    }

    pub fn with_malicious(mut self, malicious: MaliciousSelection) -> Self {
        self.malicious = malicious;
        self
    }

    /// Checks parameter ranges against the federation shape.
    pub fn validate(&self, num_clients: usize, num_classes: usize) -> Result<()> {
        match &self.malicious {
            MaliciousSelection::Ratio { ratio, .. } if !(0.0..=1.0).contains(ratio) => {
                return Err(Error::Config(format!(
                    "malicious_ratio must be in [0, 1], got {ratio}"
                )));
            }
            MaliciousSelection::Clients(ids) => {
                if let Some(bad) = ids.iter().find(|&&id| id >= num_clients) {
                    return Err(Error::Config(format!(
                        "malicious client id {bad} outside [0, {num_clients})"
                    )));
                }
            }
            _ => {}
        }
        match &self.kind {
            AttackKind::Byzantine { random_sigma, .. } => {
                if !(random_sigma.is_finite() && *random_sigma >= 0.0) {
                    return Err(Error::Config(format!(
                        "random_sigma must be finite and non-negative, got {random_sigma}"
                    )));
                }
            }
            AttackKind::LabelFlip { flip_pairs } => validate_flip_pairs(flip_pairs, num_classes)?,
            AttackKind::ModelReplacement {
                scale_gamma,
                backdoor,
            } => {
                if let Some(g) = scale_gamma {
                    if !(g.is_finite() && *g > 0.0) {
                        return Err(Error::Config(format!(
                            "scale_gamma must be positive, got {g}"
                        )));
                    }
                }
                if let BackdoorSource::LabelFlip(pairs) = backdoor {
                    validate_flip_pairs(pairs, num_classes)?;
                }
            }
            AttackKind::Dlg(cfg) => cfg.validate()?,
        }
        Ok(())
    }
}

pub(crate) fn validate_flip_pairs(pairs: &[FlipPair], num_classes: usize) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.source >= num_classes || p.target >= num_classes {
            return Err(Error::Config(format!(
                "flip pair ({} -> {}) references a class outside [0, {num_classes})",
                p.source, p.target
            )));
        }
        if p.source == p.target {
            return Err(Error::Config(format!(
                "flip pair ({} -> {}) must change the label",
                p.source, p.target
            )));
        }
        if pairs[..i].iter().any(|q| q.source == p.source) {
            return Err(Error::Config(format!(
                "class {} appears twice as a flip source",
                p.source
            )));
        }
    }
    Ok(())
}

/// True iff an attacker is enabled and its kind poisons client datasets.
pub fn is_data_poisoning_attack(spec: Option<&AttackSpec>) -> bool {
    matches!(spec.map(|s| &s.kind), Some(AttackKind::LabelFlip { .. }))
}

/// True iff an attacker is enabled and its kind tampers with submitted models.
pub fn is_model_poisoning_attack(spec: Option<&AttackSpec>) -> bool {
    matches!(
        spec.map(|s| &s.kind),
        Some(AttackKind::Byzantine { .. } | AttackKind::ModelReplacement { .. })
    )
}

/// True iff an attacker is enabled and its kind reconstructs client data.
pub fn is_data_reconstruction_attack(spec: Option<&AttackSpec>) -> bool {
    matches!(spec.map(|s| &s.kind), Some(AttackKind::Dlg(_)))
}
