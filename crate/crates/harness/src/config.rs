//! Run configuration, stored as TOML.
//!
//! Every section has defaults, so a file only needs the keys it changes.
//! [`RunConfig::resolved`] fills in environment-dependent values; the
//! resolved form is what gets copied into each artifact directory.

use std::path::Path;

use emi_core::agent::{PolicyConfig, PpoConfig};
use emi_core::emi::{EmiLossConfig, IntrinsicConfig, IntrinsicMode, RegularizeTarget};
use emi_core::envs::{EnvKind, ObservationKind};
use emi_core::model::{Activation, ModelConfig, NetShape};
use serde::{Deserialize, Serialize};

use crate::error::{field_err, io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    BoxImage,
    SparsePoint,
    FourRooms,
}

impl EnvName {
    pub fn kind(self) -> EnvKind {
        match self {
            Self::BoxImage => EnvKind::BoxImage,
            Self::SparsePoint => EnvKind::SparsePoint,
            Self::FourRooms => EnvKind::FourRooms,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Tanh,
    Relu,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Relu => Activation::Relu,
        }
    }
}

impl From<Activation> for ActivationName {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Tanh => Self::Tanh,
            Activation::Relu => Self::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularize {
    Action,
    State,
    None,
}

impl From<Regularize> for RegularizeTarget {
    fn from(r: Regularize) -> Self {
        match r {
            Regularize::Action => Self::Action,
            Regularize::State => Self::State,
            Regularize::None => Self::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicName {
    PredictionError,
    Diversity,
}

/// Hidden widths and activation of one network; unset fields fall back to
/// the defaults for the observation kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationName>,
}

impl NetSection {
    fn resolve(&self, default: &NetShape) -> NetSection {
        NetSection {
            hidden: Some(self.hidden.clone().unwrap_or_else(|| default.hidden.clone())),
            activation: Some(self.activation.unwrap_or(default.activation.into())),
        }
    }

    fn shape(&self, default: &NetShape) -> NetShape {
        NetShape {
            hidden: self.hidden.clone().unwrap_or_else(|| default.hidden.clone()),
            activation: self.activation.map(Into::into).unwrap_or(default.activation),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub d: usize,
    pub lambda_error: f64,
    pub lambda_info: f64,
    /// Defaults to 1 for image observations and 0 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_kl: Option<f64>,
    pub regularize: Regularize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub phi: NetSection,
    pub psi: NetSection,
    pub error: NetSection,
    pub statistics: NetSection,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            d: 2,
            lambda_error: 100.0,
            lambda_info: 0.01,
            lambda_kl: None,
            regularize: Regularize::Action,
            epochs: 3,
            minibatch: 512,
            lr: 1e-3,
            phi: NetSection::default(),
            psi: NetSection::default(),
            error: NetSection::default(),
            statistics: NetSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrinsicSection {
    pub mode: IntrinsicName,
    pub eta: f64,
    /// Kernel bandwidth of the diversity reward; unset uses the median
    /// pairwise embedding distance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_size: Option<usize>,
}

impl Default for IntrinsicSection {
    fn default() -> Self {
        Self {
            mode: IntrinsicName::PredictionError,
            eta: 0.001,
            sigma: None,
            reference_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: Vec<usize>,
    pub activation: ActivationName,
    pub baseline_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Floor on the Gaussian log-std; unset leaves it free.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_log_std: Option<f64>,
    pub output_init_scale: f64,
    pub discount: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub baseline_lr: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let o = PpoConfig::default();
        Self {
            hidden: p.net.hidden,
            activation: p.net.activation.into(),
            baseline_hidden: p.baseline.hidden,
            init_log_std: p.init_log_std,
            min_log_std: p.min_log_std,
            output_init_scale: p.output_init_scale,
            discount: o.discount,
            clip: o.clip,
            epochs: o.epochs,
            minibatch: o.minibatch,
            lr: o.lr,
            baseline_lr: o.baseline_lr,
            entropy_coef: o.entropy_coef,
            normalize_advantages: o.normalize_advantages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvName,
    pub seed: u64,
    pub max_iter: usize,
    pub steps_per_iter: usize,
    /// An iteration counts as a success when its mean environment return
    /// exceeds this value.
    pub success_return: f64,
    /// End the run after the first successful iteration.
    pub stop_on_success: bool,
    /// Record elapsed seconds in progress.csv; when false the column is 0 so
    /// that repeated runs produce identical files.
    pub wall_clock: bool,
    pub embedding: EmbeddingSection,
    pub intrinsic: IntrinsicSection,
    pub policy: PolicySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvName::SparsePoint,
            seed: 0,
            max_iter: 200,
            steps_per_iter: 2048,
            success_return: 0.0,
            stop_on_success: false,
            wall_clock: true,
            embedding: EmbeddingSection::default(),
            intrinsic: IntrinsicSection::default(),
            policy: PolicySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn observation(&self) -> ObservationKind {
        self.env.kind().build().spec().observation.clone()
    }

    /// Copy with every environment-dependent default made explicit.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let model = ModelConfig::new(
            self.observation(),
            self.env.kind().build().spec().action.clone(),
            self.embedding.d,
        );
        let image = matches!(self.observation(), ObservationKind::Image { .. });
        let e = &mut out.embedding;
        e.lambda_kl = Some(e.lambda_kl.unwrap_or(if image { 1.0 } else { 0.0 }));
        e.phi = e.phi.resolve(&model.phi);
        e.psi = e.psi.resolve(&model.psi);
        e.error = e.error.resolve(&model.error);
        e.statistics = e.statistics.resolve(&model.statistics);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(field_err(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let non_negative = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field_err(field, format!("must be a finite value >= 0, got {v}")))
            }
        };
        positive("max_iter", self.max_iter)?;
        positive("steps_per_iter", self.steps_per_iter)?;
        if !self.success_return.is_finite() {
            return Err(field_err("success_return", "must be finite"));
        }
        let e = &self.embedding;
        positive("embedding.d", e.d)?;
        positive("embedding.epochs", e.epochs)?;
        if e.minibatch < 2 {
            return Err(field_err("embedding.minibatch", "must be at least 2"));
        }
        if e.minibatch > self.steps_per_iter {
            return Err(field_err(
                "embedding.minibatch",
                format!("must not exceed steps_per_iter ({})", self.steps_per_iter),
            ));
        }
        non_negative("embedding.lambda_error", e.lambda_error)?;
        non_negative("embedding.lambda_info", e.lambda_info)?;
        if let Some(k) = e.lambda_kl {
            non_negative("embedding.lambda_kl", k)?;
        }
        non_negative("embedding.lr", e.lr)?;
        for (name, net) in [
            ("embedding.phi", &e.phi),
            ("embedding.psi", &e.psi),
            ("embedding.error", &e.error),
            ("embedding.statistics", &e.statistics),
        ] {
            if let Some(h) = &net.hidden {
                if h.is_empty() || h.contains(&0) {
                    return Err(field_err(&format!("{name}.hidden"), "needs at least one non-zero width"));
                }
            }
        }
        let i = &self.intrinsic;
        non_negative("intrinsic.eta", i.eta)?;
        if let Some(s) = i.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(field_err("intrinsic.sigma", "must be positive"));
            }
        }
        if i.reference_size == Some(0) {
            return Err(field_err("intrinsic.reference_size", "must be at least 1"));
        }
        let p = &self.policy;
        for (name, h) in [("policy.hidden", &p.hidden), ("policy.baseline_hidden", &p.baseline_hidden)] {
            if h.is_empty() || h.contains(&0) {
                return Err(field_err(name, "needs at least one non-zero width"));
            }
        }
        if !(0.0..=1.0).contains(&p.discount) {
            return Err(field_err("policy.discount", "must lie in [0, 1]"));
        }
        if !(p.clip > 0.0) {
            return Err(field_err("policy.clip", "must be positive"));
        }
        positive("policy.epochs", p.epochs)?;
        positive("policy.minibatch", p.minibatch)?;
        non_negative("policy.lr", p.lr)?;
        non_negative("policy.baseline_lr", p.baseline_lr)?;
        non_negative("policy.entropy_coef", p.entropy_coef)?;
        if !p.init_log_std.is_finite() {
            return Err(field_err("policy.init_log_std", "must be finite"));
        }
        if !p.output_init_scale.is_finite() {
            return Err(field_err("policy.output_init_scale", "must be finite"));
        }
        if let Some(m) = p.min_log_std {
            if !m.is_finite() || m > p.init_log_std {
                return Err(field_err("policy.min_log_std", "must be finite and at most init_log_std"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let spec = self.env.kind().build().spec().clone();
        let mut m = ModelConfig::new(spec.observation, spec.action, self.embedding.d);
        let e = &self.embedding;
        m.phi = e.phi.shape(&m.phi);
        m.psi = e.psi.shape(&m.psi);
        m.error = e.error.shape(&m.error);
        m.statistics = e.statistics.shape(&m.statistics);
        m
    }

    pub fn loss_config(&self) -> EmiLossConfig {
        let e = self.resolved().embedding;
        EmiLossConfig {
            lambda_error: e.lambda_error,
            lambda_info: e.lambda_info,
            lambda_kl: e.lambda_kl.unwrap_or(0.0),
            regularize: e.regularize.into(),
            epochs: e.epochs,
            minibatch: e.minibatch,
            lr: e.lr,
        }
    }

    pub fn intrinsic_config(&self) -> IntrinsicConfig {
        let i = &self.intrinsic;
        IntrinsicConfig {
            mode: match i.mode {
                IntrinsicName::PredictionError => IntrinsicMode::PredictionError,
                IntrinsicName::Diversity => IntrinsicMode::Diversity,
            },
            eta: i.eta,
            sigma: i.sigma,
            reference_size: i.reference_size,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            net: NetShape::new(&p.hidden, p.activation.into()),
            baseline: NetShape::new(&p.baseline_hidden, p.activation.into()),
            init_log_std: p.init_log_std,
            output_init_scale: p.output_init_scale,
            min_log_std: p.min_log_std,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        let p = &self.policy;
        PpoConfig {
            discount: p.discount,
            clip: p.clip,
            epochs: p.epochs,
            minibatch: p.minibatch,
            lr: p.lr,
            baseline_lr: p.baseline_lr,
            entropy_coef: p.entropy_coef,
            normalize_advantages: p.normalize_advantages,
        }
    }
}
