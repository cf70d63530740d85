//! Experiment configuration, loaded from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, TrainConfig};
use crate::baselines::{SinusoidParams, SinusoidRanges};
use crate::craft::{PgdConfig, QuantMode};
use crate::error::{CoreError, Result};
use crate::leakage::{LeakageParams, TdcConfig};
use crate::nas::{ControllerConfig, ProxyConfig};
use crate::noise::{TransientParams, N_SETS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_heldout: usize,
    pub traces_per_arch: usize,
    /// Held-out architectures that build on the proxy task, used as victims
    /// of the utility defense.
    pub n_victims: usize,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self { n_train: 400, n_val: 40, n_heldout: 40, traces_per_arch: 1, n_victims: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Architectures of attack models 0..n; model `surrogate` is the one the
    /// defender crafts against.
    pub models: Vec<AttackConfig>,
    pub surrogate: usize,
    pub attackers: Vec<usize>,
    pub train: TrainConfig,
    /// Trained models are read from / written to `model<id>.json` here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            models: (0..4).map(|i| AttackConfig::preset(i).expect("preset")).collect(),
            surrogate: 0,
            attackers: vec![1, 2, 3],
            train: TrainConfig::default(),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Allowed error_sum per 64 schedule entries.
    pub threshold_per_64: u64,
    pub max_iters: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { threshold_per_64: 2, max_iters: 50 }
    }
}

impl CalibrationSection {
    pub fn threshold(&self, len: usize) -> u64 {
        (self.threshold_per_64 * len as u64).div_ceil(64).max(self.threshold_per_64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilaritySection {
    pub budgets: Vec<u32>,
    pub trials: usize,
    pub craft_traces: usize,
    pub eps: f64,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        Self { budgets: vec![1, 4, 8, 16, 32], trials: 3, craft_traces: 16, eps: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilitySection {
    pub budget: u32,
    pub trials: usize,
    pub craft_traces: usize,
    pub pgd: PgdConfig,
    pub quant: QuantMode,
    /// Victims must reach at least this proxy accuracy.
    pub victim_min_acc: f64,
}

impl Default for UtilitySection {
    fn default() -> Self {
        Self { budget: 32, trials: 3, craft_traces: 16, pgd: PgdConfig::default(), quant: QuantMode::Linear, victim_min_acc: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub sinusoid: SinusoidParams,
    pub sinusoid_ranges: SinusoidRanges,
    pub fence_gain: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { sinusoid: SinusoidParams::default(), sinusoid_ranges: SinusoidRanges::default(), fence_gain: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasSection {
    pub proxy: ProxyConfig,
    pub controller: ControllerConfig,
    /// Fixed target symbols; skips the search when set.
    pub target: Option<Vec<u8>>,
}

impl Default for NasSection {
    fn default() -> Self {
        Self { proxy: ProxyConfig::default(), controller: ControllerConfig::default(), target: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub etas: Vec<f64>,
    pub budgets: Vec<u32>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self { etas: vec![1.0, 0.6], budgets: vec![4, 8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Budget of the similarity noise replayed against each attacker.
    pub budget: u32,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { budget: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub zoo: ZooConfig,
    pub leakage: LeakageParams,
    pub tdc: TdcConfig,
    /// Pick the TDC initial delay so the zoo's mean power sits mid-range.
    pub auto_tdc: bool,
    pub transient: TransientParams,
    pub attack: AttackSection,
    pub calibration: CalibrationSection,
    pub similarity: SimilaritySection,
    pub utility: UtilitySection,
    pub baselines: BaselineSection,
    pub nas: NasSection,
    pub transferability: TransferSection,
    pub robustness: RobustnessSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            zoo: ZooConfig::default(),
            leakage: LeakageParams::default(),
            tdc: TdcConfig::default(),
            auto_tdc: true,
            transient: TransientParams::default(),
            attack: AttackSection::default(),
            calibration: CalibrationSection::default(),
            similarity: SimilaritySection::default(),
            utility: UtilitySection::default(),
            baselines: BaselineSection::default(),
            nas: NasSection::default(),
            transferability: TransferSection::default(),
            robustness: RobustnessSection::default(),
        }
    }
}

fn budget_ok(b: u32) -> bool {
    b <= N_SETS
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        self.leakage.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        self.tdc.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        self.transient.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        let z = &self.zoo;
        if z.n_train == 0 || z.n_val == 0 || z.n_heldout == 0 || z.traces_per_arch == 0 {
            return bad("zoo splits and traces_per_arch must be positive".into());
        }
        let a = &self.attack;
        if a.models.is_empty() {
            return bad("attack.models is empty".into());
        }
        for m in &a.models {
            m.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        }
        if let Some(&i) = std::iter::once(&a.surrogate).chain(&a.attackers).find(|&&i| i >= a.models.len()) {
            return bad(format!("attack model {i} is not configured"));
        }
        if let Some(d) = &a.checkpoint_dir {
            if !d.is_dir() {
                return bad(format!("checkpoint_dir {} does not exist", d.display()));
            }
        }
        let budgets = self.similarity.budgets.iter().chain(&self.robustness.budgets);
        if let Some(b) = budgets.chain([&self.utility.budget, &self.transferability.budget]).find(|&&b| !budget_ok(b)) {
            return bad(format!("budget {b} outside [0, 32]"));
        }
        if self.similarity.craft_traces == 0 || self.utility.craft_traces == 0 {
            return bad("craft_traces must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.utility.victim_min_acc) {
            return bad(format!("victim_min_acc {} outside [0, 1]", self.utility.victim_min_acc));
        }
        if self.similarity.trials == 0 || self.utility.trials == 0 {
            return bad("trials must be positive".into());
        }
        if let Some(e) = self.robustness.etas.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return bad(format!("coupling {e} outside (0, 1]"));
        }
        self.baselines.sinusoid.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        Ok(())
    }

    /// Short hex digest of the canonical JSON form. Output and checkpoint
    /// locations do not change results and are left out.
    pub fn checksum(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.attack.checkpoint_dir = None;
        checksum_json(&c)
    }
}

pub fn checksum_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}
