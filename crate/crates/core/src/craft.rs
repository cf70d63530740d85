//! Adversarial noise crafting against the surrogate extraction model.

use serde::{Deserialize, Serialize};

use crate::attack::AttackModel;
use crate::error::{CoreError, Result};
use crate::noise::{full_duty_level, NoiseSchedule, MAX_LEVEL, N_SETS};
use crate::par::par_map;

/// One ±1 entry per readout: −1 means "lower the readout here".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityNoise {
    pub signs: Vec<i8>,
    pub budget: u32,
}

/// Readout-lowering perturbation bounded by `[-eps, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityNoise {
    pub delta: Vec<f64>,
    pub eps: f64,
}

impl UtilityNoise {
    pub fn zeros(len: usize, eps: f64) -> Self {
        Self { delta: vec![0.0; len], eps }
    }

    pub fn check(&self) -> Result<()> {
        match self.delta.iter().position(|&d| !(d >= -self.eps - 1e-12 && d <= 0.0)) {
            Some(i) => Err(CoreError::OutOfBall(i)),
            None => Ok(()),
        }
    }
}

fn common_len(traces: &[Vec<f64>]) -> Result<usize> {
    let n = traces.first().map(Vec::len).ok_or_else(|| CoreError::InvalidParam("no traces".into()))?;
    if let Some(t) = traces.iter().find(|t| t.len() != n) {
        return Err(CoreError::LengthMismatch { op: "craft", left: n, right: t.len() });
    }
    Ok(n)
}

/// Sums the loss-ascending sign perturbation of every trace; zero sums go to +1.
pub fn fgsm_similarity(
    surrogate: &AttackModel,
    traces: &[Vec<f64>],
    label: &[usize],
    eps: f64,
    budget: u32,
) -> Result<SimilarityNoise> {
    if !surrogate.trained {
        return Err(CoreError::Untrained);
    }
    if !(1..=N_SETS).contains(&budget) {
        return Err(CoreError::InvalidParam(format!("budget {budget} outside [1, 32]")));
    }
    let n = common_len(traces)?;
    let grads = par_map(traces, |t| surrogate.input_gradient(t, label));
    let mut sum = vec![0.0; n];
    for g in grads {
        let (_, g) = g?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Diverged { epoch: 0, detail: "non-finite input gradient".into() });
        }
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += eps * sign(*v);
        }
    }
    let signs = sum.iter().map(|&s| if s >= 0.0 { 1 } else { -1 }).collect();
    Ok(SimilarityNoise { signs, budget })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// +1 → level 0; −1 → every budgeted set at full duty.
pub fn map_similarity(noise: &SimilarityNoise) -> Result<NoiseSchedule> {
    let on = full_duty_level(noise.budget)?;
    NoiseSchedule::new(noise.signs.iter().map(|&s| if s < 0 { on } else { 0 }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub eps: f64,
    /// Step size as a fraction of eps.
    pub alpha_fraction: f64,
    pub steps: usize,
    pub epochs: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { eps: 8.0, alpha_fraction: 0.25, steps: 10, epochs: 3 }
    }
}

/// Universal targeted PGD: one perturbation accumulated over the whole trace
/// set, projected onto `[-eps, 0]` after every trace. Each inner run keeps its
/// lowest-loss iterate, so the targeted loss of a trace never rises.
pub fn universal_pgd(surrogate: &AttackModel, traces: &[Vec<f64>], target: &[usize], cfg: &PgdConfig) -> Result<UtilityNoise> {
    if !surrogate.trained {
        return Err(CoreError::Untrained);
    }
    let n = common_len(traces)?;
    if cfg.eps < 0.0 || !cfg.eps.is_finite() {
        return Err(CoreError::InvalidParam(format!("eps {}", cfg.eps)));
    }
    let mut delta = vec![0.0; n];
    if cfg.eps == 0.0 {
        return Ok(UtilityNoise { delta, eps: 0.0 });
    }
    let alpha = cfg.alpha_fraction * cfg.eps;
    let project = |v: f64| v.clamp(-cfg.eps, 0.0);
    for _ in 0..cfg.epochs {
        for trace in traces {
            let mut cur = delta.clone();
            let apply = |d: &[f64]| trace.iter().zip(d).map(|(t, d)| t + d).collect::<Vec<f64>>();
            let mut best = (surrogate.loss(&apply(&cur), target)?, cur.clone());
            for _ in 0..cfg.steps {
                let (_, g) = surrogate.input_gradient(&apply(&cur), target)?;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Diverged { epoch: 0, detail: "non-finite input gradient".into() });
                }
                for (c, gv) in cur.iter_mut().zip(&g) {
                    *c = project(*c - alpha * sign(*gv));
                }
                let loss = surrogate.loss(&apply(&cur), target)?;
                if loss < best.0 {
                    best = (loss, cur.clone());
                }
            }
            delta = best.1;
        }
    }
    let noise = UtilityNoise { delta, eps: cfg.eps };
    noise.check()?;
    Ok(noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Linear,
    Nonlinear,
}

/// Maps `-delta/eps` onto intensity levels 0..=320, linearly or through x².
pub fn quantize(noise: &UtilityNoise, mode: QuantMode) -> Result<NoiseSchedule> {
    if noise.eps <= 0.0 {
        return Err(CoreError::InvalidParam("quantize needs eps > 0".into()));
    }
    noise.check()?;
    let top = f64::from(MAX_LEVEL);
    let levels = noise
        .delta
        .iter()
        .map(|&d| {
            let x = (-d / noise.eps).clamp(0.0, 1.0);
            let y = match mode {
                QuantMode::Linear => x,
                QuantMode::Nonlinear => x * x,
            };
            (y * top).round() as u16
        })
        .collect();
    NoiseSchedule::new(levels)
}

/// A schedule ready for calibration, tagged with how it was crafted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseArtifact {
    /// `fgsm` (physical levels) or `pgd` (quantized intensities).
    pub mode: String,
    pub eps: f64,
    pub budget: u32,
    pub surrogate_checksum: String,
    /// Label the noise was crafted against: the victim's own for FGSM, the
    /// NAS target for PGD.
    pub target: Vec<u8>,
    pub schedule: NoiseSchedule,
}
