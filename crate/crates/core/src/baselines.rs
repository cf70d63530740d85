//! Comparison defenses: uniform random noise, Gaussian-phase sinusoid and a
//! closed-loop active fence.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::leakage::PowerSeries;
use crate::noise::{LevelTable, NoiseBench, NoiseSchedule, MAX_LEVEL};
use crate::rng::seeded;

pub fn random_schedule(len: usize, max_level: u16, seed: u64) -> Result<NoiseSchedule> {
    if max_level > MAX_LEVEL {
        return Err(CoreError::Level(i64::from(max_level)));
    }
    let mut rng = seeded(seed, 0x5A4D);
    NoiseSchedule::new((0..len).map(|_| rng.random_range(0..=max_level)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidParams {
    pub offset: f64,
    pub amp: f64,
    /// Period in readout periods.
    pub freq: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Periods between parameter redraws; 0 keeps the parameters fixed.
    pub redraw_interval: usize,
}

impl Default for SinusoidParams {
    fn default() -> Self {
        Self { offset: 160.0, amp: 80.0, freq: 16.0, mu: 0.0, sigma: PI / 16.0, redraw_interval: 128 }
    }
}

impl SinusoidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.freq > 0.0) || self.sigma < 0.0 || self.amp < 0.0 {
            return Err(CoreError::InvalidParam(format!("sinusoid params {self:?}")));
        }
        Ok(())
    }
}

/// Inclusive ranges parameters are redrawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidRanges {
    pub offset: (f64, f64),
    pub amp: (f64, f64),
    pub freq: (f64, f64),
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for SinusoidRanges {
    fn default() -> Self {
        Self {
            offset: (0.0, 320.0),
            amp: (0.0, 160.0),
            freq: (4.0, 64.0),
            mu: (-PI / 4.0, PI / 4.0),
            sigma: (0.0, PI / 8.0),
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// `offset + amp·sin(2πT/freq + g_T)`, `g_T ~ N(mu, sigma)`, rounded and
/// clamped to the level range. Parameters are redrawn every
/// `redraw_interval` periods.
pub fn sinusoid_schedule(len: usize, params: &SinusoidParams, ranges: &SinusoidRanges, seed: u64) -> Result<NoiseSchedule> {
    params.validate()?;
    let mut rng = seeded(seed, 0x5105);
    let mut p = *params;
    let mut levels = Vec::with_capacity(len);
    for t in 0..len {
        if p.redraw_interval > 0 && t > 0 && t % p.redraw_interval == 0 {
            p = SinusoidParams {
                offset: draw(&mut rng, ranges.offset),
                amp: draw(&mut rng, ranges.amp),
                freq: draw(&mut rng, ranges.freq).max(f64::MIN_POSITIVE),
                mu: draw(&mut rng, ranges.mu),
                sigma: draw(&mut rng, ranges.sigma).max(0.0),
                redraw_interval: p.redraw_interval,
            };
        }
        let g = if p.sigma > 0.0 {
            Normal::new(p.mu, p.sigma).map_err(|e| CoreError::InvalidParam(e.to_string()))?.sample(&mut rng)
        } else {
            p.mu
        };
        let v = p.offset + p.amp * (2.0 * PI * t as f64 / p.freq + g).sin();
        levels.push(v.round().clamp(0.0, f64::from(MAX_LEVEL)) as u16);
    }
    NoiseSchedule::new(levels)
}

/// Positive-feedback controller: readouts above the setpoint raise the
/// generator intensity. `gain` is taps of extra drop commanded per tap of
/// error; `levels_per_tap` converts that to intensity levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveFence {
    pub gain: f64,
    pub setpoint: f64,
    pub levels_per_tap: f64,
    pub level: u16,
}

impl ActiveFence {
    pub fn new(gain: f64, setpoint: f64, levels_per_tap: f64) -> Self {
        Self { gain, setpoint, levels_per_tap, level: 0 }
    }

    /// Consumes one readout and returns the next intensity level.
    pub fn update(&mut self, readout: f64) -> u16 {
        let next = f64::from(self.level) + self.gain * self.levels_per_tap * (readout - self.setpoint);
        self.level = next.round().clamp(0.0, f64::from(MAX_LEVEL)) as u16;
        self.level
    }
}

/// Runs the fence in closed loop over a victim trace, one decision per
/// readout period. Intensities map to physical levels through `table` when
/// given. Returns the intensity schedule and the observed readouts.
pub fn run_active_fence(
    bench: &mut NoiseBench,
    victim: &PowerSeries,
    fence: &mut ActiveFence,
    table: Option<&LevelTable>,
) -> Result<(NoiseSchedule, Vec<u32>)> {
    let spr = bench.tdc.samples_per_readout;
    let mut levels = Vec::new();
    let mut readouts = Vec::new();
    for block in victim.samples.chunks(spr) {
        let intensity = fence.level;
        let physical = table.map_or(intensity, |t| t.table.m[usize::from(intensity)]);
        let r = bench.play_period(block, physical)?;
        levels.push(intensity);
        readouts.push(r);
        fence.update(f64::from(r));
    }
    Ok((NoiseSchedule::new(levels)?, readouts))
}
