//! Ring-oscillator noise generator: enable patterns, transient power model,
//! a bench simulator and the iterative software calibration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::leakage::{tdc_readout_with, PowerSeries, TdcConfig};
use crate::rng::derive_seed;

pub const N_SETS: u32 = 32;
pub const MAX_DUTY: u32 = 10;
pub const MAX_LEVEL: u16 = 320;
pub const N_LEVELS: usize = 321;
/// Readout periods a pattern is held for when it is measured.
pub const MEASURE_PERIODS: usize = 10;
/// Readout difference below which two patterns count as indistinguishable.
pub const RESOLUTION: f64 = 0.5;

/// One of the 321 (count, duty) configurations, count-major within a duty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnablePattern {
    level: u16,
}

impl EnablePattern {
    pub fn new(level: u16) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(CoreError::Level(i64::from(level)));
        }
        Ok(Self { level })
    }

    pub fn from_count_duty(count: u32, duty: u32) -> Result<Self> {
        match (count, duty) {
            (0, 0) => Ok(Self { level: 0 }),
            (1..=N_SETS, 1..=MAX_DUTY) => Ok(Self { level: ((duty - 1) * N_SETS + count) as u16 }),
            _ => Err(CoreError::InvalidParam(format!("no pattern with C={count}, T={duty}"))),
        }
    }

    pub fn level(&self) -> u16 {
        self.level
    }

    pub fn count(&self) -> u32 {
        if self.level == 0 {
            0
        } else {
            (u32::from(self.level) - 1) % N_SETS + 1
        }
    }

    pub fn duty(&self) -> u32 {
        if self.level == 0 {
            0
        } else {
            (u32::from(self.level) - 1) / N_SETS + 1
        }
    }
}

/// Level of the full-duty pattern with `count` sets enabled.
pub fn full_duty_level(count: u32) -> Result<u16> {
    if count == 0 {
        return Ok(0);
    }
    EnablePattern::from_count_duty(count, MAX_DUTY).map(|p| p.level())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub levels: Vec<u16>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<u16>) -> Result<Self> {
        if let Some(&bad) = levels.iter().find(|&&l| l > MAX_LEVEL) {
            return Err(CoreError::Level(i64::from(bad)));
        }
        Ok(Self { levels })
    }

    pub fn zeros(len: usize) -> Self {
        Self { levels: vec![0; len] }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransientParams {
    /// Power drawn by one fully enabled set.
    pub p_set: f64,
    /// Smoothing constant of the supply response, in (0, 1].
    pub lambda: f64,
    /// Derivative gain producing edge over/undershoot.
    pub gamma: f64,
    /// Coupling between the generator and the sensor; 1 is adjacent placement.
    pub eta: f64,
}

impl Default for TransientParams {
    fn default() -> Self {
        Self { p_set: 0.25, lambda: 0.8, gamma: 0.3, eta: 1.0 }
    }
}

impl TransientParams {
    pub fn memoryless(self) -> Self {
        Self { lambda: 1.0, gamma: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) || self.gamma < 0.0 || !(self.eta > 0.0 && self.eta <= 1.0) || self.p_set < 0.0 {
            return Err(CoreError::InvalidParam(format!("transient params out of range: {self:?}")));
        }
        Ok(())
    }

    /// Steady-state drive of a pattern with at most `max_sets` sets enabled.
    pub fn drive(&self, level: u16, max_sets: u32) -> f64 {
        let p = EnablePattern { level: level.min(MAX_LEVEL) };
        let c = p.count().min(max_sets);
        f64::from(c) * f64::from(p.duty()) / f64::from(MAX_DUTY) * self.p_set * self.eta
    }
}

/// First-order supply response with a derivative kick, one update per readout
/// period. The kick is not clamped, so a falling edge emits negative power.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Transient {
    s: f64,
}

impl Transient {
    pub fn step(&mut self, drive: f64, tp: &TransientParams) -> f64 {
        let prev = self.s;
        self.s = tp.lambda * drive + (1.0 - tp.lambda) * prev;
        self.s + tp.gamma * (self.s - prev)
    }
}

fn expand(per_period: &[f64], samples_per_readout: usize, dt: f64) -> PowerSeries {
    let samples = per_period
        .iter()
        .flat_map(|&p| std::iter::repeat(p).take(samples_per_readout))
        .collect();
    PowerSeries { samples, dt }
}

/// Generator power for a schedule, held for `samples_per_readout` samples per
/// level.
pub fn ro_power(schedule: &NoiseSchedule, tp: &TransientParams, samples_per_readout: usize, dt: f64) -> Result<PowerSeries> {
    if schedule.is_empty() {
        return Err(CoreError::InvalidParam("empty schedule".into()));
    }
    tp.validate()?;
    let mut tr = Transient::default();
    let per: Vec<f64> = schedule.levels.iter().map(|&l| tr.step(tp.drive(l, N_SETS), tp)).collect();
    Ok(expand(&per, samples_per_readout, dt))
}

/// A board session: the idle victim, the attacker's sensor and the defender's
/// generator sharing one supply, with persistent transient state.
#[derive(Debug, Clone)]
pub struct NoiseBench {
    pub tdc: TdcConfig,
    pub transient: TransientParams,
    pub idle_power: f64,
    pub max_sets: u32,
    pub dt: f64,
    drive_table: Option<Vec<f64>>,
    state: Transient,
    rng: ChaCha8Rng,
}

impl NoiseBench {
    pub fn new(tdc: TdcConfig, transient: TransientParams, idle_power: f64, seed: u64) -> Self {
        Self {
            tdc,
            transient,
            idle_power,
            max_sets: N_SETS,
            dt: 1e-6,
            drive_table: None,
            state: Transient::default(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBE7C)),
        }
    }

    /// Replaces the nominal level→drive map with an explicit 321-entry table.
    pub fn with_drive_table(mut self, table: Vec<f64>) -> Result<Self> {
        if table.len() != N_LEVELS {
            return Err(CoreError::LengthMismatch { op: "with_drive_table", left: N_LEVELS, right: table.len() });
        }
        self.drive_table = Some(table);
        Ok(self)
    }

    pub fn with_max_sets(mut self, max_sets: u32) -> Self {
        self.max_sets = max_sets.min(N_SETS);
        self
    }

    pub fn drive(&self, level: u16) -> f64 {
        match &self.drive_table {
            Some(t) => t[usize::from(level.min(MAX_LEVEL))],
            None => self.transient.drive(level, self.max_sets),
        }
    }

    pub fn reset(&mut self) {
        self.state = Transient::default();
    }

    /// Advances the generator through `levels` and returns its emitted power,
    /// one value per readout period.
    pub fn generator_power(&mut self, levels: &[u16]) -> Vec<f64> {
        let tp = self.transient;
        levels.iter().map(|&l| {
            let d = self.drive(l);
            self.state.step(d, &tp)
        }).collect()
    }

    /// Plays `levels` against the victim's `victim` power (one entry per sample)
    /// and returns the sensor readouts.
    pub fn play_over(&mut self, victim: &PowerSeries, levels: &[u16]) -> Result<Vec<u32>> {
        let spr = self.tdc.samples_per_readout;
        let periods = victim.len().div_ceil(spr);
        if levels.len() != periods {
            return Err(CoreError::LengthMismatch { op: "play_over", left: periods, right: levels.len() });
        }
        let per = self.generator_power(levels);
        let mut ro = expand(&per, spr, victim.dt);
        ro.samples.truncate(victim.len());
        Ok(tdc_readout_with(victim, Some(&ro), &self.tdc, &mut self.rng)?.readouts)
    }

    /// One readout period of `level` over the given victim samples.
    pub fn play_period(&mut self, victim: &[f64], level: u16) -> Result<u32> {
        let d = self.drive(level);
        let tp = self.transient;
        let p = self.state.step(d, &tp);
        let v = PowerSeries { samples: victim.to_vec(), dt: self.dt };
        let ro = PowerSeries { samples: vec![p; victim.len()], dt: self.dt };
        let cfg = TdcConfig { samples_per_readout: victim.len().max(1), ..self.tdc.clone() };
        let r = tdc_readout_with(&v, Some(&ro), &cfg, &mut self.rng)?;
        Ok(r.readouts.first().copied().unwrap_or(0))
    }

    /// Plays `levels` over the idle victim.
    pub fn play(&mut self, levels: &[u16]) -> Vec<u32> {
        let idle = PowerSeries::constant(self.idle_power, levels.len() * self.tdc.samples_per_readout, self.dt);
        self.play_over(&idle, levels).expect("idle series matches schedule length")
    }

    /// Plays the context, then holds `pattern` for ten readout periods and
    /// returns their mean.
    pub fn measure_pattern(&mut self, pattern: EnablePattern, context: &[u16]) -> f64 {
        if !context.is_empty() {
            self.play(context);
        }
        let r = self.play(&[pattern.level(); MEASURE_PERIODS]);
        r.iter().map(|&x| f64::from(x)).sum::<f64>() / MEASURE_PERIODS as f64
    }

    /// Noise-free steady-state readout of the idle board.
    pub fn baseline(&self) -> f64 {
        self.tdc.raw(self.idle_power).round().clamp(0.0, f64::from(self.tdc.n_taps))
    }
}

/// Rank → physical level permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub m: Vec<u16>,
}

impl MappingTable {
    pub fn identity() -> Self {
        Self { m: (0..=MAX_LEVEL).collect() }
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = [false; N_LEVELS];
        self.m.len() == N_LEVELS
            && self.m.iter().all(|&l| l <= MAX_LEVEL && !std::mem::replace(&mut seen[usize::from(l)], true))
    }

    pub fn apply(&self, ranks: &[u16]) -> Vec<u16> {
        ranks.iter().map(|&r| self.m[usize::from(r)]).collect()
    }
}

/// Per-level mean readouts sorted into the ordering used by the table.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTable {
    pub table: MappingTable,
    /// Mean readout of `table.m[rank]`, non-increasing in rank.
    pub readouts: Vec<f64>,
}

impl LevelTable {
    /// Ranks whose table readout lies within half a tap of `x` (the sensor
    /// cannot separate them), or the nearest rank if none does. Always an
    /// inclusive contiguous range since readouts are sorted.
    pub fn candidates(&self, x: f64) -> (u16, u16) {
        let within = |v: f64| (v - x).abs() <= RESOLUTION;
        if let Some(lo) = self.readouts.iter().position(|&v| within(v)) {
            let hi = self.readouts.iter().rposition(|&v| within(v)).unwrap_or(lo);
            return (lo as u16, hi as u16);
        }
        let mut best = 0;
        for (r, &v) in self.readouts.iter().enumerate() {
            if (v - x).abs() < (self.readouts[best] - x).abs() {
                best = r;
            }
        }
        (best as u16, best as u16)
    }

    /// Quantizes a measured readout to a rank, preferring `hint` when it is
    /// among the indistinguishable candidates.
    pub fn quantize(&self, x: f64, hint: u16) -> u16 {
        let (a, b) = self.candidates(x);
        hint.clamp(a, b)
    }

    /// Rank whose readout drop from rank 0 is closest to `drop`.
    pub fn rank_for_drop(&self, drop: f64) -> u16 {
        let top = self.readouts[0];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (r, &v) in self.readouts.iter().enumerate() {
            let d = (top - v - drop).abs();
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        best as u16
    }

    /// Largest drop reachable by any rank.
    pub fn full_scale_drop(&self) -> f64 {
        self.readouts[0] - self.readouts.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Measures every level (first in schedule order, then the absent ones) and
/// sorts them by increasing readout drop, ties kept in level order.
pub fn build_level_table(ns: &NoiseSchedule, bench: &mut NoiseBench) -> LevelTable {
    let mut sum = [0.0; N_LEVELS];
    let mut n = [0u32; N_LEVELS];
    for &l in &ns.levels {
        sum[usize::from(l)] += bench.measure_pattern(EnablePattern { level: l }, &[]);
        n[usize::from(l)] += 1;
    }
    for l in 0..N_LEVELS {
        if n[l] == 0 {
            sum[l] = bench.measure_pattern(EnablePattern { level: l as u16 }, &[]);
            n[l] = 1;
        }
    }
    let mean: Vec<f64> = (0..N_LEVELS).map(|l| sum[l] / f64::from(n[l])).collect();
    let mut order: Vec<u16> = (0..=MAX_LEVEL).collect();
    order.sort_by(|&a, &b| mean[usize::from(b)].total_cmp(&mean[usize::from(a)]));
    let readouts = order.iter().map(|&l| mean[usize::from(l)]).collect();
    LevelTable { table: MappingTable { m: order }, readouts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub levels: LevelTable,
    /// Physical levels to deploy.
    pub schedule: NoiseSchedule,
    pub error_sum: u64,
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<u64>,
}

impl Calibration {
    pub fn table(&self) -> &MappingTable {
        &self.levels.table
    }
}

pub const DEFAULT_THRESHOLD: u64 = 2;
pub const DEFAULT_MAX_ITERS: usize = 50;

/// Iterative software calibration. `ns` holds the intended intensity ranks; the
/// returned schedule holds the physical levels that reproduce them.
pub fn calibrate(ns: &NoiseSchedule, bench: &mut NoiseBench, threshold: u64, max_iters: usize) -> Result<Calibration> {
    if ns.is_empty() {
        return Err(CoreError::InvalidParam("empty noise set".into()));
    }
    let levels = build_level_table(ns, bench);
    calibrate_with(ns, bench, levels, threshold, max_iters)
}

/// Runs the adjustment loop against an already measured table.
pub fn calibrate_with(
    ns: &NoiseSchedule,
    bench: &mut NoiseBench,
    levels: LevelTable,
    threshold: u64,
    max_iters: usize,
) -> Result<Calibration> {
    if ns.is_empty() {
        return Err(CoreError::InvalidParam("empty noise set".into()));
    }
    let mut work = ns.levels.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut error_sum = u64::MAX;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let deployed = levels.table.apply(&work);
        let mut errors = 0u64;
        let mut next = work.clone();
        for (i, &lvl) in deployed.iter().enumerate() {
            let x = bench.measure_pattern(EnablePattern { level: lvl }, &[]);
            let target = ns.levels[i];
            let o = levels.quantize(x, target);
            errors += u64::from(target.abs_diff(o));
            next[i] = match o.cmp(&target) {
                std::cmp::Ordering::Less => (work[i] + 1).min(MAX_LEVEL),
                std::cmp::Ordering::Greater => work[i].saturating_sub(1),
                std::cmp::Ordering::Equal => work[i],
            };
        }
        history.push(errors);
        error_sum = errors;
        if errors <= threshold {
            break;
        }
        work = next;
    }
    let schedule = NoiseSchedule { levels: levels.table.apply(&work) };
    Ok(Calibration { levels, schedule, error_sum, converged: error_sum <= threshold, iterations, history })
}
