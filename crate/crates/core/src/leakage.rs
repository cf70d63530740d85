//! Victim power synthesis and the attacker's TDC sensor.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::seeded;

pub const N_SYMBOLS: usize = 23;
pub const MIN_ARCH_LEN: usize = 2;
pub const MAX_ARCH_LEN: usize = 16;

const CONV_KERNELS: [u32; 4] = [2, 3, 4, 5];
const CONV_OUTS: [u32; 3] = [10, 20, 30];
const FC_UNITS: [u32; 5] = [100, 200, 300, 400, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Pool,
    Fc,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    kind: LayerKind,
    kernel: u32,
    out_size: u32,
}

impl LayerSpec {
    pub fn conv(kernel: u32, out_size: u32) -> Result<Self> {
        if !CONV_KERNELS.contains(&kernel) || !CONV_OUTS.contains(&out_size) {
            return Err(CoreError::InvalidLayer(format!("Conv(k={kernel}, out={out_size})")));
        }
        Ok(Self { kind: LayerKind::Conv, kernel, out_size })
    }

    pub fn pool(kernel: u32) -> Result<Self> {
        if !CONV_KERNELS.contains(&kernel) {
            return Err(CoreError::InvalidLayer(format!("Pool(k={kernel})")));
        }
        Ok(Self { kind: LayerKind::Pool, kernel, out_size: 0 })
    }

    pub fn fc(units: u32) -> Result<Self> {
        if !FC_UNITS.contains(&units) {
            return Err(CoreError::InvalidLayer(format!("FC({units})")));
        }
        Ok(Self { kind: LayerKind::Fc, kernel: 0, out_size: units })
    }

    pub const fn relu() -> Self {
        Self { kind: LayerKind::Relu, kernel: 0, out_size: 0 }
    }

    pub const fn softmax() -> Self {
        Self { kind: LayerKind::Softmax, kernel: 0, out_size: 0 }
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn kernel(&self) -> u32 {
        self.kernel
    }

    pub fn out_size(&self) -> u32 {
        self.out_size
    }

    /// Index into the 23-symbol vocabulary: 12 convs (kernel-major), 4 pools,
    /// 5 FCs, ReLU, Softmax.
    pub fn symbol(&self) -> u8 {
        match self.kind {
            LayerKind::Conv => {
                let o = CONV_OUTS.iter().position(|&x| x == self.out_size).unwrap_or(0);
                ((self.kernel - 2) * 3) as u8 + o as u8
            }
            LayerKind::Pool => 12 + (self.kernel - 2) as u8,
            LayerKind::Fc => 16 + (self.out_size / 100 - 1) as u8,
            LayerKind::Relu => 21,
            LayerKind::Softmax => 22,
        }
    }

    pub fn from_symbol(s: u8) -> Result<Self> {
        match s {
            0..=11 => Self::conv(2 + u32::from(s) / 3, CONV_OUTS[usize::from(s % 3)]),
            12..=15 => Self::pool(u32::from(s) - 10),
            16..=20 => Self::fc((u32::from(s) - 15) * 100),
            21 => Ok(Self::relu()),
            22 => Ok(Self::softmax()),
            _ => Err(CoreError::InvalidLayer(format!("symbol {s}"))),
        }
    }

    pub fn vocabulary() -> Vec<Self> {
        (0..N_SYMBOLS as u8).map(|s| Self::from_symbol(s).expect("symbol in range")).collect()
    }

    pub fn cost(&self) -> u32 {
        match self.kind {
            LayerKind::Conv => self.kernel * self.kernel * self.out_size,
            LayerKind::Pool => self.kernel * self.kernel,
            LayerKind::Fc => self.out_size,
            LayerKind::Relu | LayerKind::Softmax => 1,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv => write!(f, "Conv{}x{}", self.kernel, self.out_size),
            LayerKind::Pool => write!(f, "Pool{}", self.kernel),
            LayerKind::Fc => write!(f, "FC{}", self.out_size),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::Softmax => write!(f, "Softmax"),
        }
    }
}

/// An ordered layer sequence of length 2..=16.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelArch {
    layers: Vec<LayerSpec>,
}

impl ModelArch {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if !(MIN_ARCH_LEN..=MAX_ARCH_LEN).contains(&layers.len()) {
            return Err(CoreError::ArchLength(layers.len()));
        }
        Ok(Self { layers })
    }

    pub fn from_symbols(symbols: &[u8]) -> Result<Self> {
        Self::new(symbols.iter().map(|&s| LayerSpec::from_symbol(s)).collect::<Result<_>>()?)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn symbols(&self) -> Vec<u8> {
        self.layers.iter().map(LayerSpec::symbol).collect()
    }
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = CoreError;

    /// Parses the display form: `Conv3x10`, `Pool2`, `FC100`, `ReLU`, `Softmax`
    /// (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let num = |x: &str| x.parse::<u32>().map_err(|_| CoreError::InvalidLayer(s.to_string()));
        if let Some(rest) = t.strip_prefix("conv") {
            let (k, o) = rest.split_once('x').ok_or_else(|| CoreError::InvalidLayer(s.to_string()))?;
            Self::conv(num(k)?, num(o)?)
        } else if let Some(rest) = t.strip_prefix("pool") {
            Self::pool(num(rest)?)
        } else if let Some(rest) = t.strip_prefix("fc") {
            Self::fc(num(rest)?)
        } else if t == "relu" {
            Ok(Self::relu())
        } else if t == "softmax" {
            Ok(Self::softmax())
        } else {
            Err(CoreError::InvalidLayer(s.to_string()))
        }
    }
}

impl std::str::FromStr for ModelArch {
    type Err = CoreError;

    /// Layers separated by `-` or `,`.
    fn from_str(s: &str) -> Result<Self> {
        let layers = s.split(['-', ',']).filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<LayerSpec>>>()?;
        Self::new(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindParams {
    pub base_amp: f64,
    pub amp_coeff: f64,
    pub base_duration: usize,
    pub dur_coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageParams {
    pub conv: KindParams,
    pub pool: KindParams,
    pub fc: KindParams,
    pub relu: KindParams,
    pub softmax: KindParams,
    /// Fraction of each segment spent ramping up from zero.
    pub ramp_fraction: f64,
    pub process_sigma: f64,
    pub dt: f64,
}

impl Default for LeakageParams {
    fn default() -> Self {
        let k = |base_amp, amp_coeff, base_duration, dur_coeff| KindParams {
            base_amp,
            amp_coeff,
            base_duration,
            dur_coeff,
        };
        Self {
            conv: k(2.0, 0.05, 32, 0.25),
            pool: k(2.0, 0.25, 18, 0.6),
            fc: k(5.0, 0.02, 40, 0.35),
            relu: k(0.6, 0.0, 36, 0.0),
            softmax: k(2.6, 0.0, 56, 0.0),
            ramp_fraction: 0.1,
            process_sigma: 0.3,
            dt: 1e-6,
        }
    }
}

impl LeakageParams {
    pub fn kind(&self, kind: LayerKind) -> &KindParams {
        match kind {
            LayerKind::Conv => &self.conv,
            LayerKind::Pool => &self.pool,
            LayerKind::Fc => &self.fc,
            LayerKind::Relu => &self.relu,
            LayerKind::Softmax => &self.softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [LayerKind::Conv, LayerKind::Pool, LayerKind::Fc, LayerKind::Relu, LayerKind::Softmax] {
            let p = self.kind(kind);
            if p.base_amp < 0.0 || p.amp_coeff < 0.0 || p.dur_coeff < 0.0 {
                return Err(CoreError::InvalidParam(format!("{kind:?} leakage coefficients must be >= 0")));
            }
            if p.base_duration == 0 && p.dur_coeff == 0.0 {
                return Err(CoreError::InvalidParam(format!("{kind:?} segments would be empty")));
            }
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(CoreError::InvalidParam("ramp_fraction must lie in [0, 1]".into()));
        }
        if self.process_sigma < 0.0 || self.dt <= 0.0 {
            return Err(CoreError::InvalidParam("process_sigma >= 0 and dt > 0 required".into()));
        }
        Ok(())
    }

    pub fn segment_duration(&self, layer: &LayerSpec) -> usize {
        let p = self.kind(layer.kind());
        (p.base_duration + (p.dur_coeff * f64::from(layer.cost())).ceil() as usize).max(1)
    }

    pub fn segment_amplitude(&self, layer: &LayerSpec) -> f64 {
        let p = self.kind(layer.kind());
        p.base_amp + p.amp_coeff * f64::from(layer.cost())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    pub samples: Vec<f64>,
    pub dt: f64,
}

impl PowerSeries {
    pub fn constant(value: f64, len: usize, dt: f64) -> Self {
        Self { samples: vec![value; len], dt }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn synthesize_power(arch: &ModelArch, params: &LeakageParams, seed: u64) -> Result<PowerSeries> {
    synthesize_layers(arch.layers(), params, seed)
}

/// Same as [`synthesize_power`] on a raw layer slice.
pub fn synthesize_layers(layers: &[LayerSpec], params: &LeakageParams, seed: u64) -> Result<PowerSeries> {
    if layers.is_empty() {
        return Err(CoreError::EmptyArch);
    }
    params.validate()?;
    let mut rng = seeded(seed, 0x1EA4);
    let noise = Normal::new(0.0, params.process_sigma).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    let total: usize = layers.iter().map(|l| params.segment_duration(l)).sum();
    let mut samples = Vec::with_capacity(total);
    for layer in layers {
        let dur = params.segment_duration(layer);
        let amp = params.segment_amplitude(layer);
        let ramp = (params.ramp_fraction * dur as f64).floor() as usize;
        for i in 0..dur {
            let shape = if i < ramp { i as f64 / ramp as f64 } else { 1.0 };
            let eps = if params.process_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            samples.push((amp * shape + eps).max(0.0));
        }
    }
    Ok(PowerSeries { samples, dt: params.dt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdcConfig {
    pub n_taps: u32,
    /// Taps per volt.
    pub gain: f64,
    pub v_nominal: f64,
    /// Volts dropped per unit of power.
    pub r_pdn: f64,
    pub coarse_len: u32,
    pub fine_len: u32,
    pub coarse_step: f64,
    pub fine_step: f64,
    pub noise_sigma: f64,
    pub samples_per_readout: usize,
}

impl Default for TdcConfig {
    fn default() -> Self {
        Self {
            n_taps: 64,
            gain: 20.0,
            v_nominal: 1.2,
            r_pdn: 0.05,
            coarse_len: 0,
            fine_len: 0,
            coarse_step: 2.0,
            fine_step: 0.25,
            noise_sigma: 0.4,
            samples_per_readout: 4,
        }
    }
}

pub const MAX_DELAY_LEN: u32 = 31;

impl TdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_taps == 0 || self.gain <= 0.0 {
            return Err(CoreError::InvalidParam("n_taps > 0 and gain > 0 required".into()));
        }
        if self.coarse_len > MAX_DELAY_LEN || self.fine_len > MAX_DELAY_LEN {
            return Err(CoreError::InvalidParam("delay lengths must lie in [0, 31]".into()));
        }
        if self.samples_per_readout == 0 || self.noise_sigma < 0.0 || self.r_pdn < 0.0 {
            return Err(CoreError::InvalidParam("samples_per_readout > 0, noise_sigma >= 0, r_pdn >= 0".into()));
        }
        Ok(())
    }

    pub fn delay_offset(&self, coarse: u32, fine: u32) -> f64 {
        self.coarse_step * f64::from(coarse) + self.fine_step * f64::from(fine)
    }

    /// Noise-free, unclamped raw readout for a given instantaneous power.
    pub fn raw(&self, power: f64) -> f64 {
        self.gain * (self.v_nominal - self.r_pdn * power) + self.delay_offset(self.coarse_len, self.fine_len)
    }

    /// Taps lost per unit of power.
    pub fn taps_per_power(&self) -> f64 {
        self.gain * self.r_pdn
    }
}

/// Integer readouts in taps, optionally tagged with the generating label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorTrace {
    pub readouts: Vec<u32>,
    pub label: Option<Vec<u8>>,
}

impl SensorTrace {
    pub fn len(&self) -> usize {
        self.readouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readouts.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.readouts.iter().map(|&r| f64::from(r)).collect()
    }
}

pub fn tdc_readout(power: &PowerSeries, ro_power: Option<&PowerSeries>, cfg: &TdcConfig, seed: u64) -> Result<SensorTrace> {
    let mut rng = seeded(seed, 0x7DC);
    tdc_readout_with(power, ro_power, cfg, &mut rng)
}

/// [`tdc_readout`] drawing measurement noise from a caller-owned generator.
pub fn tdc_readout_with(
    power: &PowerSeries,
    ro_power: Option<&PowerSeries>,
    cfg: &TdcConfig,
    rng: &mut impl Rng,
) -> Result<SensorTrace> {
    cfg.validate()?;
    if let Some(ro) = ro_power {
        if ro.len() != power.len() {
            return Err(CoreError::LengthMismatch { op: "tdc_readout", left: power.len(), right: ro.len() });
        }
        if (ro.dt - power.dt).abs() > 1e-12 * power.dt.abs().max(1.0) {
            return Err(CoreError::InvalidParam(format!("dt mismatch: {} vs {}", power.dt, ro.dt)));
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    let top = f64::from(cfg.n_taps);
    let per_sample: Vec<f64> = power
        .samples
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let ro = ro_power.map_or(0.0, |r| r.samples[t]);
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (cfg.raw(p + ro) + eps).round().clamp(0.0, top)
        })
        .collect();
    let readouts = per_sample
        .chunks(cfg.samples_per_readout)
        .map(|block| (block.iter().sum::<f64>() / block.len() as f64).round() as u32)
        .collect();
    Ok(SensorTrace { readouts, label: None })
}

/// Exhaustive search over both delay lines for the setting that centers the
/// probe's mean raw readout in the delay line.
pub fn calibrate_tdc(cfg: &TdcConfig, probe: &PowerSeries) -> (u32, u32) {
    let mean_power = if probe.is_empty() {
        0.0
    } else {
        probe.samples.iter().sum::<f64>() / probe.len() as f64
    };
    let base = cfg.gain * (cfg.v_nominal - cfg.r_pdn * mean_power);
    let target = f64::from(cfg.n_taps) / 2.0;
    let mut best = (0, 0);
    let mut best_dist = f64::INFINITY;
    for c in 0..=MAX_DELAY_LEN {
        for f in 0..=MAX_DELAY_LEN {
            let d = (base + cfg.delay_offset(c, f) - target).abs();
            if d < best_dist {
                best_dist = d;
                best = (c, f);
            }
        }
    }
    best
}
