use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scaforge_grad::{bigru, Checkpoint, GruParams, GruVars, Tape, Tensor, Var};

use super::ctc::{ctc_loss, greedy_decode};
use crate::error::{CoreError, Result};
use crate::leakage::N_SYMBOLS;
use crate::rng::seeded;

pub const ALPHABET: usize = N_SYMBOLS + 1;
pub const BLANK: usize = N_SYMBOLS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub n_conv_layers: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    /// One stride per conv layer.
    pub strides: Vec<usize>,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub alphabet_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::preset(0).expect("preset 0 exists")
    }
}

impl AttackConfig {
    /// Model 0 is the defender's surrogate; 1–3 are the attacker variants.
    pub fn preset(id: usize) -> Result<Self> {
        let (n, kernel, strides) = match id {
            0 => (3, 5, vec![2, 2, 1]),
            1 => (1, 8, vec![4]),
            2 => (2, 5, vec![2, 2]),
            3 => (5, 5, vec![2, 2, 1, 1, 1]),
            _ => return Err(CoreError::InvalidParam(format!("no attack model preset {id}"))),
        };
        Ok(Self {
            n_conv_layers: n,
            conv_channels: 16,
            kernel,
            strides,
            rnn_hidden: 32,
            rnn_layers: 1,
            alphabet_size: ALPHABET,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 3, 5].contains(&self.n_conv_layers) {
            return Err(CoreError::InvalidParam(format!("n_conv_layers {} not in {{1,2,3,5}}", self.n_conv_layers)));
        }
        if self.strides.len() != self.n_conv_layers || self.strides.contains(&0) {
            return Err(CoreError::InvalidParam("one positive stride per conv layer required".into()));
        }
        if self.conv_channels == 0 || self.kernel == 0 || self.rnn_hidden == 0 || self.rnn_layers == 0 {
            return Err(CoreError::InvalidParam("attack model dimensions must be positive".into()));
        }
        if self.alphabet_size != ALPHABET {
            return Err(CoreError::InvalidParam(format!("alphabet_size must be {ALPHABET}")));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Frames produced for an input of `len` readouts.
    pub fn out_len(&self, len: usize) -> usize {
        let p = self.padding();
        self.strides.iter().fold(len, |l, &s| {
            if l + 2 * p < self.kernel {
                0
            } else {
                (l + 2 * p - self.kernel) / s + 1
            }
        })
    }

    pub fn min_len(&self) -> usize {
        (1..).find(|&l| self.out_len(l) >= 1).unwrap_or(1).max(self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackModel {
    pub config: AttackConfig,
    /// Readout normalization frozen at training time.
    pub norm_mean: f64,
    pub norm_std: f64,
    pub trained: bool,
    convs: Vec<(Tensor, Tensor)>,
    rnns: Vec<(GruParams, GruParams)>,
    head_w: Tensor,
    head_b: Tensor,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// Tape handles for every parameter, in [`AttackModel::params`] order.
pub struct ModelVars {
    convs: Vec<(Var, Var)>,
    rnns: Vec<(GruVars, GruVars)>,
    head: (Var, Var),
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in &self.convs {
            v.extend([w, b]);
        }
        for (f, b) in &self.rnns {
            v.extend(f.vars());
            v.extend(b.vars());
        }
        v.extend([self.head.0, self.head.1]);
        v
    }
}

impl AttackModel {
    pub fn new(config: AttackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, 0xA77);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for _ in 0..config.n_conv_layers {
            let fan_in = (config.kernel * c_in) as f64;
            let w = uniform(&[config.kernel, c_in, config.conv_channels], (6.0 / fan_in).sqrt(), &mut rng);
            convs.push((w, Tensor::zeros(&[config.conv_channels])));
            c_in = config.conv_channels;
        }
        let mut rnns = Vec::new();
        let mut input = c_in;
        for _ in 0..config.rnn_layers {
            let f = GruParams::init(input, config.rnn_hidden, &mut rng);
            let b = GruParams::init(input, config.rnn_hidden, &mut rng);
            rnns.push((f, b));
            input = 2 * config.rnn_hidden;
        }
        let head_w = uniform(&[input, config.alphabet_size], 1.0 / (input as f64).sqrt(), &mut rng);
        let head_b = Tensor::zeros(&[config.alphabet_size]);
        Ok(Self { config, norm_mean: 0.0, norm_std: 1.0, trained: false, convs, rnns, head_w, head_b })
    }

    pub fn set_normalization(&mut self, mean: f64, std: f64) -> Result<()> {
        if !mean.is_finite() || !(std.is_finite() && std > 0.0) {
            return Err(CoreError::InvalidParam(format!("normalization ({mean}, {std})")));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    /// Mean and standard deviation over every readout of `traces`.
    pub fn fit_normalization<'a>(&mut self, traces: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for t in traces {
            for &x in t {
                n += 1;
                s += x;
                s2 += x * x;
            }
        }
        if n == 0 {
            return Err(CoreError::InvalidParam("no readouts to normalize".into()));
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        self.set_normalization(mean, var.sqrt().max(1e-6))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (w, b) in &self.convs {
            v.extend([w, b]);
        }
        for (f, b) in &self.rnns {
            v.extend(f.tensors());
            v.extend(b.tensors());
        }
        v.extend([&self.head_w, &self.head_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for (w, b) in &mut self.convs {
            v.extend([w, b]);
        }
        for (f, b) in &mut self.rnns {
            v.extend(f.tensors_mut());
            v.extend(b.tensors_mut());
        }
        v.extend([&mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn record(&self, tape: &mut Tape) -> ModelVars {
        let convs = self.convs.iter().map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone()))).collect();
        let rnns = self.rnns.iter().map(|(f, b)| (f.record(tape), b.record(tape))).collect();
        let head = (tape.leaf(self.head_w.clone()), tape.leaf(self.head_b.clone()));
        ModelVars { convs, rnns, head }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let min = self.config.min_len();
        if len < min {
            return Err(CoreError::TraceTooShort { len, min });
        }
        Ok(())
    }

    /// Log-probabilities `[frames, alphabet]` for raw readouts `x: [len, 1]`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_len(tape.value(x).shape()[0])?;
        let mut h = tape.affine(x, 1.0 / self.norm_std, -self.norm_mean / self.norm_std)?;
        for (&(w, b), &s) in vars.convs.iter().zip(&self.config.strides) {
            let c = tape.conv1d(h, w, b, s, self.config.padding())?;
            h = tape.relu(c)?;
        }
        for (f, b) in &vars.rnns {
            h = bigru(tape, h, f, b)?;
        }
        let logits = tape.matmul(h, vars.head.0)?;
        let logits = tape.add_bias(logits, vars.head.1)?;
        Ok(tape.log_softmax(logits)?)
    }

    fn input(readouts: &[f64]) -> Tensor {
        Tensor::new(vec![readouts.len(), 1], readouts.to_vec()).expect("column")
    }

    pub fn forward(&self, readouts: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let x = tape.leaf(Self::input(readouts));
        let y = self.forward_tape(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn decode(&self, readouts: &[f64]) -> Result<Vec<usize>> {
        let lp = self.forward(readouts)?;
        Ok(greedy_decode(lp.data(), self.config.alphabet_size, BLANK))
    }

    /// CTC loss of `label` and its gradient with respect to the raw readouts.
    pub fn input_gradient(&self, readouts: &[f64], label: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let x = tape.leaf(Self::input(readouts));
        let y = self.forward_tape(&mut tape, &vars, x)?;
        let loss = ctc_loss(&mut tape, y, label, BLANK)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, g.wrt(x).into_data()))
    }

    pub fn loss(&self, readouts: &[f64], label: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let x = tape.leaf(Self::input(readouts));
        let y = self.forward_tape(&mut tape, &vars, x)?;
        let loss = ctc_loss(&mut tape, y, label, BLANK)?;
        Ok(tape.value(loss).item()?)
    }

    /// CTC loss and parameter gradients (in [`Self::params`] order).
    pub fn param_gradient(&self, readouts: &[f64], label: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let x = tape.leaf(Self::input(readouts));
        let y = self.forward_tape(&mut tape, &vars, x)?;
        let loss = ctc_loss(&mut tape, y, label, BLANK)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, vars.all().into_iter().map(|v| g.wrt(v)).collect()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "attack-model".into());
        ck.meta.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        ck.meta.insert("norm_mean".into(), format!("{:e}", self.norm_mean));
        ck.meta.insert("norm_std".into(), format!("{:e}", self.norm_std));
        ck.meta.insert("trained".into(), self.trained.to_string());
        for (i, t) in self.params().into_iter().enumerate() {
            ck.push(format!("p{i:03}"), t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta.get(k).ok_or_else(|| CoreError::InvalidParam(format!("checkpoint lacks {k}")))
        };
        let config: AttackConfig =
            serde_json::from_str(meta("config")?).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
        let parse = |k: &str| -> Result<f64> {
            meta(k)?.parse().map_err(|_| CoreError::InvalidParam(format!("bad {k}")))
        };
        let mut m = Self::new(config, 0)?;
        m.set_normalization(parse("norm_mean")?, parse("norm_std")?)?;
        m.trained = meta("trained")? == "true";
        for (i, p) in m.params_mut().into_iter().enumerate() {
            let t = ck.get(&format!("p{i:03}"))?;
            if t.shape() != p.shape() {
                return Err(CoreError::InvalidParam(format!("tensor p{i:03} has shape {:?}", t.shape())));
            }
            *p = t;
        }
        Ok(m)
    }
}
