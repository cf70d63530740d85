//! Worst-architecture search: a recurrent REINFORCE controller over the layer
//! vocabulary, scored by accuracy on a small synthetic image task.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use scaforge_grad::{gru_cell, Adam, AdamConfig, GruParams, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::leakage::{LayerKind, LayerSpec, ModelArch, N_SYMBOLS};
use crate::rng::seeded;

pub const SIDE: usize = 8;
pub const CLASSES: usize = 4;
pub const STOP: usize = N_SYMBOLS;
pub const N_TOKENS: usize = N_SYMBOLS + 1;

/// Class-balanced 8×8 single-channel images: noisy horizontal bars, vertical
/// bars, diagonals and squares at random positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTask {
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Vec<f64>,
    pub val_y: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub pixel_noise: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_val: 500, pixel_noise: 0.3, epochs: 15, batch: 512, lr: 0.02 }
    }
}

fn draw_image(class: usize, rng: &mut impl Rng, noise: &Normal<f64>, out: &mut Vec<f64>) {
    let mut img = [0.0; SIDE * SIDE];
    let mut set = |r: usize, c: usize| img[r * SIDE + c] = 1.0;
    match class {
        0 => {
            let (r, c) = (rng.random_range(0..SIDE), rng.random_range(0..=SIDE - 5));
            (0..5).for_each(|i| set(r, c + i));
        }
        1 => {
            let (r, c) = (rng.random_range(0..=SIDE - 5), rng.random_range(0..SIDE));
            (0..5).for_each(|i| set(r + i, c));
        }
        2 => {
            let (r, c) = (rng.random_range(0..=SIDE - 5), rng.random_range(0..=SIDE - 5));
            (0..5).for_each(|i| set(r + i, c + i));
        }
        _ => {
            let (r, c) = (rng.random_range(0..=SIDE - 2), rng.random_range(0..=SIDE - 2));
            for i in 0..2 {
                for j in 0..2 {
                    set(r + i, c + j);
                }
            }
        }
    }
    out.extend(img.iter().map(|v| v + noise.sample(rng)));
}

impl ProxyTask {
    pub fn generate(cfg: &ProxyConfig, seed: u64) -> Result<Self> {
        if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_train % CLASSES != 0 || cfg.n_val % CLASSES != 0 {
            return Err(CoreError::InvalidParam("proxy split sizes must be positive multiples of 4".into()));
        }
        let noise = Normal::new(0.0, cfg.pixel_noise).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
        let mut rng = seeded(seed, 0x7A5C);
        let mut split = |n: usize| {
            let mut y: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
            y.shuffle(&mut rng);
            let mut x = Vec::with_capacity(n * SIDE * SIDE);
            for &c in &y {
                draw_image(c, &mut rng, &noise, &mut x);
            }
            (x, y)
        };
        let (train_x, train_y) = split(cfg.n_train);
        let (val_x, val_y) = split(cfg.n_val);
        Ok(Self { train_x, train_y, val_x, val_y, seed })
    }

    /// Same images with labels shuffled independently of content.
    pub fn with_permuted_labels(&self, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xBAD);
        let mut t = self.clone();
        t.train_y.shuffle(&mut rng);
        t.val_y.shuffle(&mut rng);
        t
    }
}

/// Spatial or flat activation shape while building a proxy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial { side: usize, ch: usize },
    Flat(usize),
}

/// Shape-checks `arch` on 8×8 inputs; conv and pool need a spatial input at
/// least as large as their window.
pub fn check_feasible(arch: &ModelArch) -> Result<()> {
    let mut shape = Shape::Spatial { side: SIDE, ch: 1 };
    for l in arch.layers() {
        shape = next_shape(shape, l).ok_or_else(|| CoreError::Infeasible(format!("{l} after {shape:?} in {arch}")))?;
    }
    Ok(())
}

fn next_shape(shape: Shape, l: &LayerSpec) -> Option<Shape> {
    let k = l.kernel() as usize;
    match (l.kind(), shape) {
        (LayerKind::Conv, Shape::Spatial { side, .. }) if side >= k => {
            Some(Shape::Spatial { side: side - k + 1, ch: l.out_size() as usize })
        }
        (LayerKind::Pool, Shape::Spatial { side, ch }) if side >= k => Some(Shape::Spatial { side: side / k, ch }),
        (LayerKind::Fc, _) => Some(Shape::Flat(l.out_size() as usize)),
        (LayerKind::Relu | LayerKind::Softmax, s) => Some(s),
        _ => None,
    }
}

fn flat_len(s: Shape) -> usize {
    match s {
        Shape::Spatial { side, ch } => side * side * ch,
        Shape::Flat(n) => n,
    }
}

struct ProxyNet {
    layers: Vec<(LayerSpec, Option<(Tensor, Tensor)>)>,
    head: (Tensor, Tensor),
}

impl ProxyNet {
    fn build(arch: &ModelArch, rng: &mut impl Rng) -> Result<Self> {
        check_feasible(arch)?;
        let mut shape = Shape::Spatial { side: SIDE, ch: 1 };
        let mut layers = Vec::new();
        let mut he = |shape: &[usize], fan_in: usize| {
            let b = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("shape")
        };
        for l in arch.layers() {
            let params = match (l.kind(), shape) {
                (LayerKind::Conv, Shape::Spatial { ch, .. }) => {
                    let k = l.kernel() as usize;
                    let out = l.out_size() as usize;
                    Some((he(&[k, k, ch, out], k * k * ch), Tensor::zeros(&[out])))
                }
                (LayerKind::Fc, s) => {
                    let out = l.out_size() as usize;
                    Some((he(&[flat_len(s), out], flat_len(s)), Tensor::zeros(&[out])))
                }
                _ => None,
            };
            layers.push((*l, params));
            shape = next_shape(shape, l).expect("checked feasible");
        }
        let n = flat_len(shape);
        let head = (he(&[n, CLASSES], n), Tensor::zeros(&[CLASSES]));
        Ok(Self { layers, head })
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for (_, p) in &mut self.layers {
            if let Some((w, b)) = p {
                v.push(w);
                v.push(b);
            }
        }
        v.push(&mut self.head.0);
        v.push(&mut self.head.1);
        v
    }

    /// Returns log-probabilities `[batch, 4]` and the parameter vars.
    fn forward(&self, tape: &mut Tape, x: &[f64], batch: usize) -> Result<(Var, Vec<Var>)> {
        let mut h = tape.leaf(Tensor::new(vec![batch, SIDE, SIDE, 1], x.to_vec())?);
        let mut vars = Vec::new();
        for (l, p) in &self.layers {
            let rank = tape.value(h).shape().len();
            h = match l.kind() {
                LayerKind::Conv => {
                    let (w, b) = p.as_ref().expect("conv params");
                    let (w, b) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
                    vars.extend([w, b]);
                    tape.conv2d(h, w, b, 1, 0)?
                }
                LayerKind::Pool => tape.max_pool2d(h, l.kernel() as usize)?,
                LayerKind::Fc => {
                    let (w, b) = p.as_ref().expect("fc params");
                    let (w, b) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
                    vars.extend([w, b]);
                    let flat = if rank == 2 { h } else { tape.reshape(h, &[batch, tape.value(h).len() / batch])? };
                    let y = tape.matmul(flat, w)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Relu => tape.relu(h)?,
                LayerKind::Softmax => tape.softmax(h)?,
            };
        }
        let flat = tape.reshape(h, &[batch, tape.value(h).len() / batch])?;
        let (w, b) = (tape.leaf(self.head.0.clone()), tape.leaf(self.head.1.clone()));
        vars.extend([w, b]);
        let y = tape.matmul(flat, w)?;
        let y = tape.add_bias(y, b)?;
        Ok((tape.log_softmax(y)?, vars))
    }
}

fn batch_loss(net: &ProxyNet, x: &[f64], y: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (lp, vars) = net.forward(&mut tape, x, y.len())?;
    let picks: Vec<usize> = y.iter().enumerate().map(|(i, &c)| i * CLASSES + c).collect();
    let flat = tape.reshape(lp, &[y.len() * CLASSES])?;
    let g = tape.gather(flat, &picks)?;
    let m = tape.mean(g)?;
    let loss = tape.affine(m, -1.0, 0.0)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn accuracy(net: &ProxyNet, x: &[f64], y: &[usize]) -> Result<f64> {
    let px = SIDE * SIDE;
    let mut correct = 0;
    for (xs, ys) in x.chunks(512 * px).zip(y.chunks(512)) {
        let mut tape = Tape::new();
        let (lp, _) = net.forward(&mut tape, xs, ys.len())?;
        for (row, &c) in tape.value(lp).data().chunks(CLASSES).zip(ys) {
            let best = (0..CLASSES).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += usize::from(best == c);
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

/// Trains `arch` plus a linear 4-way head with Adam and returns validation
/// accuracy. Deterministic in `seed`.
pub fn proxy_accuracy(arch: &ModelArch, task: &ProxyTask, cfg: &ProxyConfig, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed, 0x9A0);
    let mut net = ProxyNet::build(arch, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let px = SIDE * SIDE;
    let n = task.train_y.len();
    let batch = cfg.batch.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut bx = Vec::with_capacity(batch * px);
    let mut by = Vec::with_capacity(batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&task.train_x[i * px..(i + 1) * px]);
                by.push(task.train_y[i]);
            }
            let (loss, grads) = batch_loss(&net, &bx, &by)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { epoch, detail: format!("proxy loss {loss} for {arch}") });
            }
            adam.step(&mut net.params_mut(), &grads)?;
        }
    }
    accuracy(&net, &task.val_x, &task.val_y)
}

/// Memoized proxy accuracy keyed by (symbols, seed); infeasible architectures
/// cache as `None`.
#[derive(Debug, Default)]
pub struct AccuracyCache {
    map: Mutex<HashMap<(Vec<u8>, u64), Option<f64>>>,
}

impl AccuracyCache {
    pub fn get(&self, arch: &ModelArch, task: &ProxyTask, cfg: &ProxyConfig, seed: u64) -> Result<Option<f64>> {
        let key = (arch.symbols(), seed);
        if let Some(v) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = match proxy_accuracy(arch, task, cfg, seed) {
            Ok(a) => Some(a),
            Err(CoreError::Infeasible(_)) => None,
            Err(e) => return Err(e),
        };
        self.map.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token sequences the controller may emit; `None` is the full space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchSpace {
    pub max_depth: usize,
    pub allowed: Option<Vec<Vec<u8>>>,
}

impl SearchSpace {
    pub fn full() -> Self {
        Self { max_depth: 6, allowed: None }
    }

    pub fn restricted(archs: &[ModelArch]) -> Self {
        let allowed: Vec<Vec<u8>> = archs.iter().map(ModelArch::symbols).collect();
        let max_depth = allowed.iter().map(Vec::len).max().unwrap_or(1);
        Self { max_depth, allowed: Some(allowed) }
    }

    /// Tokens allowed after `prefix`.
    pub fn mask(&self, prefix: &[u8]) -> [bool; N_TOKENS] {
        let mut m = [false; N_TOKENS];
        match &self.allowed {
            None => {
                if prefix.len() >= self.max_depth {
                    m[STOP] = true;
                } else {
                    m[..N_SYMBOLS].iter_mut().for_each(|x| *x = true);
                    m[STOP] = !prefix.is_empty();
                }
            }
            Some(list) => {
                for seq in list.iter().filter(|s| s.starts_with(prefix)) {
                    match seq.get(prefix.len()) {
                        Some(&t) => m[usize::from(t)] = true,
                        None => m[STOP] = true,
                    }
                }
            }
        }
        m
    }
}

/// Completes a sampled token sequence into a valid architecture: a Softmax
/// head is appended when missing or when the sequence is too short.
pub fn complete_arch(tokens: &[u8]) -> Result<ModelArch> {
    let mut t = tokens.to_vec();
    if t.last() != Some(&22) || t.len() < 2 {
        t.push(22);
    }
    ModelArch::from_symbols(&t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub baseline_decay: f64,
    pub episodes: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { hidden: 32, lr: 0.01, baseline_decay: 0.9, episodes: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Reward 1 − accuracy; returns the lowest-accuracy architecture.
    Worst,
    /// Reward accuracy; returns the highest-accuracy architecture.
    Best,
}

/// REINFORCE policy: GRU over the previous token's one-hot, linear to logits.
#[derive(Debug, Clone)]
pub struct Controller {
    pub gru: GruParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub baseline: Option<f64>,
}

const MASKED: f64 = -1e4;

impl Controller {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xC0);
        let gru = GruParams::init(N_TOKENS + 1, hidden, &mut rng);
        let b = 1.0 / (hidden as f64).sqrt();
        let out_w = Tensor::new(vec![hidden, N_TOKENS], (0..hidden * N_TOKENS).map(|_| rng.random_range(-b..b)).collect())
            .expect("shape");
        Self { gru, out_w, out_b: Tensor::zeros(&[N_TOKENS]), baseline: None }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.gru.tensors_mut().into_iter().collect();
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    /// Samples a token sequence. Returns the tokens (without STOP), the tape,
    /// the summed log-probability var, the parameter vars and every step's
    /// token distribution.
    fn sample(&self, space: &SearchSpace, rng: &mut impl Rng) -> Result<Sampled> {
        let mut tape = Tape::new();
        let g = self.gru.record(&mut tape);
        let w = tape.leaf(self.out_w.clone());
        let b = tape.leaf(self.out_b.clone());
        let mut h = tape.leaf(Tensor::zeros(&[1, self.gru.hidden()]));
        let mut prev = N_TOKENS; // start token
        let mut tokens = Vec::new();
        let mut picks = Vec::new();
        let mut dists = Vec::new();
        loop {
            let mut onehot = vec![0.0; N_TOKENS + 1];
            onehot[prev] = 1.0;
            let x = tape.leaf(Tensor::matrix(1, N_TOKENS + 1, onehot)?);
            h = gru_cell(&mut tape, x, h, &g)?;
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            let mask = space.mask(&tokens);
            let m = tape.leaf(Tensor::matrix(1, N_TOKENS, mask.iter().map(|&ok| if ok { 0.0 } else { MASKED }).collect())?);
            let z = tape.add(z, m)?;
            let lp = tape.log_softmax(z)?;
            let probs: Vec<f64> = tape.value(lp).data().iter().map(|v| v.exp()).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = (0..N_TOKENS).rev().find(|&k| mask[k]).unwrap_or(STOP);
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc && mask[k] {
                    tok = k;
                    break;
                }
            }
            let flat = tape.reshape(lp, &[N_TOKENS])?;
            picks.push(tape.gather(flat, &[tok])?);
            dists.push(probs);
            if tok == STOP {
                break;
            }
            tokens.push(tok as u8);
            prev = tok;
        }
        let mut logp = picks[0];
        for &p in &picks[1..] {
            logp = tape.add(logp, p)?;
        }
        let mut params: Vec<Var> = g.vars().to_vec();
        params.extend([w, b]);
        Ok(Sampled { tokens, tape, logp, params, dists })
    }
}

struct Sampled {
    tokens: Vec<u8>,
    tape: Tape,
    logp: Var,
    params: Vec<Var>,
    dists: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLogRow {
    pub episode: usize,
    pub tokens: Vec<u8>,
    pub arch: Option<String>,
    pub feasible: bool,
    pub accuracy: Option<f64>,
    pub reward: f64,
    pub baseline: f64,
    /// Smallest total probability mass over the step distributions.
    pub min_dist_sum: f64,
    pub max_dist_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub arch: ModelArch,
    pub accuracy: f64,
    pub log: Vec<SearchLogRow>,
}

/// Sampling continues past the episode budget, up to this multiple of it,
/// while no feasible architecture has been seen.
pub const EXTRA_EPISODE_FACTOR: usize = 20;

/// REINFORCE search. The returned architecture is the best one seen under
/// `objective`, not the final sample.
pub fn nas_search(
    space: &SearchSpace,
    task: &ProxyTask,
    proxy: &ProxyConfig,
    ctrl: &ControllerConfig,
    objective: Objective,
    cache: &AccuracyCache,
    seed: u64,
) -> Result<SearchResult> {
    if ctrl.episodes == 0 {
        return Err(CoreError::InvalidParam("episodes must be >= 1".into()));
    }
    let mut controller = Controller::new(ctrl.hidden, seed);
    let mut adam = Adam::new(AdamConfig { lr: ctrl.lr, ..AdamConfig::default() });
    let mut rng = seeded(seed, 0x5EA);
    let mut log = Vec::new();
    let mut best: Option<(ModelArch, f64)> = None;
    let mut episode = 0;
    while episode < ctrl.episodes || (best.is_none() && episode < ctrl.episodes * EXTRA_EPISODE_FACTOR) {
        let s = controller.sample(space, &mut rng)?;
        let arch = complete_arch(&s.tokens).ok();
        let acc = match &arch {
            Some(a) => cache.get(a, task, proxy, seed)?,
            None => None,
        };
        let reward = match (objective, acc) {
            (Objective::Worst, Some(a)) => 1.0 - a,
            (Objective::Best, Some(a)) => a,
            (_, None) => 0.0,
        };
        if let (Some(a), Some(acc)) = (&arch, acc) {
            let better = match (&best, objective) {
                (None, _) => true,
                (Some((_, b)), Objective::Worst) => acc < *b,
                (Some((_, b)), Objective::Best) => acc > *b,
            };
            if better {
                best = Some((a.clone(), acc));
            }
        }
        let baseline = controller.baseline.unwrap_or(reward);
        let advantage = reward - baseline;
        controller.baseline = Some(ctrl.baseline_decay * baseline + (1.0 - ctrl.baseline_decay) * reward);
        let sums: Vec<f64> = s.dists.iter().map(|d| d.iter().sum()).collect();
        log.push(SearchLogRow {
            episode,
            tokens: s.tokens.clone(),
            arch: arch.as_ref().map(ToString::to_string),
            feasible: acc.is_some(),
            accuracy: acc,
            reward,
            baseline,
            min_dist_sum: sums.iter().copied().fold(f64::INFINITY, f64::min),
            max_dist_sum: sums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        if advantage != 0.0 {
            let mut tape = s.tape;
            let loss = tape.affine(s.logp, -advantage, 0.0)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = s.params.iter().map(|&v| grads.wrt(v)).collect();
            adam.step(&mut controller.params_mut(), &g)?;
        }
        episode += 1;
    }
    let (arch, accuracy) = best.ok_or_else(|| CoreError::Infeasible("no feasible architecture sampled".into()))?;
    Ok(SearchResult { arch, accuracy, log })
}

pub fn nas_worst(
    space: &SearchSpace,
    task: &ProxyTask,
    proxy: &ProxyConfig,
    ctrl: &ControllerConfig,
    cache: &AccuracyCache,
    seed: u64,
) -> Result<SearchResult> {
    nas_search(space, task, proxy, ctrl, Objective::Worst, cache, seed)
}

/// Uniform random feasible architectures from the search space, by rejection.
pub fn sample_feasible(space: &SearchSpace, n: usize, seed: u64) -> Vec<ModelArch> {
    let mut rng = seeded(seed, 0x5A3);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut tokens = Vec::new();
        loop {
            let mask = space.mask(&tokens);
            let options: Vec<usize> = (0..N_TOKENS).filter(|&k| mask[k]).collect();
            let tok = options[rng.random_range(0..options.len())];
            if tok == STOP {
                break;
            }
            tokens.push(tok as u8);
        }
        if let Ok(a) = complete_arch(&tokens) {
            if check_feasible(&a).is_ok() {
                out.push(a);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasibility_tracks_shrinkage() {
        let ok = ModelArch::from_symbols(&[5, 12, 16, 22]).unwrap(); // Conv3x30, Pool2, FC100, Softmax
        assert!(check_feasible(&ok).is_ok());
        let too_small = ModelArch::from_symbols(&[15, 15]).unwrap(); // Pool5 twice on 8x8
        assert!(check_feasible(&too_small).is_err());
        let conv_after_fc = ModelArch::from_symbols(&[16, 0]).unwrap();
        assert!(check_feasible(&conv_after_fc).is_err());
    }

    #[test]
    fn completion_appends_softmax() {
        assert_eq!(complete_arch(&[16]).unwrap().symbols(), vec![16, 22]);
        assert_eq!(complete_arch(&[22]).unwrap().symbols(), vec![22, 22]);
        assert_eq!(complete_arch(&[16, 22]).unwrap().symbols(), vec![16, 22]);
    }

    #[test]
    fn full_space_mask() {
        let s = SearchSpace::full();
        assert!(!s.mask(&[])[STOP]);
        assert!(s.mask(&[3])[STOP]);
        let deep = s.mask(&[1; 6]);
        assert!(deep[STOP] && deep.iter().filter(|&&x| x).count() == 1);
    }

    #[test]
    fn restricted_mask_is_a_trie() {
        let a = ModelArch::from_symbols(&[16, 22]).unwrap();
        let b = ModelArch::from_symbols(&[0, 16, 22]).unwrap();
        let s = SearchSpace::restricted(&[a, b]);
        let root = s.mask(&[]);
        assert_eq!((0..N_TOKENS).filter(|&k| root[k]).collect::<Vec<_>>(), vec![0, 16]);
        assert!(s.mask(&[16, 22])[STOP]);
        assert_eq!(s.mask(&[16, 22]).iter().filter(|&&x| x).count(), 1);
    }

    #[test]
    fn task_is_balanced_and_seeded() {
        let cfg = ProxyConfig { n_train: 40, n_val: 20, ..ProxyConfig::default() };
        let t = ProxyTask::generate(&cfg, 4).unwrap();
        for c in 0..CLASSES {
            assert_eq!(t.train_y.iter().filter(|&&y| y == c).count(), 10);
        }
        assert_eq!(t, ProxyTask::generate(&cfg, 4).unwrap());
    }
}
