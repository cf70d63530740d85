//! A configured simulation lab: calibrated sensor, zoo splits, trained attack
//! models and the deployment paths every defense shares.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::attack::{ctc::min_frames, train, AttackModel, Sample, TrainHistory};
use crate::baselines::{random_schedule, run_active_fence, sinusoid_schedule, ActiveFence};
use crate::craft::{fgsm_similarity, map_similarity, quantize, universal_pgd, PgdConfig, SimilarityNoise, UtilityNoise};
use crate::error::{CoreError, Result};
use crate::leakage::{calibrate_tdc, synthesize_power, ModelArch, PowerSeries, TdcConfig};
use crate::nas::{check_feasible, nas_worst, AccuracyCache, ProxyTask, SearchSpace};
use crate::noise::{build_level_table, calibrate_with, LevelTable, NoiseBench, NoiseSchedule, TransientParams, MAX_LEVEL};
use crate::par::par_map;
use crate::rng::derive_seed;
use scaforge_grad::Checkpoint;

use super::config::{checksum_json, ExperimentConfig};
use super::zoo::Zoo;

/// Seed streams. Every random draw in an experiment is keyed by one of these
/// plus the identifiers of the cell it belongs to.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const VAL: u64 = 2;
    pub const CRAFT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const CALIBRATE: u64 = 5;
    pub const TABLE: u64 = 6;
    pub const RANDOM: u64 = 7;
    pub const SINUSOID: u64 = 8;
    pub const MODEL: u64 = 9;
    pub const NAS: u64 = 10;
    pub const VICTIMS: u64 = 11;
}

pub fn cell_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |s, &p| derive_seed(s, p))
}

/// Stable identifier of an architecture, independent of its split position.
pub fn arch_key(arch: &ModelArch) -> u64 {
    cell_seed(0xA5C4, &arch.symbols().iter().map(|&s| u64::from(s)).collect::<Vec<_>>())
}

pub fn eta_key(eta: f64) -> i64 {
    (eta * 1000.0).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Defense {
    None,
    Fgsm,
    Pgd,
    Random,
    Sinusoid,
    Fence,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Fgsm => "fgsm",
            Defense::Pgd => "pgd",
            Defense::Random => "random",
            Defense::Sinusoid => "sinusoid",
            Defense::Fence => "active_fence",
        }
    }
}

/// Noise a defense deploys against one victim, crafted ahead of the run.
#[derive(Debug, Clone, Default)]
pub struct Crafted {
    pub fgsm: Option<Arc<SimilarityNoise>>,
    pub pgd: Option<Arc<UtilityNoise>>,
    /// Mean clean readout of the victim, the active fence's setpoint.
    pub clean_mean: f64,
}

#[derive(Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub checksum: String,
    pub tdc: TdcConfig,
    pub zoo: Zoo,
    models: Mutex<BTreeMap<usize, Arc<AttackModel>>>,
    histories: Mutex<BTreeMap<usize, TrainHistory>>,
    tables: Mutex<BTreeMap<(u32, i64), Arc<LevelTable>>>,
    fgsm: Mutex<BTreeMap<u64, Arc<SimilarityNoise>>>,
    pgd: Mutex<BTreeMap<(u64, u64), Arc<UtilityNoise>>>,
    task: Mutex<Option<Arc<ProxyTask>>>,
    target: Mutex<Option<(ModelArch, f64)>>,
    victims: Mutex<Option<Vec<ModelArch>>>,
    pub accuracy: AccuracyCache,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let zoo = Zoo::build(&config.zoo, config.seed)?;
        let mut tdc = config.tdc.clone();
        if config.auto_tdc {
            let powers: Vec<f64> = zoo
                .train
                .iter()
                .map(|a| synthesize_power(a, &config.leakage, 0).map(|p| p.samples.iter().sum::<f64>() / p.len() as f64))
                .collect::<Result<_>>()?;
            let mean = powers.iter().sum::<f64>() / powers.len() as f64;
            let (c, f) = calibrate_tdc(&tdc, &PowerSeries::constant(mean, 1, config.leakage.dt));
            tdc.coarse_len = c;
            tdc.fine_len = f;
        }
        Ok(Self {
            checksum: config.checksum(),
            tdc,
            zoo,
            config,
            models: Mutex::default(),
            histories: Mutex::default(),
            tables: Mutex::default(),
            fgsm: Mutex::default(),
            pgd: Mutex::default(),
            task: Mutex::default(),
            target: Mutex::default(),
            victims: Mutex::default(),
            accuracy: AccuracyCache::default(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Digest of the leakage and sensor parameters, stamped on datasets.
    pub fn params_checksum(&self) -> String {
        checksum_json(&(&self.config.leakage, &self.tdc))
    }

    pub fn victim_power(&self, arch: &ModelArch, seed: u64) -> Result<PowerSeries> {
        synthesize_power(arch, &self.config.leakage, seed)
    }

    pub fn bench(&self, budget: u32, eta: f64, seed: u64) -> NoiseBench {
        let tp = TransientParams { eta, ..self.config.transient };
        let mut b = NoiseBench::new(self.tdc.clone(), tp, 0.0, seed).with_max_sets(budget);
        b.dt = self.config.leakage.dt;
        b
    }

    /// Sensor readouts of `victim` while the generator plays `levels`
    /// (physical levels, one per readout period); `None` leaves it idle.
    pub fn observe(&self, victim: &PowerSeries, levels: Option<&[u16]>, budget: u32, eta: f64, seed: u64) -> Result<Vec<u32>> {
        let periods = victim.len().div_ceil(self.tdc.samples_per_readout);
        let zeros;
        let levels = match levels {
            Some(l) => l,
            None => {
                zeros = vec![0; periods];
                &zeros
            }
        };
        self.bench(budget, eta, seed).play_over(victim, levels)
    }

    pub fn clean_trace(&self, arch: &ModelArch, seed: u64) -> Result<Vec<f64>> {
        let p = self.victim_power(arch, seed)?;
        Ok(self.observe(&p, None, 0, 1.0, seed)?.into_iter().map(f64::from).collect())
    }

    pub fn trace_len(&self, arch: &ModelArch) -> usize {
        let samples: usize = arch.layers().iter().map(|l| self.config.leakage.segment_duration(l)).sum();
        samples.div_ceil(self.tdc.samples_per_readout)
    }

    pub fn samples(&self, archs: &[ModelArch], stream: u64, per_arch: usize) -> Result<Vec<Sample>> {
        let jobs: Vec<(&ModelArch, usize)> = archs.iter().flat_map(|a| (0..per_arch).map(move |k| (a, k))).collect();
        par_map(&jobs, |(a, k)| {
            let readouts = self.clean_trace(a, cell_seed(self.seed(), &[stream, arch_key(a), *k as u64]))?;
            Ok(Sample { readouts, label: a.symbols().iter().map(|&s| usize::from(s)).collect() })
        })
        .into_iter()
        .collect()
    }

    fn model_checkpoint_path(&self, id: usize) -> Option<PathBuf> {
        self.config.attack.checkpoint_dir.as_ref().map(|d| d.join(format!("model{id}.json")))
    }

    /// Digest of everything that determines attack model `id`'s weights.
    pub fn model_checksum(&self, id: usize) -> String {
        let c = &self.config;
        checksum_json(&(c.seed, &c.zoo, &c.leakage, &self.tdc, &c.attack.models[id], &c.attack.train, id))
    }

    /// Attack model `id`, trained on the zoo's training split on first use
    /// (or loaded from a matching checkpoint).
    pub fn attacker(&self, id: usize) -> Result<Arc<AttackModel>> {
        let mut models = self.models.lock().expect("model lock");
        if let Some(m) = models.get(&id) {
            return Ok(Arc::clone(m));
        }
        let cfg = self.config.attack.models.get(id).ok_or_else(|| CoreError::Config(format!("attack model {id} is not configured")))?;
        let sum = self.model_checksum(id);
        let path = self.model_checkpoint_path(id);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let ck = Checkpoint::load(p)?;
            if ck.meta.get("lab_checksum") == Some(&sum) {
                let m = Arc::new(AttackModel::from_checkpoint(&ck)?);
                models.insert(id, Arc::clone(&m));
                return Ok(m);
            }
        }
        let data = self.samples(&self.zoo.train, stream::TRAIN, self.config.zoo.traces_per_arch)?;
        let val = self.samples(&self.zoo.val, stream::VAL, 1)?;
        let seed = cell_seed(self.seed(), &[stream::MODEL, id as u64]);
        let mut model = AttackModel::new(cfg.clone(), seed)?;
        let history = train(&mut model, &data, &val, &self.config.attack.train, seed)?;
        if let Some(p) = path {
            let mut ck = model.to_checkpoint();
            ck.meta.insert("lab_checksum".into(), sum);
            ck.save(&p)?;
        }
        self.histories.lock().expect("history lock").insert(id, history);
        let m = Arc::new(model);
        models.insert(id, Arc::clone(&m));
        Ok(m)
    }

    /// Training curve of a model trained in this session.
    pub fn history(&self, id: usize) -> Option<TrainHistory> {
        self.histories.lock().expect("history lock").get(&id).cloned()
    }

    pub fn surrogate(&self) -> Result<Arc<AttackModel>> {
        self.attacker(self.config.attack.surrogate)
    }

    /// Per-level readouts measured in situ at this budget and coupling.
    pub fn level_table(&self, budget: u32, eta: f64) -> Arc<LevelTable> {
        let key = (budget, eta_key(eta));
        let mut tables = self.tables.lock().expect("table lock");
        Arc::clone(tables.entry(key).or_insert_with(|| {
            let seed = cell_seed(self.seed(), &[stream::TABLE, u64::from(budget), eta_key(eta) as u64]);
            let all = NoiseSchedule { levels: (0..=MAX_LEVEL).collect() };
            Arc::new(build_level_table(&all, &mut self.bench(budget, eta, seed)))
        }))
    }

    /// Converts intensities (0..=320, proportional to the intended readout
    /// drop) into calibrated physical levels. Returns the levels and whether
    /// calibration converged.
    pub fn deploy_intensity(&self, intensities: &[u16], budget: u32, eta: f64, seed: u64) -> Result<(Vec<u16>, bool)> {
        if budget == 0 {
            return Ok((vec![0; intensities.len()], true));
        }
        let table = self.level_table(budget, eta);
        let fsd = table.full_scale_drop();
        let ranks: Vec<u16> = intensities
            .iter()
            .map(|&q| table.rank_for_drop(f64::from(q) / f64::from(MAX_LEVEL) * fsd))
            .collect();
        let ns = NoiseSchedule::new(ranks)?;
        let cal = &self.config.calibration;
        let mut bench = self.bench(budget, eta, cell_seed(seed, &[stream::CALIBRATE]));
        let c = calibrate_with(&ns, &mut bench, (*table).clone(), cal.threshold(ns.len()), cal.max_iters)?;
        Ok((c.schedule.levels, c.converged))
    }

    fn craft_traces(&self, arch: &ModelArch, n: usize) -> Result<Vec<Vec<f64>>> {
        (0..n).map(|k| self.clean_trace(arch, cell_seed(self.seed(), &[stream::CRAFT, arch_key(arch), k as u64]))).collect()
    }

    /// FGSM signs for `arch`, crafted on the surrogate from the defender's own
    /// clean traces.
    pub fn fgsm_noise(&self, arch: &ModelArch) -> Result<Arc<SimilarityNoise>> {
        let key = arch_key(arch);
        if let Some(n) = self.fgsm.lock().expect("fgsm lock").get(&key) {
            return Ok(Arc::clone(n));
        }
        let s = &self.config.similarity;
        let traces = self.craft_traces(arch, s.craft_traces)?;
        let label: Vec<usize> = arch.symbols().iter().map(|&x| usize::from(x)).collect();
        let noise = Arc::new(fgsm_similarity(&*self.surrogate()?, &traces, &label, s.eps, 1)?);
        self.fgsm.lock().expect("fgsm lock").insert(key, Arc::clone(&noise));
        Ok(noise)
    }

    /// Largest readout drop the generator achieves at this budget and
    /// coupling, which bounds the PGD ball.
    pub fn pgd_eps(&self, budget: u32, eta: f64) -> f64 {
        self.config.utility.pgd.eps.min(self.level_table(budget, eta).full_scale_drop())
    }

    /// Universal targeted perturbation steering `arch`'s traces to the NAS
    /// target.
    pub fn pgd_noise(&self, arch: &ModelArch, eps: f64) -> Result<Arc<UtilityNoise>> {
        let key = (arch_key(arch), eps.to_bits());
        if let Some(n) = self.pgd.lock().expect("pgd lock").get(&key) {
            return Ok(Arc::clone(n));
        }
        let u = &self.config.utility;
        let traces = self.craft_traces(arch, u.craft_traces)?;
        let (target, _) = self.nas_target()?;
        let target: Vec<usize> = target.symbols().iter().map(|&x| usize::from(x)).collect();
        let cfg = PgdConfig { eps, ..u.pgd.clone() };
        let noise = Arc::new(universal_pgd(&*self.surrogate()?, &traces, &target, &cfg)?);
        self.pgd.lock().expect("pgd lock").insert(key, Arc::clone(&noise));
        Ok(noise)
    }

    pub fn crafted(&self, arch: &ModelArch, defenses: &[Defense], budget: u32, eta: f64) -> Result<Crafted> {
        let mut c = Crafted::default();
        if defenses.contains(&Defense::Fgsm) && budget > 0 {
            c.fgsm = Some(self.fgsm_noise(arch)?);
        }
        if defenses.contains(&Defense::Pgd) && budget > 0 {
            let eps = self.pgd_eps(budget, eta);
            if eps > 0.0 {
                c.pgd = Some(self.pgd_noise(arch, eps)?);
            }
        }
        if defenses.contains(&Defense::Fence) {
            let t = self.craft_traces(arch, 1)?;
            c.clean_mean = t[0].iter().sum::<f64>() / t[0].len() as f64;
        }
        Ok(c)
    }

    /// Readouts of `victim` under `defense`. Returns the readouts and whether
    /// any calibration involved converged.
    pub fn defended(
        &self,
        defense: Defense,
        crafted: &Crafted,
        victim: &PowerSeries,
        budget: u32,
        eta: f64,
        seed: u64,
    ) -> Result<(Vec<u32>, bool)> {
        let len = victim.len().div_ceil(self.tdc.samples_per_readout);
        let b = &self.config.baselines;
        let physical = |levels: Vec<u16>| -> Result<(Vec<u32>, bool)> { Ok((self.observe(victim, Some(&levels), budget, eta, seed)?, true)) };
        let intensity = |q: Vec<u16>| -> Result<(Vec<u32>, bool)> {
            let (levels, ok) = self.deploy_intensity(&q, budget, eta, seed)?;
            Ok((self.observe(victim, Some(&levels), budget, eta, seed)?, ok))
        };
        if budget == 0 {
            return physical(vec![0; len]);
        }
        match defense {
            Defense::None => physical(vec![0; len]),
            Defense::Fgsm => {
                let signs = crafted.fgsm.as_ref().ok_or_else(|| CoreError::InvalidParam("fgsm noise not crafted".into()))?;
                let noise = SimilarityNoise { signs: signs.signs.clone(), budget };
                physical(map_similarity(&noise)?.levels)
            }
            Defense::Random => physical(random_schedule(len, MAX_LEVEL, cell_seed(seed, &[stream::RANDOM]))?.levels),
            Defense::Sinusoid => {
                let s = sinusoid_schedule(len, &b.sinusoid, &b.sinusoid_ranges, cell_seed(seed, &[stream::SINUSOID]))?;
                intensity(s.levels)
            }
            Defense::Pgd => match &crafted.pgd {
                Some(n) => intensity(quantize(n, self.config.utility.quant)?.levels),
                None => physical(vec![0; len]),
            },
            Defense::Fence => {
                let table = self.level_table(budget, eta);
                let fsd = table.full_scale_drop();
                let per_tap = if fsd > 0.0 { f64::from(MAX_LEVEL) / fsd } else { 0.0 };
                let mut fence = ActiveFence::new(b.fence_gain, crafted.clean_mean, per_tap);
                let mut bench = self.bench(budget, eta, seed);
                let (_, readouts) = run_active_fence(&mut bench, victim, &mut fence, Some(&table))?;
                Ok((readouts, true))
            }
        }
    }

    pub fn proxy_task(&self) -> Result<Arc<ProxyTask>> {
        let mut t = self.task.lock().expect("task lock");
        if let Some(task) = t.as_ref() {
            return Ok(Arc::clone(task));
        }
        let task = Arc::new(ProxyTask::generate(&self.config.nas.proxy, self.seed())?);
        *t = Some(Arc::clone(&task));
        Ok(task)
    }

    /// Proxy accuracy under the fixed protocol; `None` when the architecture
    /// does not build on 8×8 inputs.
    pub fn proxy_accuracy(&self, arch: &ModelArch) -> Result<Option<f64>> {
        let task = self.proxy_task()?;
        self.accuracy.get(arch, &task, &self.config.nas.proxy, self.seed())
    }

    /// The worst architecture found by the search (or the configured one) and
    /// its proxy accuracy.
    pub fn nas_target(&self) -> Result<(ModelArch, f64)> {
        let mut t = self.target.lock().expect("target lock");
        if let Some(x) = t.as_ref() {
            return Ok(x.clone());
        }
        let n = &self.config.nas;
        let found = match &n.target {
            Some(symbols) => {
                let a = ModelArch::from_symbols(symbols)?;
                check_feasible(&a)?;
                let acc = self.proxy_accuracy(&a)?.ok_or_else(|| CoreError::Infeasible(a.to_string()))?;
                (a, acc)
            }
            None => {
                let task = self.proxy_task()?;
                let seed = cell_seed(self.seed(), &[stream::NAS]);
                let r = nas_worst(&SearchSpace::full(), &task, &n.proxy, &n.controller, &self.accuracy, seed)?;
                // Accuracy under the lab's evaluation seed, so victim and
                // extracted accuracies are comparable.
                let acc = self.proxy_accuracy(&r.arch)?.ok_or_else(|| CoreError::Infeasible(r.arch.to_string()))?;
                (r.arch, acc)
            }
        };
        *t = Some(found.clone());
        Ok(found)
    }

    /// Utility-defense victims: proxy-feasible architectures outside the zoo
    /// splits whose traces give the surrogate enough frames for the target.
    pub fn victims(&self) -> Result<Vec<ModelArch>> {
        if let Some(v) = self.victims.lock().expect("victim lock").as_ref() {
            return Ok(v.clone());
        }
        let (target, _) = self.nas_target()?;
        let need = min_frames(&target.symbols().iter().map(|&s| usize::from(s)).collect::<Vec<_>>());
        let models = &self.config.attack.models;
        let min_acc = self.config.utility.victim_min_acc;
        let ok = |a: &ModelArch| -> Result<bool> {
            let len = self.trace_len(a);
            if !models.iter().all(|m| m.out_len(len) >= need && len >= m.min_len()) {
                return Ok(false);
            }
            Ok(self.proxy_accuracy(a)?.is_some_and(|acc| acc >= min_acc))
        };
        let v = self.zoo.draw_victims(self.config.zoo.n_victims, cell_seed(self.seed(), &[stream::VICTIMS]), ok)?;
        *self.victims.lock().expect("victim lock") = Some(v.clone());
        Ok(v)
    }
}
