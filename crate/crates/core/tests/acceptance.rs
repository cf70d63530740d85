//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//!     cargo test --release -p scaforge-core --test acceptance
//!
//! Set `SCAFORGE_CHECKPOINT_DIR` to reuse trained attack models across runs.

mod common;
#[path = "../../grad/tests/common/mod.rs"]
mod grad_cases;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaforge_core::attack::ctc::ctc_nll;
use scaforge_core::attack::{evaluate_ler, ler, levenshtein};
use scaforge_core::harness::config::ExperimentConfig;
use scaforge_core::harness::experiments::{run_experiment, EXPERIMENTS};
use scaforge_core::harness::lab::{cell_seed, stream, Lab};
use scaforge_core::harness::report::{summarize, to_csv_string, Summary};
use scaforge_core::nas::{nas_search, sample_feasible, Objective, SearchSpace};
use scaforge_core::noise::{calibrate, MappingTable, NoiseBench, NoiseSchedule, TransientParams, MAX_LEVEL, N_LEVELS};
use scaforge_core::Result;

use common::{attack_model_gradcheck, dp_oracle, path_sums, random_logp, sort_oracle};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn gradients() -> Result<Verdict> {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for (name, case) in grad_cases::CASES {
        worst = worst.max(grad_cases::worst_over_seeds(case, 20));
        names.push(name);
    }
    let model = (0..20).map(attack_model_gradcheck).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && model < 1e-4 && secs < 60.0,
        format!("primitives ({}) worst {worst:.1e}, attack model worst {model:.1e}, 20 seeds each, {secs:.1}s", names.join(", ")),
    )
}

fn ctc_oracle() -> Result<Verdict> {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut n = 0;
    for a in 2..=4usize {
        for blank in [0, a - 1] {
            for frames in 1..=6 {
                for seed in 0..5 {
                    let logp = random_logp(frames, a, (a * 1000 + frames * 10 + blank) as u64 + seed);
                    for (label, p) in path_sums(&logp, frames, a, blank) {
                        if label.is_empty() || label.len() > 3 {
                            continue;
                        }
                        let (loss, _) = ctc_nll(&logp, a, &label, blank)?;
                        worst = worst.max((loss + p.ln()).abs());
                        n += 1;
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst < 1e-6 && secs < 60.0, format!("{n} instances, worst |Δ| {worst:.1e}, {secs:.1}s"))
}

fn ler_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let a: Vec<u8> = (0..rng.random_range(0..=16)).map(|_| rng.random_range(0..23)).collect();
        let b: Vec<u8> = (0..rng.random_range(1..=16)).map(|_| rng.random_range(0..23)).collect();
        let d = dp_oracle(&a, &b);
        if levenshtein(&a, &b) != d || ler(&a, &b)? != d as f64 / b.len() as f64 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("1000 pairs, {mismatches} mismatches"))
}

fn attack_viability(lab: &Lab) -> Result<Verdict> {
    let t = Instant::now();
    let model = lab.surrogate()?;
    let secs = t.elapsed().as_secs_f64();
    let heldout = lab.samples(&lab.zoo.heldout, stream::EVAL, 3)?;
    let l = evaluate_ler(&model, &heldout)?;
    verdict(l <= 0.10 && secs <= 600.0, format!("held-out clean LER {l:.3} over {} traces, trained in {secs:.0}s", heldout.len()))
}

fn calibration() -> Result<Verdict> {
    let random_ns = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseSchedule::new((0..64).map(|_| rng.random_range(0..=MAX_LEVEL)).collect())
    };
    let lab = Lab::new(ExperimentConfig::default())?;
    let cal = &lab.config.calibration;
    let mut converged = 0;
    for seed in 0..20 {
        let mut bench = lab.bench(32, 1.0, seed);
        let c = calibrate(&random_ns(seed)?, &mut bench, cal.threshold(64), 50)?;
        converged += usize::from(c.converged && c.error_sum <= cal.threshold(64) && c.iterations <= 50);
    }

    let tdc = scaforge_core::leakage::TdcConfig { noise_sigma: 0.0, ..lab.tdc.clone() };
    let drive: Vec<f64> = (0..N_LEVELS).map(|l| l as f64 * 8.0 / 320.0).collect();
    let board = || NoiseBench::new(tdc.clone(), TransientParams::default().memoryless(), 0.0, 3).with_drive_table(drive.clone());
    let c = calibrate(&random_ns(99)?, &mut board()?, cal.threshold(64), 50)?;
    let oracle = sort_oracle(&mut board()?);
    let memoryless_ok = c.iterations == 1 && c.error_sum == 0 && c.table() == &MappingTable::identity() && c.table().m == oracle;
    verdict(
        converged >= 18 && memoryless_ok,
        format!(
            "default transients: {converged}/20 converged; memoryless: {} iteration(s), error_sum {}, identity {}",
            c.iterations,
            c.error_sum,
            c.table() == &MappingTable::identity()
        ),
    )
}

fn find<'a>(s: &'a [Summary], defense: &str, budget: u32, attacker: usize, eta: f64) -> Option<&'a Summary> {
    s.iter().find(|x| x.defense == defense && x.budget == budget && x.attacker == attacker && (x.eta - eta).abs() < 1e-9)
}

fn ler_of(s: &[Summary], defense: &str, budget: u32, attacker: usize, eta: f64) -> f64 {
    find(s, defense, budget, attacker, eta).and_then(|x| x.mean_ler_to_label).unwrap_or(f64::NAN)
}

/// FGSM ≥ 1.5 × random at every budget. Returns (pass, detail).
fn similarity_check(s: &[Summary], budgets: &[u32], attacker: usize, eta: f64, min_rows: usize) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for &b in budgets {
        let f = ler_of(s, "fgsm", b, attacker, eta);
        let r = ler_of(s, "random", b, attacker, eta);
        let n = find(s, "fgsm", b, attacker, eta).map_or(0, |x| x.rows);
        let ok = f >= 1.5 * r && n >= min_rows;
        pass &= ok;
        parts.push(format!("b{b} fgsm {f:.3} / random {r:.3} = {:.2}{}", f / r, if ok { "" } else { " ✗" }));
    }
    (pass, parts.join("; "))
}

fn similarity(lab: &Lab) -> Result<Verdict> {
    let t = Instant::now();
    let rows = run_experiment(lab, "similarity")?;
    let s = summarize(&rows);
    let (pass, detail) = similarity_check(&s, &[4, 8, 16, 32], lab.config.attack.surrogate, 1.0, 60);
    let archs = lab.zoo.heldout.len();
    verdict(pass && archs >= 20, format!("{archs} archs × {} seeds: {detail}; {:.0}s", lab.config.similarity.trials, t.elapsed().as_secs_f64()))
}

/// PGD targeting and the proxy-accuracy gap at one coupling.
fn utility_check(s: &[Summary], budget: u32, attacker: usize, eta: f64) -> (bool, String) {
    let tgt = |d: &str| find(s, d, budget, attacker, eta).and_then(|x| x.mean_ler_to_target).unwrap_or(f64::NAN);
    let pgd = tgt("pgd");
    let floor = ["random", "sinusoid", "active_fence"].map(tgt).into_iter().fold(f64::INFINITY, f64::min);
    let p = find(s, "pgd", budget, attacker, eta);
    let extracted = p.and_then(|x| x.mean_proxy_acc_extracted).unwrap_or(f64::NAN);
    let victim = p.and_then(|x| x.mean_proxy_acc_victim).unwrap_or(f64::NAN);
    let pass = pgd < 0.6 * floor && extracted <= victim - 0.05;
    (pass, format!("LER-to-target pgd {pgd:.3} vs 0.6 × best baseline {floor:.3}; proxy acc extracted {extracted:.3} vs victim {victim:.3}"))
}

fn utility(lab: &Lab) -> Result<Verdict> {
    let t = Instant::now();
    let rows = run_experiment(lab, "utility")?;
    let (target, acc) = lab.nas_target()?;
    let (pass, detail) = utility_check(&summarize(&rows), lab.config.utility.budget, lab.config.attack.surrogate, 1.0);
    verdict(pass, format!("target {target} (acc {acc:.3}): {detail}; {:.0}s", t.elapsed().as_secs_f64()))
}

fn nas(lab: &Lab) -> Result<Verdict> {
    let (worst, worst_acc) = lab.nas_target()?;
    let mut accs: Vec<f64> = Vec::new();
    for a in sample_feasible(&SearchSpace::full(), 100, cell_seed(lab.seed(), &[0xACCE])) {
        accs.push(lab.proxy_accuracy(&a)?.unwrap_or(f64::NAN));
    }
    accs.sort_by(f64::total_cmp);
    let p5 = accs[4];
    let n = &lab.config.nas;
    let task = lab.proxy_task()?;
    let seed = cell_seed(lab.seed(), &[stream::NAS]);
    let w = nas_search(&SearchSpace::full(), &task, &n.proxy, &n.controller, Objective::Worst, &lab.accuracy, seed)?;
    let b = nas_search(&SearchSpace::full(), &task, &n.proxy, &n.controller, Objective::Best, &lab.accuracy, seed)?;
    verdict(
        worst_acc <= p5 && b.accuracy >= w.accuracy,
        format!("worst {worst} acc {worst_acc:.3} vs random p5 {p5:.3}; uninverted {:.3} ≥ inverted {:.3}", b.accuracy, w.accuracy),
    )
}

fn transferability(lab: &Lab) -> Result<Verdict> {
    let rows = run_experiment(lab, "transferability")?;
    let sim = summarize(&rows.iter().filter(|r| r.experiment.ends_with("similarity")).cloned().collect::<Vec<_>>());
    let util = summarize(&rows.iter().filter(|r| r.experiment.ends_with("utility")).cloned().collect::<Vec<_>>());
    let b = lab.config.transferability.budget;
    let ub = lab.config.utility.budget;
    let mut pass = true;
    let mut parts = Vec::new();
    for &a in &lab.config.attack.attackers {
        let (noisy, clean) = (ler_of(&sim, "fgsm", b, a, 1.0), ler_of(&sim, "none", b, a, 1.0));
        let p = find(&util, "pgd", ub, a, 1.0);
        let extracted = p.and_then(|x| x.mean_proxy_acc_extracted).unwrap_or(f64::NAN);
        let victim = p.and_then(|x| x.mean_proxy_acc_victim).unwrap_or(f64::NAN);
        let ok = noisy > clean && extracted < victim;
        pass &= ok;
        parts.push(format!("a{a}: LER {noisy:.3} > clean {clean:.3}, acc {extracted:.3} < {victim:.3}{}", if ok { "" } else { " ✗" }));
    }
    verdict(pass, parts.join("; "))
}

fn robustness(lab: &Lab) -> Result<Verdict> {
    let rows = run_experiment(lab, "robustness")?;
    let pick = |suffix: &str| summarize(&rows.iter().filter(|r| r.experiment.ends_with(suffix)).cloned().collect::<Vec<_>>());
    let (sim_ok, sim) = similarity_check(&pick("similarity"), &lab.config.robustness.budgets, lab.config.attack.surrogate, 0.6, 60);
    let (util_ok, util) = utility_check(&pick("utility"), lab.config.utility.budget, lab.config.attack.surrogate, 0.6);
    verdict(sim_ok && util_ok, format!("η 0.6 similarity: {sim}; utility: {util}"))
}

const SMALL: &str = r#"
seed = 5
[zoo]
n_train = 12
n_val = 2
n_heldout = 2
n_victims = 1
[attack.train]
epochs = 2
[similarity]
budgets = [4, 32]
trials = 1
craft_traces = 2
[utility]
trials = 1
craft_traces = 2
victim_min_acc = 0.0
[utility.pgd]
steps = 2
epochs = 1
[nas.proxy]
n_train = 200
n_val = 100
epochs = 2
[nas.controller]
episodes = 3
[robustness]
etas = [1.0, 0.6]
budgets = [8]
"#;

fn determinism() -> Result<Verdict> {
    let run = || -> Result<Vec<String>> {
        let lab = Lab::new(ExperimentConfig::from_toml(SMALL)?)?;
        EXPERIMENTS.iter().map(|e| to_csv_string(&run_experiment(&lab, e)?)).collect()
    };
    let (a, b) = (run()?, run()?);
    let rows: usize = a.iter().map(|c| c.lines().count().saturating_sub(1)).sum();
    verdict(a == b && rows > 0, format!("{} experiments, {rows} rows, byte-identical: {}", EXPERIMENTS.len(), a == b))
}

fn main() {
    let mut cfg = ExperimentConfig::default();
    if let Some(dir) = std::env::var_os("SCAFORGE_CHECKPOINT_DIR") {
        std::fs::create_dir_all(&dir).expect("checkpoint dir");
        cfg.attack.checkpoint_dir = Some(dir.into());
    }
    let lab = Lab::new(cfg).expect("default config builds a lab");
    let criteria: [(&str, &dyn Fn() -> Result<Verdict>); 11] = [
        ("gradient correctness", &gradients),
        ("CTC oracle equivalence", &ctc_oracle),
        ("Levenshtein/LER oracle", &ler_oracle),
        ("attack viability", &|| attack_viability(&lab)),
        ("calibration", &calibration),
        ("similarity defense dominance", &|| similarity(&lab)),
        ("utility defense targeting", &|| utility(&lab)),
        ("NAS inversion", &|| nas(&lab)),
        ("transferability", &|| transferability(&lab)),
        ("robustness", &|| robustness(&lab)),
        ("determinism", &determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        failed += usize::from(!v.pass);
        println!("{} {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

