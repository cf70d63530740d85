//! The four evaluation experiments. Each one is a grid of cells (victim,
//! trial, coupling, budget, defense, attacker) evaluated through the same
//! deployment path, emitting one report row per cell.

use crate::attack::ler;
use crate::error::{CoreError, Result};
use crate::leakage::ModelArch;
use crate::nas::check_feasible;
use crate::par::par_map;

use super::lab::{arch_key, cell_seed, stream, Defense, Lab};
use super::report::{ReportRow, FLAG_INFEASIBLE_DECODE, FLAG_INVALID_DECODE, FLAG_OK, FLAG_UNCALIBRATED};

pub const SIMILARITY_DEFENSES: [Defense; 5] = [Defense::None, Defense::Fgsm, Defense::Random, Defense::Sinusoid, Defense::Fence];
pub const UTILITY_DEFENSES: [Defense; 5] = [Defense::None, Defense::Pgd, Defense::Random, Defense::Sinusoid, Defense::Fence];

pub const EXPERIMENTS: [&str; 4] = ["similarity", "utility", "transferability", "robustness"];

/// One block of cells to evaluate.
#[derive(Debug, Clone)]
pub struct Plan<'a> {
    pub experiment: &'a str,
    pub archs: &'a [ModelArch],
    pub arch_prefix: &'a str,
    pub trials: usize,
    pub attackers: &'a [usize],
    pub budgets: &'a [u32],
    pub etas: &'a [f64],
    pub defenses: &'a [Defense],
    /// Score decodes against the NAS target and on the proxy task.
    pub utility: bool,
}

fn symbols(a: &ModelArch) -> Vec<usize> {
    a.symbols().iter().map(|&s| usize::from(s)).collect()
}

fn decoded_string(pred: &[usize]) -> String {
    pred.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Evaluates every cell of `plan`. Rows are ordered by victim, trial, η,
/// budget, defense and attacker regardless of worker count.
pub fn evaluate(lab: &Lab, plan: &Plan<'_>) -> Result<Vec<ReportRow>> {
    let models = plan.attackers.iter().map(|&a| lab.attacker(a).map(|m| (a, m))).collect::<Result<Vec<_>>>()?;
    let target = if plan.utility { Some(lab.nas_target()?) } else { None };
    let jobs: Vec<(usize, &ModelArch, usize)> = plan
        .archs
        .iter()
        .enumerate()
        .flat_map(|(i, a)| (0..plan.trials).map(move |t| (i, a, t)))
        .collect();
    let blocks = par_map(&jobs, |&(i, arch, trial)| -> Result<Vec<ReportRow>> {
        let label = symbols(arch);
        let seed = cell_seed(lab.seed(), &[stream::EVAL, arch_key(arch), trial as u64]);
        let victim = lab.victim_power(arch, seed)?;
        let victim_acc = if plan.utility { lab.proxy_accuracy(arch)? } else { None };
        let mut rows = Vec::new();
        for &eta in plan.etas {
            for &budget in plan.budgets {
                let crafted = lab.crafted(arch, plan.defenses, budget, eta)?;
                for &defense in plan.defenses {
                    let (readouts, converged) = lab.defended(defense, &crafted, &victim, budget, eta, seed)?;
                    let x: Vec<f64> = readouts.iter().map(|&r| f64::from(r)).collect();
                    for (attacker, model) in &models {
                        let pred = model.decode(&x)?;
                        let mut flag = if converged { FLAG_OK } else { FLAG_UNCALIBRATED };
                        let (mut to_target, mut extracted, mut target_acc) = (None, None, None);
                        if let Some((t, t_acc)) = &target {
                            to_target = Some(ler(&pred, &symbols(t))?);
                            target_acc = Some(*t_acc);
                            let decoded = pred.iter().map(|&s| s as u8).collect::<Vec<_>>();
                            match ModelArch::from_symbols(&decoded) {
                                Ok(a) if check_feasible(&a).is_ok() => extracted = lab.proxy_accuracy(&a)?,
                                Ok(_) => flag = FLAG_INFEASIBLE_DECODE,
                                Err(_) => flag = FLAG_INVALID_DECODE,
                            }
                        }
                        rows.push(ReportRow {
                            experiment: plan.experiment.to_string(),
                            defense: defense.name().to_string(),
                            budget,
                            attacker: *attacker,
                            eta,
                            arch_id: format!("{}{i}", plan.arch_prefix),
                            arch: arch.to_string(),
                            trial,
                            seed,
                            ler_to_label: Some(ler(&pred, &label)?),
                            ler_to_target: to_target,
                            proxy_acc_extracted: extracted,
                            proxy_acc_victim: victim_acc,
                            proxy_acc_target: target_acc,
                            decoded: decoded_string(&pred),
                            flag: flag.to_string(),
                            config_checksum: lab.checksum.clone(),
                        });
                    }
                }
            }
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

fn similarity_plan<'a>(lab: &'a Lab, experiment: &'a str, attackers: &'a [usize], budgets: &'a [u32], etas: &'a [f64], defenses: &'a [Defense]) -> Plan<'a> {
    Plan {
        experiment,
        archs: &lab.zoo.heldout,
        arch_prefix: "heldout-",
        trials: lab.config.similarity.trials,
        attackers,
        budgets,
        etas,
        defenses,
        utility: false,
    }
}

fn utility_plan<'a>(lab: &'a Lab, experiment: &'a str, victims: &'a [ModelArch], attackers: &'a [usize], budgets: &'a [u32], etas: &'a [f64], defenses: &'a [Defense]) -> Plan<'a> {
    Plan {
        experiment,
        archs: victims,
        arch_prefix: "victim-",
        trials: lab.config.utility.trials,
        attackers,
        budgets,
        etas,
        defenses,
        utility: true,
    }
}

/// Budget sweep of every similarity defense against the surrogate.
pub fn run_similarity_experiment(lab: &Lab) -> Result<Vec<ReportRow>> {
    let attackers = [lab.config.attack.surrogate];
    evaluate(lab, &similarity_plan(lab, "similarity", &attackers, &lab.config.similarity.budgets, &[1.0], &SIMILARITY_DEFENSES))
}

/// Targeted PGD noise and the baselines at the utility budget.
pub fn run_utility_experiment(lab: &Lab) -> Result<Vec<ReportRow>> {
    let attackers = [lab.config.attack.surrogate];
    let victims = lab.victims()?;
    let budgets = [lab.config.utility.budget];
    evaluate(lab, &utility_plan(lab, "utility", &victims, &attackers, &budgets, &[1.0], &UTILITY_DEFENSES))
}

/// Noise crafted on the surrogate, replayed against every attacker model.
pub fn run_transferability(lab: &Lab) -> Result<Vec<ReportRow>> {
    let mut attackers = vec![lab.config.attack.surrogate];
    attackers.extend(lab.config.attack.attackers.iter().copied().filter(|&a| a != lab.config.attack.surrogate));
    let sim_budget = [lab.config.transferability.budget];
    let mut rows = evaluate(lab, &similarity_plan(lab, "transferability_similarity", &attackers, &sim_budget, &[1.0], &[Defense::None, Defense::Fgsm]))?;
    let victims = lab.victims()?;
    let util_budget = [lab.config.utility.budget];
    rows.extend(evaluate(lab, &utility_plan(lab, "transferability_utility", &victims, &attackers, &util_budget, &[1.0], &[Defense::None, Defense::Pgd]))?);
    Ok(rows)
}

/// Both defenses at each configured coupling, recalibrated in situ.
pub fn run_robustness(lab: &Lab) -> Result<Vec<ReportRow>> {
    let attackers = [lab.config.attack.surrogate];
    let r = &lab.config.robustness;
    let mut rows = evaluate(lab, &similarity_plan(lab, "robustness_similarity", &attackers, &r.budgets, &r.etas, &[Defense::None, Defense::Fgsm, Defense::Random]))?;
    let victims = lab.victims()?;
    let budgets = [lab.config.utility.budget];
    rows.extend(evaluate(lab, &utility_plan(lab, "robustness_utility", &victims, &attackers, &budgets, &r.etas, &UTILITY_DEFENSES))?);
    Ok(rows)
}

pub fn run_experiment(lab: &Lab, name: &str) -> Result<Vec<ReportRow>> {
    match name {
        "similarity" => run_similarity_experiment(lab),
        "utility" => run_utility_experiment(lab),
        "transferability" => run_transferability(lab),
        "robustness" => run_robustness(lab),
        other => Err(CoreError::Config(format!("unknown experiment {other:?}; expected one of {}", EXPERIMENTS.join(", ")))),
    }
}
