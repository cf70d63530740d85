//! `scaforge` command-line front end.
//!
//! Every invocation writes into a fresh numbered run directory under the
//! output root (`<out>/runs/0001-<command>/`, ...), so earlier runs are never
//! touched. Exit status: 0 on success, 1 on usage or configuration errors,
//! 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scaforge_core::attack::ler;
use scaforge_core::craft::{map_similarity, quantize, NoiseArtifact, SimilarityNoise};
use scaforge_core::harness::dataset::{read_jsonl, write_jsonl, TraceRecord};
use scaforge_core::harness::lab::{arch_key, cell_seed, stream};
use scaforge_core::harness::report::{read_csv, render_report, write_csv};
use scaforge_core::harness::{run_experiment, ExperimentConfig, Lab};
use scaforge_core::leakage::ModelArch;
use scaforge_core::nas::{nas_search, Objective, SearchSpace};
use scaforge_core::noise::{calibrate, NoiseSchedule};
use scaforge_core::CoreError;

#[derive(Debug, Parser)]
#[command(name = "scaforge", version, about = "Power side-channel extraction and adversarial-noise defense simulator")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize clean sensor traces for a zoo split.
    Synth(SynthArgs),
    /// Train attack models on the zoo's training split.
    Train(TrainArgs),
    /// Craft FGSM or PGD noise for one architecture.
    Craft(CraftArgs),
    /// Calibrate a crafted schedule on the simulated board.
    Calibrate(CalibrateArgs),
    /// Search for the worst (or best) architecture on the proxy task.
    Nas(NasArgs),
    /// Decode a trace dataset with an attack model.
    Attack(AttackArgs),
    /// Run one experiment: similarity, utility, transferability or robustness.
    Experiment { name: String },
    /// Render report rows into summary.csv, charts and index.html.
    Report { rows: Vec<PathBuf> },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Heldout,
    Victims,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
    #[arg(long, default_value_t = 1)]
    per_arch: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Model ids; every configured model when omitted.
    #[arg(long = "model")]
    models: Vec<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CraftKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Args)]
struct CraftArgs {
    /// Architecture such as `Conv3x10-ReLU-FC100-Softmax`.
    #[arg(long)]
    arch: String,
    #[arg(long, value_enum, default_value = "fgsm")]
    kind: CraftKind,
    #[arg(long, default_value_t = 32)]
    budget: u32,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Noise artifact written by `craft`.
    noise: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Worst,
    Best,
}

#[derive(Debug, Args)]
struct NasArgs {
    #[arg(long, value_enum, default_value = "worst")]
    objective: ObjectiveArg,
}

#[derive(Debug, Args)]
struct AttackArgs {
    /// Trace dataset written by `synth`.
    traces: PathBuf,
    #[arg(long, default_value_t = 0)]
    model: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Creates the next numbered run directory below `<root>/runs`.
fn new_run_dir(root: &Path, command: &str) -> Outcome<PathBuf> {
    let runs = root.join("runs");
    std::fs::create_dir_all(&runs).map_err(|e| Failure::Runtime(format!("{}: {e}", runs.display())))?;
    let mut next = std::fs::read_dir(&runs)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", runs.display())))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.split('-').next()?.parse::<u32>().ok())
        .max()
        .map_or(1, |n| n + 1);
    loop {
        let dir = runs.join(format!("{next:04}-{command}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(Failure::Runtime(format!("{}: {e}", dir.display()))),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn parse_arch(s: &str) -> Outcome<ModelArch> {
    s.parse().map_err(|e: CoreError| Failure::Usage(format!("bad architecture {s:?}: {e}")))
}

fn run(cli: Cli) -> Outcome<PathBuf> {
    let mut cfg = load_config(&cli)?;
    let command = match &cli.command {
        Command::Synth(_) => "synth".to_string(),
        Command::Train(_) => "train".to_string(),
        Command::Craft(_) => "craft".to_string(),
        Command::Calibrate(_) => "calibrate".to_string(),
        Command::Nas(_) => "nas".to_string(),
        Command::Attack(_) => "attack".to_string(),
        Command::Experiment { name } => format!("experiment-{name}"),
        Command::Report { .. } => "report".to_string(),
    };
    // Inputs are checked before a run directory is created.
    match &cli.command {
        Command::Experiment { name } if !scaforge_core::harness::experiments::EXPERIMENTS.contains(&name.as_str()) => {
            return Err(Failure::Usage(format!(
                "unknown experiment {name:?}; expected one of {}",
                scaforge_core::harness::experiments::EXPERIMENTS.join(", ")
            )));
        }
        Command::Report { rows } if rows.is_empty() => return Err(Failure::Usage("report needs at least one rows file".into())),
        Command::Report { rows } => {
            if let Some(p) = rows.iter().find(|p| !p.is_file()) {
                return Err(Failure::Usage(format!("rows file {} not found", p.display())));
            }
        }
        Command::Calibrate(a) if !a.noise.is_file() => return Err(Failure::Usage(format!("noise file {} not found", a.noise.display()))),
        Command::Attack(a) if !a.traces.is_file() => return Err(Failure::Usage(format!("trace file {} not found", a.traces.display()))),
        Command::Craft(a) => {
            parse_arch(&a.arch)?;
        }
        _ => {}
    }
    let dir = new_run_dir(&cfg.out_dir, &command)?;
    if cfg.attack.checkpoint_dir.is_none() {
        cfg.attack.checkpoint_dir = Some(dir.clone());
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Failure::Runtime(e.to_string()))?;
    match cli.command {
        Command::Report { rows } => report(&rows, &dir)?,
        command => {
            let lab = Lab::new(cfg)?;
            match command {
                Command::Synth(a) => synth(&lab, &a, &dir)?,
                Command::Train(a) => train(&lab, &a, &dir)?,
                Command::Craft(a) => craft(&lab, &a, &dir)?,
                Command::Calibrate(a) => calibrate_noise(&lab, &a, &dir)?,
                Command::Nas(a) => nas(&lab, &a, &dir)?,
                Command::Attack(a) => attack(&lab, &a, &dir)?,
                Command::Experiment { name } => {
                    let rows = run_experiment(&lab, &name)?;
                    write_csv(&dir.join("report.csv"), &rows)?;
                }
                Command::Report { .. } => unreachable!(),
            }
        }
    }
    Ok(dir)
}

fn synth(lab: &Lab, a: &SynthArgs, dir: &Path) -> Outcome<()> {
    let (archs, stream_id) = match a.split {
        Split::Train => (lab.zoo.train.clone(), stream::TRAIN),
        Split::Val => (lab.zoo.val.clone(), stream::VAL),
        Split::Heldout => (lab.zoo.heldout.clone(), stream::EVAL),
        Split::Victims => (lab.victims()?, stream::EVAL),
    };
    let checksum = lab.params_checksum();
    let mut records = Vec::new();
    for arch in &archs {
        for k in 0..a.per_arch {
            let seed = cell_seed(lab.seed(), &[stream_id, arch_key(arch), k as u64]);
            let power = lab.victim_power(arch, seed)?;
            let readouts = lab.observe(&power, None, 0, 1.0, seed)?;
            records.push(TraceRecord { readouts, label: arch.symbols(), seed, params_checksum: checksum.clone() });
        }
    }
    write_jsonl(&dir.join("traces.jsonl"), &records)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    model: usize,
    checksum: String,
    final_loss: Option<f64>,
    final_val_ler: Option<f64>,
}

fn train(lab: &Lab, a: &TrainArgs, dir: &Path) -> Outcome<()> {
    let ids: Vec<usize> = if a.models.is_empty() { (0..lab.config.attack.models.len()).collect() } else { a.models.clone() };
    let mut out = Vec::new();
    for id in ids {
        lab.attacker(id)?;
        let h = lab.history(id);
        out.push(TrainSummary {
            model: id,
            checksum: lab.model_checksum(id),
            final_loss: h.as_ref().and_then(|h| h.loss.last().copied()),
            final_val_ler: h.as_ref().and_then(|h| h.val_ler.last().copied()),
        });
    }
    write_json(&dir.join("train.json"), &out)
}

fn craft(lab: &Lab, a: &CraftArgs, dir: &Path) -> Outcome<()> {
    let arch = parse_arch(&a.arch)?;
    let surrogate_checksum = lab.model_checksum(lab.config.attack.surrogate);
    let artifact = match a.kind {
        CraftKind::Fgsm => {
            let n = lab.fgsm_noise(&arch)?;
            let noise = SimilarityNoise { signs: n.signs.clone(), budget: a.budget };
            NoiseArtifact {
                mode: "fgsm".into(),
                eps: lab.config.similarity.eps,
                budget: a.budget,
                surrogate_checksum,
                target: arch.symbols(),
                schedule: map_similarity(&noise)?,
            }
        }
        CraftKind::Pgd => {
            let eps = lab.pgd_eps(a.budget, 1.0);
            if eps <= 0.0 {
                return Err(Failure::Usage(format!("budget {} gives no readout drop", a.budget)));
            }
            let n = lab.pgd_noise(&arch, eps)?;
            let (target, _) = lab.nas_target()?;
            NoiseArtifact {
                mode: "pgd".into(),
                eps,
                budget: a.budget,
                surrogate_checksum,
                target: target.symbols(),
                schedule: quantize(&n, lab.config.utility.quant)?,
            }
        }
    };
    write_json(&dir.join("noise.json"), &artifact)
}

#[derive(Serialize)]
struct CalibrationOut {
    mode: String,
    budget: u32,
    eta: f64,
    converged: bool,
    iterations: usize,
    error_sum: u64,
    history: Vec<u64>,
    table: Vec<u16>,
    schedule: NoiseSchedule,
}

fn calibrate_noise(lab: &Lab, a: &CalibrateArgs, dir: &Path) -> Outcome<()> {
    let text = std::fs::read_to_string(&a.noise).map_err(|e| Failure::Usage(format!("{}: {e}", a.noise.display())))?;
    let art: NoiseArtifact = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.noise.display())))?;
    if !(a.eta > 0.0 && a.eta <= 1.0) {
        return Err(Failure::Usage(format!("coupling {} outside (0, 1]", a.eta)));
    }
    let cal = &lab.config.calibration;
    let mut bench = lab.bench(art.budget, a.eta, cell_seed(lab.seed(), &[stream::CALIBRATE]));
    let c = calibrate(&art.schedule, &mut bench, cal.threshold(art.schedule.len()), cal.max_iters)?;
    let out = CalibrationOut {
        mode: art.mode,
        budget: art.budget,
        eta: a.eta,
        converged: c.converged,
        iterations: c.iterations,
        error_sum: c.error_sum,
        table: c.table().m.clone(),
        history: c.history,
        schedule: c.schedule,
    };
    write_json(&dir.join("calibration.json"), &out)
}

#[derive(Serialize)]
struct NasOut {
    objective: String,
    arch: String,
    symbols: Vec<u8>,
    accuracy: f64,
    episodes: usize,
}

fn nas(lab: &Lab, a: &NasArgs, dir: &Path) -> Outcome<()> {
    let n = &lab.config.nas;
    let task = lab.proxy_task()?;
    let objective = match a.objective {
        ObjectiveArg::Worst => Objective::Worst,
        ObjectiveArg::Best => Objective::Best,
    };
    let seed = cell_seed(lab.seed(), &[stream::NAS]);
    let r = nas_search(&SearchSpace::full(), &task, &n.proxy, &n.controller, objective, &lab.accuracy, seed)?;
    let path = dir.join("search_log.jsonl");
    let mut log = String::new();
    for row in &r.log {
        log.push_str(&serde_json::to_string(row).map_err(|e| Failure::Runtime(e.to_string()))?);
        log.push('\n');
    }
    std::fs::write(&path, log).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let out = NasOut {
        objective: format!("{objective:?}").to_lowercase(),
        arch: r.arch.to_string(),
        symbols: r.arch.symbols(),
        accuracy: r.accuracy,
        episodes: r.log.len(),
    };
    write_json(&dir.join("nas.json"), &out)
}

#[derive(Serialize)]
struct Decoded {
    seed: u64,
    label: String,
    decoded: String,
    ler: f64,
}

fn attack(lab: &Lab, a: &AttackArgs, dir: &Path) -> Outcome<()> {
    let records = read_jsonl(&a.traces).map_err(|e| Failure::Usage(e.to_string()))?;
    let model = lab.attacker(a.model)?;
    let join = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut total = 0.0;
    for r in &records {
        let x: Vec<f64> = r.readouts.iter().map(|&v| f64::from(v)).collect();
        let pred = model.decode(&x)?;
        let label: Vec<usize> = r.label.iter().map(|&s| usize::from(s)).collect();
        let l = ler(&pred, &label)?;
        total += l;
        w.serialize(Decoded { seed: r.seed, label: join(&label), decoded: join(&pred), ler: l }).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    let path = dir.join("decoded.csv");
    std::fs::write(&path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    if !records.is_empty() {
        eprintln!("mean LER {:.4} over {} traces", total / records.len() as f64, records.len());
    }
    Ok(())
}

fn report(paths: &[PathBuf], dir: &Path) -> Outcome<()> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_csv(p).map_err(|e| Failure::Usage(e.to_string()))?);
    }
    write_csv(&dir.join("rows.csv"), &rows)?;
    render_report(&rows, dir)?;
    Ok(())
}
