use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mialab::data::{make_split, write_csv, Dataset, SplitPlan};
use mialab::experiment::{
    attacked_snapshots, federate, observe_and_attack, run_experiment_on, ExperimentConfig, Scenario,
};
use mialab::features::{write_feature_dump, FeatureExtractor};
use mialab::metrics::evaluate;
use mialab::presets::{preset, scenario_presets};
use mialab::snapshot::ModelSnapshot;
use mialab::target::train_target;
use mialab::{MiaError, Result};

#[derive(Parser)]
#[command(name = "mialab", version, about = "White-box membership inference experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; artifacts go to `<out>/<experiment name>`.
    #[arg(long, env = "MIALAB_OUT", default_value = "mialab-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the config's dataset as CSV.
    GenData(Common),
    /// Train the stand-alone target and save its snapshots and split.
    TrainTarget(Common),
    /// Run the federated simulation and save the observations and split.
    RunFed(Common),
    /// Dump attack features computed from saved snapshots.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train and evaluate the attack on saved snapshots.
    TrainAttack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluate a scores CSV (`example,score,member`).
    Evaluate {
        scores: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run an experiment end to end.
    Run(Common),
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
}

#[derive(Args, Clone)]
struct Inputs {
    /// Directory of `.snap` files, taken in file-name order.
    #[arg(long)]
    snapshots: PathBuf,
    /// `split.json` written by `train-target` or `run-fed`.
    #[arg(long)]
    split: PathBuf,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| MiaError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => preset(name).ok_or_else(|| MiaError::Config(format!("unknown preset `{name}`")))?,
        (None, None) => return Err(MiaError::Config("pass --config or --preset".into())),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.output_dir = Some(c.out.join(&cfg.name));
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().expect("set by load_config");
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.dataset.load(cfg.seed).map_err(|e| e.in_stage("dataset"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_snapshots(dir: &Path) -> Result<Vec<ModelSnapshot>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "snap"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MiaError::Argument(format!("no .snap files in {}", dir.display())));
    }
    files.iter().map(ModelSnapshot::load).collect()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = load_config(&c)?;
            let path = out_dir(&cfg)?.join("data.csv");
            write_csv(&load_data(&cfg)?, &path)?;
            println!("{}", path.display());
        }
        Cmd::TrainTarget(c) => {
            let cfg = load_config(&c)?;
            if cfg.scenario == Scenario::Federated {
                return Err(MiaError::Config("train-target needs a stand-alone or fine-tune config".into()));
            }
            let ds = load_data(&cfg)?;
            cfg.check_feasible(&ds)?;
            let dir = out_dir(&cfg)?;
            let plan = make_split(ds.len(), &cfg.split, cfg.seed)?;
            let trained = train_target(&ds, &plan, &cfg.target, cfg.seed).map_err(|e| e.in_stage("target"))?;
            let snap_dir = dir.join("snapshots");
            fs::create_dir_all(&snap_dir)?;
            for s in attacked_snapshots(&cfg, &trained) {
                s.save(snap_dir.join(format!("target_e{:04}.snap", s.epoch)))?;
            }
            write_json(&dir.join("split.json"), &plan)?;
            write_json(&dir.join("curve.json"), &trained.curve)?;
            println!(
                "best epoch {} gap {:.3}; wrote {}",
                trained.best.epoch,
                trained.gap(),
                dir.display()
            );
        }
        Cmd::RunFed(c) => {
            let cfg = load_config(&c)?;
            let ds = load_data(&cfg)?;
            cfg.check_feasible(&ds)?;
            let dir = out_dir(&cfg)?;
            let (outcome, plan) = federate(&ds, &cfg)?;
            let snap_dir = dir.join("snapshots");
            fs::create_dir_all(&snap_dir)?;
            for s in outcome.log.target_snapshots()? {
                s.save(snap_dir.join(format!("target_r{:04}.snap", s.epoch)))?;
            }
            outcome.log.save(dir.join("observations"))?;
            write_json(&dir.join("split.json"), &plan)?;
            write_json(&dir.join("rounds.json"), &outcome.rounds)?;
            println!("wrote {}", dir.display());
        }
        Cmd::Extract { common, inputs } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg)?;
            let dir = out_dir(&cfg)?;
            let snaps = read_snapshots(&inputs.snapshots)?;
            let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(&inputs.split)?)?;
            plan.validate(ds.len())?;
            let ex = FeatureExtractor::new(&snaps, cfg.features.clone())?;
            for (name, ids) in [
                ("train_members", &plan.attack_train_members),
                ("train_nonmembers", &plan.attack_train_nonmembers),
                ("test_members", &plan.attack_test_members),
                ("test_nonmembers", &plan.attack_test_nonmembers),
            ] {
                let feats = ex.extract_many(&ds, ids)?;
                let rows: Vec<_> = ids.iter().copied().zip(&feats).collect();
                write_feature_dump(dir.join(format!("features_{name}.csv")), &rows)?;
            }
            println!("wrote {}", dir.display());
        }
        Cmd::TrainAttack { common, inputs } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg)?;
            let dir = out_dir(&cfg)?;
            let snaps = read_snapshots(&inputs.snapshots)?;
            let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(&inputs.split)?)?;
            plan.validate(ds.len())?;
            let run = observe_and_attack(&ds, &cfg, &snaps, &plan, Some(&dir), None, None)?;
            write_json(&dir.join("attack.json"), &run)?;
            for a in &run.attacks {
                println!("{}: accuracy {:.4} auc {:.4}", a.name, a.eval.attack_accuracy, a.eval.auc);
            }
        }
        Cmd::Evaluate { scores, threshold } => {
            let mut reader = csv::Reader::from_path(&scores)?;
            let (mut s, mut truth) = (Vec::new(), Vec::new());
            for (i, row) in reader.deserialize::<(usize, f64, Option<u8>)>().enumerate() {
                let (_, score, member) = row?;
                let member = member.ok_or_else(|| MiaError::Format {
                    row: i + 1,
                    msg: "membership label missing".into(),
                })?;
                s.push(score);
                truth.push(member == 1);
            }
            println!("{}", serde_json::to_string_pretty(&evaluate(&s, &truth, threshold)?)?);
        }
        Cmd::Run(c) => {
            let cfg = load_config(&c)?;
            let ds = load_data(&cfg)?;
            let summary = run_experiment_on(&ds, &cfg)?;
            for r in &summary.runs {
                for a in &r.attacks {
                    println!(
                        "{} {} {}: accuracy {:.4} auc {:.4}",
                        summary.name, r.label, a.name, a.eval.attack_accuracy, a.eval.auc
                    );
                }
            }
            println!("wrote {}", out_dir(&cfg)?.join("summary.json").display());
        }
        Cmd::Presets { name: None } => {
            for p in scenario_presets() {
                println!("{}", p.name);
            }
        }
        Cmd::Presets { name: Some(name) } => {
            let p = preset(&name).ok_or_else(|| MiaError::Config(format!("unknown preset `{name}`")))?;
            println!("{}", serde_json::to_string_pretty(&p)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
