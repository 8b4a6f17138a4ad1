use cbc::harness::{
    complexity_csv, complexity_specs, report_complexity, run_layer_sweep, run_robustness_matrix, EvalReport,
    ExperimentConfig, Family, Workbench,
};
use cbc::nn::{canonical, ArchitectureSpec, Model};
use cbc::train::checkpoint::load_model;
use cbc::train::compose_dae_cnn;
use cbc::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cbc", version, about = "Code-bridged classifier robustness workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full-length training recipe on the full dataset.
    #[arg(long)]
    long_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Base,
    DaeCnn,
    Cbc,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoising autoencoder for every configured noise level.
    TrainDae(Common),
    /// Train the baseline classifier.
    TrainBase(Common),
    /// Train code-bridged classifiers on top of the trained encoders.
    TrainCbc(Common),
    /// Run the configured attacks against one model.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "base")]
        model: Target,
        /// Checkpoint to attack; a freshly initialised model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// DAE checkpoint for `--model dae-cnn` with `--checkpoint`.
        #[arg(long)]
        dae_checkpoint: Option<PathBuf>,
    },
    /// Every model family under every attack.
    EvalMatrix(Common),
    /// CBC robustness as a function of removed convolutions.
    SweepLayers(Common),
    /// MACs and parameter counts of base, DAE-CNN and CBC.
    Complexity {
        /// Without a config, all shipped architectures are reported.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if c.long_run {
        cfg.apply_long_run();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn finish(report: &EvalReport, out: &Path) -> Result<()> {
    report.write(out, &report.command)?;
    print!("{}", report.to_csv());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("wrote {}", out.join(format!("{}.{{csv,json}}", report.command)).display());
    Ok(())
}

fn train(cfg: ExperimentConfig, command: &str) -> Result<()> {
    let out = cfg.out_dir.clone();
    let mut wb = Workbench::new(cfg)?;
    let mut report = EvalReport::new(command, &wb.hash, wb.cfg.seed);
    let sigmas = wb.cfg.noise_sigmas.clone();
    match command {
        "train-base" => {
            let base = wb.base()?;
            report.models.push(wb.summary("base", &base, None, None)?);
            wb.evaluate("base", &base, &[], None, None, &mut report)?;
        }
        "train-dae" => {
            for s in sigmas {
                let dae = wb.dae(s)?;
                report.models.push(wb.dae_summary(&dae, s)?);
            }
        }
        _ => {
            let spec = wb.cbc_spec()?;
            let removed = wb.cfg.models.cbc.is_none().then_some(wb.cfg.models.removed_layers);
            for s in sigmas {
                let dae = wb.dae(s)?;
                let cbc = wb.cbc(&dae, &spec, &format!("cbc-s{s:.2}"))?;
                report.models.push(wb.summary("cbc", &cbc, Some(s), removed)?);
                wb.evaluate("cbc", &cbc, &[], Some(s), removed, &mut report)?;
            }
        }
    }
    finish(&report, &out)
}

fn attack(cfg: ExperimentConfig, target: Target, ckpt: Option<&Path>, dae_ckpt: Option<&Path>) -> Result<()> {
    let out = cfg.out_dir.clone();
    let wb = Workbench::new(cfg)?;
    let seed = wb.cfg.seed;
    let fresh = |spec: ArchitectureSpec| Model::build(&spec, seed);
    let (label, model) = match (target, ckpt) {
        (Target::Base, Some(p)) | (Target::Cbc, Some(p)) => (None, load_model(p)?.0),
        (Target::DaeCnn, Some(p)) => {
            let dae = dae_ckpt.ok_or_else(|| Error::Config("--model dae-cnn with --checkpoint needs --dae-checkpoint".into()))?;
            (None, compose_dae_cnn(&load_model(dae)?.0, &load_model(p)?.0)?)
        }
        (Target::Base, None) => (None, fresh(wb.base_spec()?)?),
        (Target::Cbc, None) => (None, fresh(wb.cbc_spec()?)?),
        (Target::DaeCnn, None) => (None, compose_dae_cnn(&fresh(wb.dae_spec()?)?, &fresh(wb.base_spec()?)?)?),
    };
    let label: String = label.unwrap_or(match target {
        Target::Base => Family::Base.name(),
        Target::DaeCnn => Family::DaeCnn.name(),
        Target::Cbc => Family::Cbc.name(),
    })
    .into();
    let mut report = EvalReport::new("attack", &wb.hash, seed);
    report.models.push(wb.summary(&label, &model, None, None)?);
    wb.evaluate(&label, &model, &wb.cfg.attacks, None, None, &mut report)?;
    finish(&report, &out)
}

fn complexity(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let csv = match config {
        Some(p) => complexity_csv(&report_complexity(&complexity_specs(&ExperimentConfig::load(p)?)?)?),
        None => {
            let mut csv = String::new();
            for ds in ["fmnist", "cifar"] {
                let specs = ["base", "dae-cnn", "cbc"]
                    .iter()
                    .map(|m| {
                        let name = format!("{ds}-{m}");
                        canonical::by_name(&name).map(|s| (name, s))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let table = complexity_csv(&report_complexity(&specs)?);
                if csv.is_empty() {
                    csv = table;
                } else {
                    csv.extend(table.lines().skip(1).map(|l| format!("{l}\n")));
                }
            }
            csv
        }
    };
    print!("{csv}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("complexity.csv");
        std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDae(c) => train(load(&c)?, "train-dae"),
        Command::TrainBase(c) => train(load(&c)?, "train-base"),
        Command::TrainCbc(c) => train(load(&c)?, "train-cbc"),
        Command::Attack { common, model, checkpoint, dae_checkpoint } => {
            attack(load(&common)?, model, checkpoint.as_deref(), dae_checkpoint.as_deref())
        }
        Command::EvalMatrix(c) => {
            let cfg = load(&c)?;
            finish(&run_robustness_matrix(&cfg)?, &cfg.out_dir)
        }
        Command::SweepLayers(c) => {
            let cfg = load(&c)?;
            finish(&run_layer_sweep(&cfg)?, &cfg.out_dir)
        }
        Command::Complexity { config, out } => complexity(config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
