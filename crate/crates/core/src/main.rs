use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sepdgconv::architectures::group_structure_report;
use sepdgconv::config::Config;
use sepdgconv::error::{Error, Result};
use sepdgconv::harness::{
    format_table, group_report_csv, load_dataset, load_network, metrics_csv, regular_blocks_of, run_ablation,
    run_comparison, run_train, ComparisonPlan, ComparisonStrategy, Direction, Experiment,
};
use sepdgconv::training::evaluate;

#[derive(Parser)]
#[command(name = "sepdgconv", version, about = "Learned group convolutions for multi-source image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured network once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Block-wise ablation passes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// forward, backward or both.
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare convolution strategies under one configuration.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group count and sparsity of every masked layer.
    ReportGroups {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for s in &c.set {
        cfg.apply(s)?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &Config, flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| cfg.get("run.dir").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(default))
}

fn save_config(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&cfg)?;
            ds.save(&out)?;
            println!(
                "wrote {} channels, {} train / {} test cells to {}",
                ds.channels(),
                ds.train_cells.len(),
                ds.test_cells.len(),
                out.display()
            );
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, out, "runs/train");
            let exp = Experiment::from_config(&cfg)?;
            save_config(&cfg, &out)?;
            let row = run_train(&exp, Some(&out))?;
            print!("{}", format_table("train", std::slice::from_ref(&row)));
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let exp = Experiment::from_config(&cfg)?;
            let mut net = load_network(&exp, &checkpoint)?;
            print!("{}", metrics_csv(&evaluate(&mut net, &exp.test)?));
        }
        Command::Ablate { common, direction, out } => {
            let cfg = load_config(&common)?;
            let dirs =
                Direction::parse_list(direction.as_deref().or(cfg.get("ablate.direction")).unwrap_or("forward"))?;
            let out = out_dir(&cfg, out, "runs/ablate");
            let exp = Experiment::from_config(&cfg)?;
            save_config(&cfg, &out)?;
            let result = run_ablation(&exp, &dirs, Some(&out))?;
            print!("{}", format_table("reference", std::slice::from_ref(&result.reference)));
            for (d, rows) in &result.passes {
                print!("{}", format_table(&format!("{} pass", d.name()), rows));
            }
        }
        Command::Compare { common, out } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, out, "runs/compare");
            let exp = Experiment::from_config(&cfg)?;
            let mut plan = ComparisonPlan::from_config(&cfg, &exp.dataset.modality_widths())?;
            save_config(&cfg, &out)?;
            if plan.strategies.contains(&ComparisonStrategy::AblationBest) && plan.ablation_best.is_none() {
                let ablation = run_ablation(&exp, &[Direction::Forward], Some(&out.join("ablation")))?;
                plan.ablation_best = Some(regular_blocks_of(ablation.best()));
            }
            let rows = run_comparison(&exp, &plan, Some(&out))?;
            print!("{}", format_table("comparison", &rows));
        }
        Command::ReportGroups { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let exp = Experiment::from_config(&cfg)?;
            let net = match checkpoint {
                Some(p) => load_network(&exp, &p)?,
                None => sepdgconv::architectures::build(&exp.arch, 0)?,
            };
            let report = group_structure_report(&net)?;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            print!("{}", group_report_csv(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
