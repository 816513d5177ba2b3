use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimforge::config::RunConfig;
use mimforge::error::{Error, Result};
use mimforge::gradsuite::{SUITE_H, SUITE_TOL};
use mimforge::records::render_table;
use mimforge::runner::{self, RunDir};

/// Masked feature-regression pre-training at desk scale.
#[derive(Parser)]
#[command(name = "mimforge", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.peak_lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked feature regression (or distillation) of the encoder.
    Pretrain {
        /// Continue from a checkpoint written by a run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pretrain both pretext modes from one seed and compare them.
    Ablate,
    /// Linear probe of a checkpoint's frozen encoder (random init without one).
    Probe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Contrastive image-caption training and zero-shot evaluation.
    ClipTrain {
        /// MIM checkpoint for the vision tower; overrides `clip.init`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Zero-shot top-1 of a contrastive checkpoint on the test split.
    Zeroshot {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference checks of every op and the full pretext loss.
    Gradcheck {
        #[arg(long, default_value_t = SUITE_H)]
        h: f64,
        #[arg(long, default_value_t = SUITE_TOL)]
        tol: f64,
    },
    /// Write the configured splits (and frozen teacher features) to disk.
    GenData,
    /// List a checkpoint's config and tensors.
    InspectCkpt { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Ablate => "ablate",
            Command::Probe { .. } => "probe",
            Command::ClipTrain { .. } => "clip-train",
            Command::Zeroshot { .. } => "zeroshot",
            Command::Gradcheck { .. } => "gradcheck",
            Command::GenData => "gen-data",
            Command::InspectCkpt { .. } => "inspect-ckpt",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::ClipTrain { init: Some(p) } = &cli.command {
        cfg.clip.init = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::InspectCkpt { path } = &cli.command {
        print!("{}", runner::inspect_checkpoint(path)?.listing);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let mut dir = RunDir::create(&cfg, cli.command.name())?;
    match &cli.command {
        Command::Pretrain { resume } => {
            let out = runner::pretrain_command(&cfg, &mut dir, resume.as_deref())?;
            println!("step={} loss={:.6} checkpoint={}", out.opt.step, out.tail_loss(1), out.final_checkpoint.display());
        }
        Command::Ablate => print!("{}", runner::ablate_command(&cfg, &mut dir)?.1),
        Command::Probe { ckpt } => {
            let r = runner::probe_command(&cfg, &mut dir, ckpt.as_deref())?;
            println!("feature={} top1={:.4}", r.feature_kind.name(), r.top1);
        }
        Command::ClipTrain { .. } => {
            let out = runner::clip_train_command(&cfg, &mut dir)?;
            println!(
                "matched={} new={} zeroshot_top1={:.4} checkpoint={}",
                out.init.matched.len(),
                out.init.new.len(),
                out.zero_shot_top1,
                out.final_checkpoint.display()
            );
        }
        Command::Zeroshot { ckpt } => println!("top1={:.4}", runner::zeroshot_command(&cfg, &mut dir, ckpt)?),
        Command::Gradcheck { h, tol } => {
            let entries = runner::gradcheck_command(&mut dir, *h, *tol)?;
            let rows: Vec<Vec<String>> = entries
                .iter()
                .map(|e| vec![e.name.to_string(), format!("{:.2e}", e.report.max_rel_err), e.report.checked.to_string(), e.report.passed.to_string()])
                .collect();
            print!("{}", render_table(&["op", "max rel err", "checked", "passed"], &rows));
            if let Some(bad) = entries.iter().find(|e| !e.report.passed) {
                return Err(Error::GradCheck(format!("{} exceeds tolerance {tol:e}", bad.name)));
            }
        }
        Command::GenData => {
            runner::gen_data_command(&cfg, &mut dir)?;
            println!("wrote {}", dir.path.display());
        }
        Command::InspectCkpt { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mimforge: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
