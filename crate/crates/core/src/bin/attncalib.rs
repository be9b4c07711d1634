use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attncalib::calib_dac::consecutive_pairs;
use attncalib::pipeline::{Arm, PipelineError, Run, RunConfig};

#[derive(Parser)]
#[command(name = "attncalib", version, about = "Spatial attention bias workbench on a toy vision-language model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set dac.train.lambda=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets every seed in the `seeds` section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Defaults to $ATTNCALIB_OUT, then `paths.root`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the pretraining corpus, calibration and evaluation sets.
    Generate,
    /// Pretrain the backbone on the generated corpus.
    Pretrain,
    /// Measure blank-input attention bias.
    Probe {
        #[arg(long, conflicts_with = "with_dac")]
        with_uac: bool,
        #[arg(long)]
        with_dac: bool,
    },
    /// Estimate the uniform calibration from a meaningless input.
    Uac,
    /// Train the dynamic calibration module with the backbone frozen.
    DacTrain,
    /// Score every configured arm on the held-out sets.
    Eval,
    /// Train and score one module per (lambda, layer set) cell.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.1])]
        lambda: Vec<f64>,
        /// `all-pairs`, or layer sets such as `0-1,2-3`.
        #[arg(long, default_value = "all-pairs")]
        ndac: String,
    },
}

fn layer_sets(spec: &str, n_layers: usize) -> Result<Vec<Vec<usize>>, PipelineError> {
    if spec == "all-pairs" {
        return Ok(consecutive_pairs(n_layers));
    }
    spec.split(',')
        .map(|set| {
            set.split('-')
                .map(|l| {
                    l.trim()
                        .parse::<usize>()
                        .map_err(|_| PipelineError::Config(format!("bad layer set {set:?} in --ndac")))
                })
                .collect()
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let g = cli.global;
    let cfg = RunConfig::resolve(g.config.as_deref(), &g.overrides, g.seed)?;
    let root = g
        .out
        .or_else(|| std::env::var_os("ATTNCALIB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.paths.root.clone());
    let run = Run::new(cfg, &root)?;
    match cli.cmd {
        Cmd::Generate => {
            let m = run.generate()?;
            for (name, n) in &m.counts {
                println!("{name:<22} {n:>7} items");
            }
        }
        Cmd::Pretrain => {
            let r = run.pretrain()?;
            if let Some(last) = r.epochs.last() {
                println!("{} steps, final epoch loss {:.4}", r.steps, last.mean_loss);
            }
            println!("checkpoint {} ({})", run.model_path().display(), r.checkpoint_hash);
        }
        Cmd::Probe { with_uac, with_dac } => {
            let arm = match (with_uac, with_dac) {
                (true, _) => Arm::Uac,
                (_, true) => Arm::Dac,
                _ => Arm::Baseline,
            };
            let r = run.probe(arm)?;
            for l in &r.layers {
                println!("layer {}: kl {:.6} hot-quadrant mass {:.4}", l.layer, l.kl, l.hot_mass);
            }
        }
        Cmd::Uac => {
            let r = run.uac()?;
            println!(
                "calibrated layers {:?}, residual kl {:.3e}{}",
                r.layers,
                r.residual.max_kl(),
                if r.floored { " (epsilon floor hit)" } else { "" }
            );
        }
        Cmd::DacTrain => {
            let r = run.dac_train()?;
            println!("baseline calibration accuracy {:.4}", r.baseline_cal_accuracy);
            for c in &r.candidates {
                println!("layers {:?}: calibration accuracy {:.4} after {} steps", c.layers, c.cal_accuracy, c.steps);
            }
            println!("kept layers {:?}", r.chosen);
        }
        Cmd::Eval => {
            let r = run.eval()?;
            for a in &r.arms {
                let rand = a.pope.get("random").map_or(f64::NAN, |m| m.accuracy);
                let mme = a.mme.as_ref().map_or(f64::NAN, |m| m.total);
                println!(
                    "{:<8} polling acc {:.4}  subtasks {:.1}  CHAIR_i {:.4} CHAIR_s {:.4}  gap {:.4} overall {:.4}",
                    a.arm.name(),
                    rand,
                    mme,
                    a.chair.per_object_rate,
                    a.chair.per_caption_rate,
                    a.gap.gap,
                    a.gap.overall
                );
            }
        }
        Cmd::Sweep { lambda, ndac } => {
            let sets = layer_sets(&ndac, run.config().model.n_layers)?;
            let r = run.sweep(&lambda, &sets)?;
            for (tag, cells) in [("ce-only", &r.ce_only), ("contrastive", &r.contrastive)] {
                for c in cells {
                    println!(
                        "{tag:<12} lambda {:<5} layers {:?}: cal {:.4} polling {:.4} gap {:.4}",
                        c.lambda, c.layers, c.cal_accuracy, c.pope_random_accuracy, c.gap
                    );
                }
            }
        }
    }
    println!("artifacts in {}", run.root().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
