use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gap_cli::commands::{self, Ctx};
use gap_cli::config::Config;
use gap_cli::reproduce;
use gap_cli::{data_root, exit, Failure};
use gap_core::models::Variant;
use gap_core::theorylab::NoiseTarget;

#[derive(Parser)]
#[command(name = "gap", version, about = "Goal-aware prediction laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out a uniform random policy and store the trajectories.
    Collect {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train one model variant on a dataset.
    Train {
        #[arg(long)]
        variant: Variant,
        /// Dataset file or directory; relative paths fall back to $GAP_DATA_DIR.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run replanning episodes with a trained model, or the true dynamics.
    Plan {
        #[arg(long)]
        env: Option<String>,
        /// Checkpoint directory; omit to plan with the true dynamics.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Randomised check of the ε-optimality guarantee.
    TheoremFuzz {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Success under noise injected into one true-cost bucket at a time.
    NoiseExp {
        #[arg(long)]
        target: NoiseTarget,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Prediction error of trained models on the best-k random sequences.
    ErrorProfile {
        #[arg(long)]
        env: Option<String>,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Planning success of trained models, with oracle and random rows.
    SuccessTable {
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        #[arg(long = "task", default_values_t = ["blockpush-task1".to_string(), "blockpush-task2".to_string()])]
        tasks: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// True versus predicted coordinates along one action sequence.
    RolloutDump {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        model: PathBuf,
        /// Trial whose start and goal are used.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// One comma-separated action per line; default is an oracle plan.
        #[arg(long)]
        actions: Option<PathBuf>,
    },
    /// Run every stage and check the acceptance criteria.
    Reproduce,
}

fn overrides(global: &Global, cmd: &Cmd) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for s in &global.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    match cmd {
        Cmd::Collect {
            env,
            episodes,
            length,
        } => {
            put("env", env.clone());
            put("data.episodes", episodes.map(|x| x.to_string()));
            put("data.length", length.map(|x| x.to_string()));
        }
        Cmd::Train { steps, .. } => put("train.steps", steps.map(|x| x.to_string())),
        Cmd::Plan { env, .. } | Cmd::ErrorProfile { env, .. } | Cmd::RolloutDump { env, .. } => {
            put("env", env.clone())
        }
        Cmd::TheoremFuzz { trials, n } => {
            put("fuzz.trials", trials.map(|x| x.to_string()));
            put("fuzz.n", n.map(|x| x.to_string()));
        }
        Cmd::NoiseExp { trials, .. } => put("noise.trials", trials.map(|x| x.to_string())),
        Cmd::SuccessTable { trials, .. } => put("eval.trials", trials.map(|x| x.to_string())),
        Cmd::Reproduce => {}
    }
    Ok(out)
}

fn default_out(cmd: &Cmd, cfg: &Config, seed: u64) -> PathBuf {
    match cmd {
        Cmd::Collect { .. } => data_root().join(format!("{}-s{seed}", cfg.env)),
        Cmd::Train { variant, .. } => {
            PathBuf::from("runs").join(format!("train-{variant}-s{seed}"))
        }
        Cmd::Plan { .. } => PathBuf::from("runs").join(format!("plan-s{seed}")),
        Cmd::TheoremFuzz { .. } => PathBuf::from("runs").join(format!("theorem-fuzz-s{seed}")),
        Cmd::NoiseExp { target, .. } => {
            PathBuf::from("runs").join(format!("noise-{}-s{seed}", target.tag()))
        }
        Cmd::ErrorProfile { .. } => PathBuf::from("runs").join(format!("error-profile-s{seed}")),
        Cmd::SuccessTable { .. } => PathBuf::from("runs").join(format!("success-table-s{seed}")),
        Cmd::RolloutDump { .. } => PathBuf::from("runs").join(format!("rollout-s{seed}")),
        Cmd::Reproduce => PathBuf::from("runs").join(format!("reproduce-s{seed}")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Failure::Internal(e.into()))?;
    }
    let ov = overrides(&cli.global, &cli.cmd)?;
    let cfg = Config::load(cli.global.config.as_deref(), &ov).map_err(Failure::Usage)?;
    let seed = cli.global.seed;
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| default_out(&cli.cmd, &cfg, seed));
    let ctx = Ctx {
        cfg,
        seed,
        out,
        command: std::env::args().collect::<Vec<_>>().join(" "),
    };
    match &cli.cmd {
        Cmd::Collect { .. } => commands::collect(&ctx).map(drop),
        Cmd::Train { variant, data, .. } => commands::train(&ctx, *variant, data).map(drop),
        Cmd::Plan { model, trials, .. } => {
            commands::plan(&ctx, model.as_deref(), *trials).map(drop)
        }
        Cmd::TheoremFuzz { .. } => commands::theorem_fuzz(&ctx).map(drop),
        Cmd::NoiseExp { target, .. } => commands::noise_exp(&ctx, *target).map(drop),
        Cmd::ErrorProfile { models, .. } => commands::error_profile(&ctx, models).map(drop),
        Cmd::SuccessTable { models, tasks, .. } => {
            commands::success_table(&ctx, models, tasks, ctx.cfg.eval_trials).map(drop)
        }
        Cmd::RolloutDump {
            model,
            trial,
            actions,
            ..
        } => commands::rollout_dump(&ctx, model, *trial, actions.as_deref()).map(drop),
        Cmd::Reproduce => {
            let report = reproduce::reproduce(&ctx)?;
            for c in report.checks.iter().chain(&report.budgets) {
                println!(
                    "[{}] {:<5} {}: {} ({})",
                    c.criterion,
                    match (c.criterion, c.pass) {
                        (0, _) => "info",
                        (_, true) => "ok",
                        (_, false) => "FAIL",
                    },
                    c.check,
                    c.value,
                    c.threshold
                );
            }
            println!(
                "summary: {}",
                ctx.out.join(reproduce::SUMMARY_FILE).display()
            );
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<String> = reproduce::EVALUATED
                    .iter()
                    .filter(|&&c| !report.criterion_passed(c))
                    .map(u8::to_string)
                    .collect();
                Err(Failure::Acceptance(format!(
                    "criteria {} failed",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
