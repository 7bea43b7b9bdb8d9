use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdnav::eval::{
    eval_seeds, plot_episode, run_policy_eval, EvalPolicy, EvalReport, Evaluator,
};
use crowdnav::marl::{train, Model, TrainRun};
use crowdnav::Error;

#[derive(Parser)]
#[command(
    name = "crowdnav",
    version,
    about = "Multi-robot crowd navigation: train, evaluate, replay and plot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hierarchical MAPPO policy and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory (config snapshot, diagnostics.csv, checkpoints).
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a policy over seeded cases and write logs and a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 500)]
        cases: usize,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Run one episode and write its JSONL log.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Output log file.
        #[arg(long, default_value = "episode.jsonl")]
        out: PathBuf,
    },
    /// Render an episode log as SVG.
    Plot {
        /// JSONL episode log.
        log: PathBuf,
        #[arg(long, default_value = "episode.svg")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON (scenario, orca, train); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed (train), the case seed base (eval) or the
    /// scenario seed (rollout).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PolicyArgs {
    /// samarl, samarl-ppo, orca or random.
    #[arg(long, default_value = "orca")]
    policy: String,
    /// Model checkpoint, required by the learned policies.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

fn with_code(code: u8) -> impl FnOnce(Error) -> Failure {
    move |error| Failure { code, error }
}

fn load_run(common: &Common) -> Result<TrainRun, Failure> {
    match &common.config {
        Some(p) => TrainRun::load(p).map_err(with_code(EXIT_CONFIG)),
        None => Ok(TrainRun::default()),
    }
}

fn evaluator(run: &TrainRun, args: &PolicyArgs) -> Result<Evaluator, Failure> {
    let policy: EvalPolicy = args.policy.parse()?;
    let model = match &args.checkpoint {
        Some(p) => Some(Model::load(p).map_err(with_code(EXIT_CHECKPOINT))?),
        None => None,
    };
    Ok(Evaluator::new(
        policy,
        run.scenario.clone(),
        run.orca,
        model,
    )?)
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| {
            Failure::from(Error::Io {
                path: dir.into(),
                source: e,
            })
        }),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { common, out } => {
            let mut run = load_run(&common)?;
            if let Some(s) = common.seed {
                run.train.seed = s;
            }
            let outcome = train(&run, Some(&out), |s| {
                println!(
                    "update {:>4}  episodes {:>3}  reward {:>9.3}  success {:.3}  entropy {:.3}",
                    s.update, s.episodes, s.mean_episode_reward, s.success_rate, s.entropy
                );
            })?;
            println!(
                "trained {} episodes in {} updates{}; model written to {}",
                outcome.episodes_run,
                outcome.history.len(),
                if outcome.stopped_early {
                    " (early stop)"
                } else {
                    ""
                },
                out.join("model.json").display()
            );
        }
        Command::Eval {
            common,
            policy,
            cases,
            out,
        } => {
            let run = load_run(&common)?;
            let ev = evaluator(&run, &policy)?;
            let seeds = eval_seeds(common.seed.unwrap_or(run.scenario.seed), cases);
            let outcome = run_policy_eval(&ev, &seeds, Some(&out))?;
            print!(
                "{}",
                EvalReport::table(std::slice::from_ref(&outcome.report))
            );
            println!("logs and report written to {}", out.display());
        }
        Command::Rollout {
            common,
            policy,
            out,
        } => {
            let run = load_run(&common)?;
            let ev = evaluator(&run, &policy)?;
            let trace = ev.run_episode(common.seed.unwrap_or(run.scenario.seed))?;
            create_parent(&out)?;
            trace.write(&out)?;
            println!(
                "{:?} after {} steps; log written to {}",
                trace.status(),
                trace.steps.len(),
                out.display()
            );
        }
        Command::Plot { log, out } => {
            create_parent(&out)?;
            plot_episode(&log, &out).map_err(with_code(EXIT_CONFIG))?;
            println!("plot written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
