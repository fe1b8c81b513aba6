use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use platoon_core::episode::Policy;
use platoon_core::verify::{conformance_suite, gradient_suite, mixing_suite, SuiteReport};
use platoon_sim::compare::{compare_policies, DEFAULT_RESAMPLES};
use platoon_sim::config::Config;
use platoon_sim::experiment::{run_experiment, ExperimentSpec, ResultsTable};
use platoon_sim::training::{return_windows, run_training};
use platoon_sim::Result;

#[derive(Parser)]
#[command(name = "platoon", version, about = "Mixed-traffic platooning simulator and CNN-QMIX trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rule-based policy over penetration rates and seeds.
    Simulate(SweepArgs),
    /// Evaluate a trained checkpoint over penetration rates and seeds.
    Evaluate(SweepArgs),
    /// Train CNN-QMIX (or the flat variant) and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Bootstrap comparison of result directories written by simulate/evaluate.
    Compare {
        #[arg(required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient and mixing-monotonicity checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
    },
    /// Planner, MPC and car-following conformance checks.
    Conformance {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    policy: Policy,
    /// Comma-separated penetration rates.
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.375,0.5")]
    mpr: Vec<f64>,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Episode cap in seconds.
    #[arg(long)]
    episode_length: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SweepArgs {
    fn spec(self) -> Result<ExperimentSpec> {
        let config = Config::load_or_default(self.config.as_deref())?;
        let mut spec =
            ExperimentSpec::new(self.policy, self.mpr, (self.first_seed..self.first_seed + self.seeds).collect(), config);
        spec.episode_length = self.episode_length;
        spec.checkpoint = self.checkpoint;
        spec.out = self.out;
        Ok(spec)
    }
}

fn print_table(t: &ResultsTable) {
    println!("{:<11} {:>6} {:>5} {:>14} {:>8} {:>8} {:>9} {:>6}", "policy", "mpr", "eps", "platoon_rate", "max_len", "lc/veh", "speed", "coll");
    for a in &t.aggregates {
        println!(
            "{:<11} {:>6.3} {:>5} {:>7.3}±{:<6.3} {:>8.2} {:>8.2} {:>9.2} {:>6}",
            a.policy.name(),
            a.mpr,
            a.episodes,
            a.platoon_rate_mean,
            a.platoon_rate_std,
            a.max_platoon_length_mean,
            a.lane_changes_per_vehicle_mean,
            a.mean_speed_mean,
            a.collision_episodes
        );
    }
}

fn print_suite(r: &SuiteReport) -> bool {
    for c in &r.checks {
        println!("{} {:<40} {:.3e} (tol {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    r.passed()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(args) => {
            if args.policy.is_learned() && args.checkpoint.is_none() {
                return Err(platoon_sim::Error::Spec(format!("{} needs --checkpoint (see `platoon evaluate`)", args.policy)));
            }
            print_table(&run_experiment(&args.spec()?)?);
        }
        Command::Evaluate(args) => {
            if !args.policy.is_learned() {
                return Err(platoon_sim::Error::Spec(format!("{} is rule-based; use `platoon simulate`", args.policy)));
            }
            print_table(&run_experiment(&args.spec()?)?);
        }
        Command::Train { config, out, episodes } => {
            let mut cfg = Config::load_or_default(config.as_deref())?;
            if let Some(n) = episodes {
                cfg.train.episodes = n;
            }
            let run = run_training(&cfg, Some(&out))?;
            println!("{} episodes, {} updates, checkpoints in {}", run.outcome.log.len(), run.outcome.updates, out.display());
            if let Some((lead, trail)) = return_windows(&run.outcome.log, 0.1) {
                println!("mean return: first 10% {lead:.3}, last 10% {trail:.3}");
            }
        }
        Command::Compare { results, seed } => {
            let tables = results
                .iter()
                .map(|p| ResultsTable::read_json(&if p.is_dir() { p.join("results.json") } else { p.clone() }))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare_policies(&tables, DEFAULT_RESAMPLES, seed)?;
            for m in &cmp.mprs {
                println!("mpr {:.3}", m.mpr);
                for i in &m.intervals {
                    let iv = i.interval;
                    println!("  {:<11} {:.3} [{:.3}, {:.3}]", i.policy.name(), iv.mean, iv.low, iv.high);
                }
                for p in &m.pairs {
                    println!("  {} vs {}: {:?}", p.a, p.b, p.verdict);
                }
                if let Some(ok) = m.reference_order {
                    println!("  reference ordering holds: {ok}");
                }
            }
        }
        Command::Gradcheck { seed, draws } => {
            let g = print_suite(&gradient_suite(seed)?);
            let m = print_suite(&mixing_suite(draws, seed)?);
            return Ok(g && m);
        }
        Command::Conformance { seed } => return Ok(print_suite(&conformance_suite(seed)?)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
