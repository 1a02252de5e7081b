use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mapnav::executor::PolicyKind;
use mapnav::harness::{
    long_histogram_eval, replay_episode, run_full_system, run_policy_eval, CheckpointStore, ExperimentConfig, HarnessError, Split, MAPPER, SYNTH,
    VIN,
};

#[derive(Parser, Debug)]
#[command(name = "mapnav", version, about = "Train and evaluate grid-world navigation agents")]
struct Cli {
    /// Experiment configuration (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and results.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write every train, validation and test map.
    GenMaps,
    /// Free-space mapper on the training maps.
    TrainMapper,
    /// Joint mapper and planner training, starting from a stored mapper if any.
    TrainPlanner,
    /// View encoder, fusion net and pair classifier.
    TrainSynth,
    /// Train policies (all configured kinds by default).
    TrainPolicy {
        #[arg(long, value_parser = parse_kind)]
        kind: Vec<PolicyKind>,
    },
    /// Policy evaluation on oracle plans.
    Eval {
        /// Also write the far-goal histogram.
        #[arg(long)]
        long: bool,
    },
    /// Mapper, planner and policy together from environment views.
    FullSystem,
    /// Re-run one evaluation episode and print its trajectory.
    Replay {
        #[arg(long)]
        method: String,
        #[arg(long)]
        episode: usize,
    },
}

fn parse_kind(s: &str) -> Result<PolicyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown policy {s:?} (expected ours, gru, action_only or nn_match)"))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli)?;
    let store = CheckpointStore::new(&cli.out);
    match cli.cmd {
        Cmd::GenMaps => {
            let n = store.write_maps(&cfg)?;
            println!("wrote {n} maps to {}", cli.out.join("maps").display());
        }
        Cmd::TrainMapper => store.train_mapper(&cfg)?,
        Cmd::TrainPlanner => store.train_planner(&cfg)?,
        Cmd::TrainSynth => store.train_synth(&cfg)?,
        Cmd::TrainPolicy { kind } => {
            store.require(&[SYNTH.to_string()])?;
            let kinds = if kind.is_empty() { cfg.policies.clone() } else { kind };
            for k in kinds {
                store.train_policy(&cfg, k)?;
            }
        }
        Cmd::Eval { long } => {
            let policies = store.policies(&cfg)?;
            let maps = cfg.maps.generate(Split::Test)?;
            let report = run_policy_eval(&cfg, &maps, &policies)?;
            for s in report.results.summaries()? {
                println!("{}", s.format_row());
            }
            store.write("summary.csv", &report.results.summary_csv()?)?;
            store.write("episodes.jsonl", &report.results.episodes_jsonl())?;
            store.write("histogram.csv", &report.results.histogram_csv(&cfg.histogram))?;
            if long || cfg.histogram.long_trajectory {
                let far = long_histogram_eval(&cfg, &maps, &policies)?;
                store.write("histogram_long.csv", &far.histogram_csv(&cfg.histogram))?;
            }
        }
        Cmd::FullSystem => {
            let ours = mapnav::harness::policy_checkpoint(PolicyKind::Ours);
            store.require(&[MAPPER.to_string(), VIN.to_string(), ours])?;
            let maps = cfg.maps.generate(Split::Test)?;
            let r = run_full_system(&cfg, &maps, &store.mapper(&cfg)?, &store.vin()?, &store.policy(&cfg, PolicyKind::Ours)?)?;
            for s in r.results.summaries()? {
                println!("{}", s.format_row());
            }
            println!("planning success {:.1}%", 100.0 * r.planning_success);
            store.write("full_system.csv", &r.results.summary_csv()?)?;
            store.write("full_system_episodes.jsonl", &r.results.episodes_jsonl())?;
            store.write("full_system_histogram.csv", &r.results.histogram_csv(&cfg.histogram))?;
        }
        Cmd::Replay { method, episode } => {
            let policies = store.policies(&cfg)?;
            let maps = cfg.maps.generate(Split::Test)?;
            let out = replay_episode(&cfg, &maps, &policies, &method, episode)?;
            println!("{}", serde_json::to_string(&out).map_err(|e| HarnessError::Io(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
