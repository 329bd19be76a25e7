use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lemsim_core::artifacts::{self, RunManifest, SUMMARY_FILE};
use lemsim_core::cem::{cem_train, CemConfig, Checkpoint};
use lemsim_core::config::sha256_hex;
use lemsim_core::network::{read_trades, TradeNetwork};
use lemsim_core::policies::{GreedyPolicy, LinearTeam, Policy, ZiPolicy};
use lemsim_core::runner::{run_episode, EpisodeRecord};
use lemsim_core::{AgentId, Error, MarketEnv, Scenario};

#[derive(Parser)]
#[command(name = "lemsim", version, about = "Local energy market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes with a scripted or trained policy and write artifacts.
    Run(RunArgs),
    /// Train a linear policy with the cross-entropy method.
    Train(TrainArgs),
    /// Build the seller→buyer trading network from a trade log.
    Network(NetworkArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario config (TOML). The built-in 8-agent case is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// `zi`, `greedy`, or a path to a checkpoint written by `train`.
    #[arg(long, default_value = "zi")]
    policy: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 32)]
    population: usize,
    #[arg(long, default_value_t = 0.25)]
    elite_fraction: f64,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    init_std: f64,
    #[arg(long, default_value_t = 0.0)]
    extra_noise: f64,
    /// Episode seeds each candidate is scored on; defaults to the run seed.
    #[arg(long, value_delimiter = ',')]
    eval_seeds: Vec<u64>,
    #[arg(long)]
    no_elitism: bool,
    /// One policy per agent instead of a shared one.
    #[arg(long)]
    per_agent: bool,
    /// Optimize one agent's return instead of the fleet mean.
    #[arg(long)]
    fitness_agent: Option<String>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct NetworkArgs {
    /// Trade log (JSON lines).
    #[arg(long)]
    trades: PathBuf,
    /// DOT output; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Drop trades with the DSO.
    #[arg(long)]
    p2p_only: bool,
}

fn load_scenario(config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<(Scenario, String)> {
    let (mut scenario, origin) = match config {
        Some(p) => (Scenario::load(p)?, p.display().to_string()),
        None => (Scenario::default_case(), "<built-in>".to_string()),
    };
    if let Some(s) = seed {
        scenario.episode.seed = s;
    }
    Ok((scenario, origin))
}

fn thread_pool(n: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .context("cannot start worker threads")
}

enum PolicySpec {
    Zi,
    Greedy,
    Linear(LinearTeam, String),
}

impl PolicySpec {
    fn parse(spec: &str, scenario: &Scenario) -> anyhow::Result<Self> {
        match spec {
            "zi" => Ok(PolicySpec::Zi),
            "greedy" => Ok(PolicySpec::Greedy),
            path => {
                let path = Path::new(path);
                let ck = Checkpoint::load(path)?;
                let team = ck.policy()?;
                if !team.is_shared() && team.members.len() != scenario.fleet.len() {
                    return Err(Error::Data {
                        file: path.to_path_buf(),
                        message: format!(
                            "checkpoint holds {} policies for {} agents",
                            team.members.len(),
                            scenario.fleet.len()
                        ),
                    }
                    .into());
                }
                if ck.config_hash != scenario.config_hash {
                    log::warn!("checkpoint was trained on a different config ({})", ck.config_hash);
                }
                let bytes = std::fs::read(path)?;
                let label = format!("checkpoint:{}#sha256={}", path.display(), sha256_hex(&bytes));
                Ok(PolicySpec::Linear(team, label))
            }
        }
    }

    fn build(&self, scenario: &Scenario, seed: u64) -> Box<dyn Policy> {
        match self {
            PolicySpec::Zi => Box::new(ZiPolicy::new(seed)),
            PolicySpec::Greedy => Box::new(GreedyPolicy::for_penalty(
                scenario.episode.limits(),
                scenario.reward.penalty.dso_coeff,
            )),
            PolicySpec::Linear(team, _) => Box::new(team.clone()),
        }
    }

    fn label(&self) -> String {
        match self {
            PolicySpec::Zi => "zi".into(),
            PolicySpec::Greedy => "greedy".into(),
            PolicySpec::Linear(_, label) => label.clone(),
        }
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let (scenario, origin) = load_scenario(args.common.config.as_deref(), args.common.seed)?;
    if args.episodes == 0 {
        bail!(Error::Config {
            path: "--episodes".into(),
            message: "must be at least 1".into()
        });
    }
    let policy = PolicySpec::parse(&args.policy, &scenario)?;
    let scenario = Arc::new(scenario);
    let seed = scenario.episode.seed;
    let seeds: Vec<u64> = (0..args.episodes as u64).map(|i| seed.wrapping_add(i)).collect();
    let out = args.common.out;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;

    let started = Instant::now();
    let pool = thread_pool(args.common.parallel)?;
    let results: Vec<anyhow::Result<(EpisodeRecord, Vec<String>)>> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut env = MarketEnv::new(Arc::clone(&scenario));
                let mut p = policy.build(&scenario, s);
                let record = run_episode(&mut env, s, p.as_mut())?;
                let name = format!("episode_{i:03}");
                let files = artifacts::write_episode(&out.join(&name), &record)?;
                log::info!("episode {i} (seed {s}): mean reward {:.4}", record.mean_return());
                Ok((record, files.into_iter().map(|f| format!("{name}/{f}")).collect()))
            })
            .collect()
    });
    let mut episodes = Vec::with_capacity(results.len());
    let mut paths = Vec::new();
    for r in results {
        let (record, files) = r?;
        episodes.push(record);
        paths.extend(files);
    }

    let summary = artifacts::summarize(&episodes);
    artifacts::write_summary(&out.join(SUMMARY_FILE), &summary)?;
    paths.push(SUMMARY_FILE.to_string());
    paths.push(artifacts::MANIFEST_FILE.to_string());
    RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: origin,
        config_hash: scenario.config_hash.clone(),
        data_hash: scenario.data_hash.clone(),
        seed,
        episode_seeds: seeds,
        policy: policy.label(),
        artifacts: paths,
    }
    .write(&out)?;

    let reward = summary.iter().find(|(n, _)| n == "episode_reward").map(|(_, s)| s.mean);
    println!(
        "{} episode(s) with {} in {:.2?}; mean reward {:.4}; artifacts in {}",
        episodes.len(),
        policy.label(),
        started.elapsed(),
        reward.unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let (scenario, origin) = load_scenario(args.common.config.as_deref(), args.common.seed)?;
    let seed = scenario.episode.seed;
    let cfg = CemConfig {
        population: args.population,
        elite_fraction: args.elite_fraction,
        iterations: args.iterations,
        init_std: args.init_std,
        extra_noise: args.extra_noise,
        seed,
        eval_seeds: if args.eval_seeds.is_empty() {
            vec![seed]
        } else {
            args.eval_seeds
        },
        elitism: !args.no_elitism,
        shared: !args.per_agent,
        fitness_agent: args.fitness_agent.map(AgentId::new),
    };
    cfg.validate()?;
    let resume = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != scenario.config_hash {
                log::warn!("resuming from a checkpoint trained on a different config");
            }
            Some(ck.state)
        }
        None => None,
    };
    let out = args.common.out;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let scenario = Arc::new(scenario);
    let started = Instant::now();
    let result = thread_pool(args.common.parallel)?.install(|| cem_train(Arc::clone(&scenario), &cfg, resume))?;

    let checkpoint = out.join("checkpoint.json");
    Checkpoint::from_result(&result, &cfg, &scenario.config_hash).save(&checkpoint)?;
    let mut curve = String::from("iteration,population_mean,elite_mean,best\n");
    for p in result.curve() {
        curve.push_str(&format!(
            "{},{},{},{}\n",
            p.iteration, p.population_mean, p.elite_mean, p.best
        ));
    }
    std::fs::write(out.join("curve.csv"), curve)?;
    RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: origin,
        config_hash: scenario.config_hash.clone(),
        data_hash: scenario.data_hash.clone(),
        seed,
        episode_seeds: cfg.eval_seeds.clone(),
        policy: "cem-linear".into(),
        artifacts: vec!["checkpoint.json".into(), "curve.csv".into(), artifacts::MANIFEST_FILE.into()],
    }
    .write(&out)?;
    println!(
        "trained {} iteration(s) in {:.2?}; best mean reward {:.4}; checkpoint {}",
        result.state.iteration,
        started.elapsed(),
        result.best_fitness,
        checkpoint.display()
    );
    Ok(())
}

fn cmd_network(args: NetworkArgs) -> anyhow::Result<()> {
    let trades = read_trades(&args.trades)?;
    let net = TradeNetwork::from_trades(&trades, args.p2p_only);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, net.to_dot())?;
    let json = args.out.with_extension("json");
    std::fs::write(&json, net.to_json())?;
    println!(
        "{} node(s), {} edge(s), {:.3} kWh -> {} and {}",
        net.nodes.len(),
        net.edges.len(),
        net.total_weight(),
        args.out.display(),
        json.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::Data { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEM_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Train(a) => cmd_train(a),
        Command::Network(a) => cmd_network(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
