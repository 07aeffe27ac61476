use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pairltr::bias::BiasParams;
use pairltr::config::{Normalizer, RunConfig};
use pairltr::em::run_em;
use pairltr::error::{Error, Result};
use pairltr::letor::{parse_letor, split_queries, Dataset};
use pairltr::metrics::evaluate;
use pairltr::mlp::{MlpSpec, Ranker};
use pairltr::pipeline::{
    compare_runs, format_comparison, run_experiment, BIAS_FILE, EM_TRACE_FILE, METRICS_FILE,
    MODEL_FILE, SESSIONS_FILE,
};
use pairltr::simulate::{read_sessions, simulate_dataset, write_sessions, Session};
use pairltr::train::train;

#[derive(Parser)]
#[command(name = "pairltr", version, about = "Unbiased pairwise learning-to-rank toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Config file in flat `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; derives the per-stage seeds deterministically.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set em.alpha0=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories to aggregate (at least two).
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "ndcg")]
    metric: String,
    #[arg(long, default_value_t = 5)]
    cutoff: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate click sessions for the train split.
    Simulate(StageArgs),
    /// Estimate bias parameters from sessions via EM.
    EmFit(StageArgs),
    /// Train a ranker on sessions with the configured loss.
    Train(StageArgs),
    /// Evaluate a trained checkpoint on the test split.
    Evaluate(StageArgs),
    /// Full pipeline: simulate, EM, train, evaluate.
    Run(StageArgs),
    /// Aggregate a metric across finished runs.
    Compare(CompareArgs),
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.apply_master_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::config("data.path is required"))?;
    let file = fs::File::open(path)?;
    let dataset = parse_letor(BufReader::new(file), None)?;
    let (mut tr, mut va, mut te) = split_queries(&dataset, cfg.split, cfg.split_seed)?;
    if cfg.normalize {
        let norm = Normalizer::fit(&tr)?;
        for split in [&mut tr, &mut va, &mut te] {
            norm.apply(split);
        }
    }
    Ok((tr, va, te))
}

/// Reuse a sessions artifact from a previous `simulate` in the same run
/// directory, otherwise simulate in memory.
fn load_or_simulate(cfg: &RunConfig, args: &StageArgs, train_set: &Dataset) -> Result<Vec<Session>> {
    let path = args.out.join(SESSIONS_FILE);
    if path.exists() {
        let file = fs::File::open(path)?;
        read_sessions(BufReader::new(file))
    } else {
        simulate_dataset(train_set, &cfg.sim, cfg.mode)
    }
}

fn cmd_simulate(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_set, _, _) = load_splits(&cfg)?;
    let sessions = simulate_dataset(&train_set, &cfg.sim, cfg.mode)?;
    fs::create_dir_all(&args.out)?;
    let mut buf = Vec::new();
    write_sessions(&sessions, &mut buf)?;
    fs::write(args.out.join(SESSIONS_FILE), buf)?;
    println!("wrote {} sessions to {}", sessions.len(), args.out.display());
    Ok(())
}

fn cmd_em_fit(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_set, _, _) = load_splits(&cfg)?;
    let sessions = load_or_simulate(&cfg, args, &train_set)?;
    let ranker = Ranker::init(MlpSpec::new(
        train_set.feature_dim,
        cfg.hidden.clone(),
        cfg.model_seed,
    ))?;
    let init = BiasParams::init_default(cfg.sim.list_size)?;
    let (params, _, trace) = run_em(&sessions, &train_set, &init, &ranker, &cfg.em, cfg.mode)?;
    fs::create_dir_all(&args.out)?;
    let mut buf = Vec::new();
    params.write_table(&mut buf)?;
    fs::write(args.out.join(BIAS_FILE), buf)?;
    let mut buf = Vec::new();
    trace.write(&mut buf)?;
    fs::write(args.out.join(EM_TRACE_FILE), buf)?;
    println!("wrote bias parameters to {}", args.out.display());
    Ok(())
}

fn cmd_train(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_set, valid_set, _) = load_splits(&cfg)?;
    let sessions = load_or_simulate(&cfg, args, &train_set)?;
    let bias_path = args.out.join(BIAS_FILE);
    let params = if bias_path.exists() {
        BiasParams::read_table(BufReader::new(fs::File::open(bias_path)?))?
    } else {
        BiasParams::init_default(cfg.sim.list_size)?
    };
    let ranker = Ranker::init(MlpSpec::new(
        train_set.feature_dim,
        cfg.hidden.clone(),
        cfg.model_seed,
    ))?;
    let (model, report) = train(
        &ranker,
        &sessions,
        &train_set,
        Some(&valid_set),
        &params,
        &cfg.train,
        cfg.mode,
    )?;
    fs::create_dir_all(&args.out)?;
    let mut buf = Vec::new();
    model.save(&mut buf)?;
    fs::write(args.out.join(MODEL_FILE), buf)?;
    println!(
        "trained {} epochs, best valid NDCG@{} = {:?}",
        report.epochs_run, cfg.train.eval_cutoff, report.best_valid_ndcg
    );
    Ok(())
}

fn cmd_evaluate(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (_, _, test_set) = load_splits(&cfg)?;
    let mut file = fs::File::open(args.out.join(MODEL_FILE))?;
    let model = Ranker::load(&mut file)?;
    let report = evaluate(&model, &test_set, &cfg.eval_cutoffs, cfg.mode)?;
    let mut buf = Vec::new();
    report.write(&mut buf)?;
    fs::write(args.out.join(METRICS_FILE), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn cmd_run(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let artifacts = run_experiment(&cfg, &args.out)?;
    let mut buf = Vec::new();
    artifacts.report.write(&mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let rows = compare_runs(&args.runs, &args.metric, args.cutoff)?;
    print!("{}", format_comparison(&rows, &args.metric, args.cutoff));
    Ok(())
}

/// 1 for configuration/validation problems, 2 for runtime failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::EmptyDataset
        | Error::DimMismatch { .. }
        | Error::Config(_) => 1,
        Error::Stage { source, .. } => exit_code(source),
        Error::NonFinite(_) | Error::ZeroProbability { .. } | Error::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::EmFit(args) => cmd_em_fit(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
