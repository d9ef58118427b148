use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use balpm_core::feature_store::{load_dataset, save_dataset, Format};
use balpm_core::harness::{
    compare_runs, default_label_source, history_stats, load_data, run_experiment, ExperimentConfig, LabelMode,
    RunOptions,
};
use balpm_core::label_service::{LabelQueue, ServiceLabelSource};
use balpm_core::model::{evaluate_ll, load_checkpoint};
use balpm_core::sim::{SimConfig, SimWorld};
use balpm_core::uncertainty::{score_pool, write_scores_csv};
use clap::{Args, Parser, Subcommand};

type AnyResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Parser)]
#[command(name = "balpm", version, about = "Batch active learning for preference models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect or convert feature datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Work with ensemble checkpoints.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Dump BALD, predictive and aleatoric scores of a pool as CSV.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic environment.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Run (or resume) an active-learning experiment.
    Run(RunArgs),
    /// Label efficiency of several runs against a reference policy.
    Compare {
        #[arg(long)]
        target_policy: String,
        /// Average each point with up to two preceding ones.
        #[arg(long)]
        smooth: bool,
        /// metrics.csv files; the policy comes from a config.json next to each.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Unique-prompt statistics of the acquired batches of a run directory.
    Stats {
        #[arg(long)]
        history: PathBuf,
    },
    /// Run an experiment whose labels come from the HTTP label service.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Parse and check a dataset, then print a summary.
    Validate {
        path: PathBuf,
        /// Defaults to the file extension (`.bin` binary, else ndjson).
        #[arg(long)]
        format: Option<Format>,
    },
    Convert {
        #[arg(long)]
        from: Format,
        #[arg(long)]
        to: Format,
        input: PathBuf,
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Mean test log-likelihood of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Write a pool (features only) and its hidden reward table.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hidden: PathBuf,
        /// JSON file with environment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_prompts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Id namespace; use different tags for pool, val and test sets.
        #[arg(long, default_value = "pool")]
        tag: String,
        /// Include oracle labels (for validation and test sets).
        #[arg(long)]
        labeled: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from the state saved in the run directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this round as if interrupted.
    #[arg(long)]
    stop_after_round: Option<usize>,
    /// Config overrides as `--dotted.key value` or `--dotted.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> AnyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| format!("expected --key, got {flag:?}"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(args: &RunArgs) -> AnyResult<ExperimentConfig> {
    Ok(ExperimentConfig::load(&args.config, &parse_overrides(&args.overrides)?)?)
}

fn output(path: Option<&Path>) -> AnyResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> AnyResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dataset(cmd: DatasetCmd) -> AnyResult<()> {
    match cmd {
        DatasetCmd::Validate { path, format } => {
            let ds = load_dataset(&path, format.unwrap_or_else(|| Format::from_path(&path)))?;
            print_json(&serde_json::json!({
                "path": path,
                "tuples": ds.len(),
                "unique_prompts": ds.unique_prompts().len(),
                "d_p": ds.d_p(),
                "d_c": ds.d_c(),
                "labeled": ds.is_labeled(),
            }))
        }
        DatasetCmd::Convert { from, to, input, output } => {
            let ds = load_dataset(&input, from)?;
            save_dataset(&ds, &output, to)?;
            eprintln!("wrote {} tuples to {}", ds.len(), output.display());
            Ok(())
        }
    }
}

fn sim_generate(
    out: &Path,
    hidden: &Path,
    config: Option<&Path>,
    n_prompts: Option<usize>,
    seed: Option<u64>,
    tag: &str,
    labeled: bool,
) -> AnyResult<()> {
    let mut cfg: SimConfig = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SimConfig::default(),
    };
    if let Some(n) = n_prompts {
        cfg.n_prompts = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let world = SimWorld::new(cfg)?;
    let n = world.config().n_prompts;
    let (ds, rewards) = if labeled { world.generate_labeled(tag, n)? } else { world.generate(tag, n)? };
    save_dataset(&ds, out, Format::from_path(out))?;
    let mut w = BufWriter::new(File::create(hidden)?);
    rewards.write_csv(&mut w)?;
    w.flush()?;
    eprintln!("wrote {} tuples to {} and rewards to {}", ds.len(), out.display(), hidden.display());
    Ok(())
}

fn run(args: &RunArgs) -> AnyResult<()> {
    let cfg = load_config(args)?;
    if cfg.label_mode() == LabelMode::Service {
        return Err("this config takes labels from the label service; use `balpm serve`".into());
    }
    let data = load_data(&cfg)?;
    let mut source = default_label_source(&cfg, &data)?;
    let opts = RunOptions { resume: args.resume, stop_after_round: args.stop_after_round };
    let summary = run_experiment(&cfg, &data, source.as_mut(), &opts)?;
    print_json(&summary)
}

fn serve(args: &RunArgs, host: &str, port: u16) -> AnyResult<()> {
    let mut cfg = load_config(args)?;
    cfg.labels = LabelMode::Service;
    cfg.validate()?;
    let queue_dir = cfg.resolved_output_dir().join("queue");
    let queue = Arc::new(LabelQueue::open(&queue_dir, Duration::from_secs(cfg.service.lease_ttl_s))?);
    let router = balpm_service::router(queue.clone(), cfg.service.token.clone());

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind((host, port)))?;
    eprintln!("label service on http://{}", listener.local_addr()?);
    let server = rt.spawn(balpm_service::serve(listener, router, std::future::pending()));

    let data = load_data(&cfg)?;
    let mut source = ServiceLabelSource::new(queue, data.texts.clone(), Duration::from_secs(cfg.service.round_timeout_s));
    let opts = RunOptions { resume: args.resume, stop_after_round: args.stop_after_round };
    let summary = run_experiment(&cfg, &data, &mut source, &opts)?;
    print_json(&summary)?;
    eprintln!("experiment finished; still serving status (Ctrl-C to stop)");
    rt.block_on(server)??;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("BALPM_LOG").unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result: AnyResult<()> = match cli.cmd {
        Cmd::Dataset(cmd) => dataset(cmd),
        Cmd::Model(ModelCmd::Eval { ckpt, test }) => (|| {
            let ens = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&test, Format::from_path(&test))?;
            print_json(&serde_json::json!({ "tuples": ds.len(), "test_mean_ll": evaluate_ll(&ens, &ds)? }))
        })(),
        Cmd::Score { ckpt, pool, out } => (|| {
            let ens = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&pool, Format::from_path(&pool))?;
            let scores = score_pool(&ens, ds.tuples())?;
            let mut w = output(out.as_deref())?;
            write_scores_csv(&scores, &mut w)?;
            w.flush()?;
            Ok(())
        })(),
        Cmd::Sim(SimCmd::Generate { out, hidden, config, n_prompts, seed, tag, labeled }) => {
            sim_generate(&out, &hidden, config.as_deref(), n_prompts, seed, &tag, labeled)
        }
        Cmd::Run(args) => run(&args),
        Cmd::Compare { target_policy, smooth, files } => (|| {
            let report = compare_runs(&files, &target_policy, smooth)?;
            print_json(&report)
        })(),
        Cmd::Stats { history } => (|| {
            let s = history_stats(&history)?;
            let mut w = output(None)?;
            writeln!(w, "round,unique_prompt_ratio_batch,unique_prompt_ratio_cumulative,unique_prompts")?;
            for i in 0..s.per_batch.len() {
                writeln!(w, "{i},{},{},{}", s.per_batch[i], s.cumulative[i], s.unique_total[i])?;
            }
            w.flush()?;
            Ok(())
        })(),
        Cmd::Serve { run, port, host } => serve(&run, &host, port),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

