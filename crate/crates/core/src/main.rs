use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use mgcn::cli::{self, RunConfig, SweepAxis};
use mgcn::dataset::SynthSpec;
use mgcn::eval::Phase;
use mgcn::{Error, Result};

#[derive(Parser)]
#[command(name = "mgcn", version, about = "Multimodal graph recommender: prepare data, train, evaluate, recommend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. --set knn_k=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split interactions and build (or reuse) the cached graphs
    Prepare(RunArgs),
    /// Train a model and write the best checkpoint, history and reports
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation or test split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        phase: String,
        /// Comma-separated cutoffs, e.g. 10,20,50
        #[arg(long, value_delimiter = ',')]
        cutoffs: Vec<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Top-N recommendations for one user
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(short = 'n', long, default_value_t = 20)]
        n: usize,
    },
    /// Train once per value of a hyperparameter
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// knn_k or lambda_c
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Generate a synthetic dataset with a matching config.json
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        edges_per_user: Option<usize>,
    },
    /// Export node embeddings from a checkpoint
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// id | modality | multimodal | final
        #[arg(long, default_value = "final")]
        which: String,
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => {
            let cfg = args.resolve()?;
            let p = cli::cmd_prepare(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "n_users": p.split.n_users(),
                "n_items": p.split.n_items(),
                "train": p.split.train_edges.len(),
                "val": p.split.val_edges.len(),
                "test": p.split.test_edges.len(),
                "cache": p.cache,
            }))?);
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = cli::cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s.test_report)?);
        }
        Command::Evaluate {
            checkpoint,
            phase,
            cutoffs,
            overrides,
        } => {
            let phase = match phase.as_str() {
                "val" => Phase::Val,
                "test" => Phase::Test,
                other => return Err(Error::Config(format!("unknown phase `{other}` (val | test)"))),
            };
            let mut overrides = overrides;
            if !cutoffs.is_empty() {
                overrides.push(format!("cutoffs={}", serde_json::to_string(&cutoffs)?));
            }
            let report = cli::cmd_evaluate(&checkpoint, &overrides, phase)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Recommend { checkpoint, user, n } => {
            for r in cli::cmd_recommend(&checkpoint, &user, n)? {
                println!("{}\t{:.6}", r.item, r.score);
            }
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.resolve()?;
            let axis = SweepAxis::parse(&axis)?;
            let rows = cli::cmd_sweep(&cfg, axis, &values)?;
            print!("{}", cli::sweep_table(axis, &cfg.cutoffs, &rows));
        }
        Command::Synth {
            out,
            seed,
            users,
            items,
            edges_per_user,
        } => {
            let mut spec = SynthSpec::default();
            spec.n_users = users.unwrap_or(spec.n_users);
            spec.n_items = items.unwrap_or(spec.n_items);
            spec.edges_per_user = edges_per_user.unwrap_or(spec.edges_per_user);
            cli::cmd_synth(&spec, seed, &out)?;
            println!("{}", out.join("config.json").display());
        }
        Command::ExportEmbeddings {
            checkpoint,
            which,
            modality,
            out,
        } => {
            let (rows, cols) = cli::cmd_export_embeddings(&checkpoint, &which, modality.as_deref(), &out)?;
            println!("{rows} x {cols} -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
