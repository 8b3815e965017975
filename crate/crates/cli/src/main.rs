use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restc::pipeline::{self, Dataset};
use restc::{RestcError, Result, Scheduler, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "restc", version, about = "Session-based next-item recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, split and augment a click log into a dataset directory.
    Preprocess {
        /// CSV of `session_id,item_id,timestamp` (seconds).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sessions ending within this many days of the last click form the test split.
        #[arg(long, default_value_t = 7)]
        test_window_days: i64,
    },
    /// Train a model; writes config.toml, train_log.csv, checkpoint.bin and summary.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ConfigOpts,
    },
    /// Score the test split with a checkpoint; writes metrics.csv and metrics.txt.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20])]
        cutoffs: Vec<usize>,
        /// Model configuration the checkpoint is expected to match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model per point of a grid such as `tau=0.1,0.5;eta1=0,0.01`.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: String,
        /// Configurations trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        opts: ConfigOpts,
    },
    /// Write session embeddings as CSV `label,dim_0,...`.
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
}

/// Training settings: built-in defaults, then `--config`, then these flags.
#[derive(Args, Debug, Default)]
struct ConfigOpts {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    mgat_layers: Option<usize>,
    #[arg(long)]
    cfg_layers: Option<usize>,
    #[arg(long)]
    sestrans_layers: Option<usize>,
    #[arg(long)]
    max_len_cap: Option<usize>,
    /// spatial_only | single_align | multi_align | self_multi_align | mixed_noise
    #[arg(long)]
    strategy: Option<String>,
    /// binary | categorical
    #[arg(long)]
    loss: Option<String>,
    /// constant | step:<every>:<gamma> | cosine:<t_max>:<lr_min>
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Recompute item-graph embeddings every k steps.
    #[arg(long)]
    cfg_refresh: Option<usize>,
    /// Put the positive pair in the contrastive denominator.
    #[arg(long)]
    standard_infonce: bool,
    #[arg(long)]
    no_cont: bool,
    #[arg(long)]
    no_cfg: bool,
    #[arg(long)]
    no_sestrans: bool,
    #[arg(long)]
    no_pe_g: bool,
    #[arg(long)]
    no_pe_s: bool,
    /// Any other `key=value` setting (dotted keys for nested tables).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_scheduler(text: &str) -> Result<Scheduler> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || RestcError::Config(format!("cannot parse scheduler `{text}`"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["constant"] => Ok(Scheduler::Constant),
        ["step", every, gamma] => Ok(Scheduler::Step { step: int(every)?, gamma: num(gamma)? }),
        ["cosine", t_max, lr_min] => Ok(Scheduler::Cosine { t_max: int(t_max)?, lr_min: num(lr_min)? }),
        _ => Err(bad()),
    }
}

impl ConfigOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| format!("{v:?}")));
        put("eta1", self.eta1.map(|v| format!("{v:?}")));
        put("eta2", self.eta2.map(|v| format!("{v:?}")));
        put("tau", self.tau.map(|v| format!("{v:?}")));
        put("heads", self.heads.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| format!("{v:?}")));
        put("mgat_layers", self.mgat_layers.map(|v| v.to_string()));
        put("cfg_layers", self.cfg_layers.map(|v| v.to_string()));
        put("sestrans_layers", self.sestrans_layers.map(|v| v.to_string()));
        put("max_len_cap", self.max_len_cap.map(|v| v.to_string()));
        put(
            "strategy",
            self.strategy
                .as_deref()
                .map(|s| s.parse::<restc::Strategy>().map(|st| format!("\"{st}\"")))
                .transpose()?,
        );
        put("loss", self.loss.clone());
        put("val_fraction", self.val_fraction.map(|v| format!("{v:?}")));
        put("patience", self.patience.map(|v| v.to_string()));
        put("cfg_refresh", self.cfg_refresh.map(|v| v.to_string()));
        for (flag, key) in [
            (self.standard_infonce, "standard_infonce"),
            (self.no_cont, "ablations.no_cont"),
            (self.no_cfg, "ablations.no_cfg"),
            (self.no_sestrans, "ablations.no_sestrans"),
            (self.no_pe_g, "ablations.no_pe_g"),
            (self.no_pe_s, "ablations.no_pe_s"),
        ] {
            put(key, flag.then(|| "true".to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| RestcError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in pairs {
            cfg = pipeline::apply_override(&cfg, &k, &v)?;
        }
        if let Some(s) = &self.scheduler {
            cfg.scheduler = parse_scheduler(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { input, out, test_window_days } => {
            let stats = pipeline::preprocess(&input, &out, test_window_days)?;
            print!("{}", stats.to_tsv());
        }
        Command::Train { data, out, opts } => {
            let cfg = opts.resolve()?;
            let ds = Dataset::load(&data)?;
            let res = pipeline::train(&ds, &cfg, Some(&out))?;
            println!(
                "epochs {}  val HR@20 {:.4}  MRR@20 {:.4}  popularity HR@20 {:.4}",
                res.logs.len(),
                res.val_hr20,
                res.val_mrr20,
                res.popularity_val_hr20
            );
        }
        Command::Evaluate { data, checkpoint, out, cutoffs, config } => {
            let expected = config.as_deref().map(TrainConfig::load).transpose()?;
            let ds = Dataset::load(&data)?;
            let trainer = pipeline::load_checkpoint(&ds, &checkpoint, expected.as_ref())?;
            let report = pipeline::evaluate(&ds, &trainer.model, &cutoffs, Some(&out))?;
            print!("{}", report.to_table());
        }
        Command::Sweep { data, out, grid, jobs, opts } => {
            let cfg = opts.resolve()?;
            let ds = Dataset::load(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| RestcError::io(&out, e))?;
            let rows = pipeline::sweep(&ds, &cfg, &grid, Some(&out), jobs)?;
            print!("{}", pipeline::sweep_csv(&rows));
        }
        Command::ExportEmbeddings { data, checkpoint, out, split } => {
            let ds = Dataset::load(&data)?;
            let trainer = pipeline::load_checkpoint(&ds, &checkpoint, None)?;
            let examples = if split == "train" { &ds.train } else { &ds.test };
            restc::eval::export_embeddings(&trainer.model, examples, &ds.vocab, &out)?;
            println!("{} embeddings written to {}", examples.len(), display(&out));
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
