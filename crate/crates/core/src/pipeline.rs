//! End-to-end commands: preprocess, train, evaluate, sweep, export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataio::{self, AugmentedExample, RawEvent, SplitDataset, Vocab};
use crate::error::{RestcError, Result};
use crate::eval::{self, MetricReport};
use crate::graphs::Cfg;
use crate::model::Restc;
use crate::trainer::{validation_split, EpochLog, Trainer};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const TRAIN_FILE: &str = "train.examples";
pub const TEST_FILE: &str = "test.examples";
pub const CFG_FILE: &str = "cfg.tsv";
pub const STATS_FILE: &str = "stats.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub items: usize,
    pub clicks: usize,
    pub train: usize,
    pub test: usize,
    pub avg_len: f64,
}

impl Stats {
    pub fn to_tsv(&self) -> String {
        format!(
            "items\tclicks\ttrain\ttest\tavg.len\n{}\t{}\t{}\t{}\t{:.4}\n",
            self.items, self.clicks, self.train, self.test, self.avg_len
        )
    }
}

/// A preprocessed dataset: vocabulary, augmented examples, and the item graph.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<AugmentedExample>,
    pub test: Vec<AugmentedExample>,
    pub cfg: Cfg,
}

impl Dataset {
    pub fn from_split(split: &SplitDataset) -> Result<Self> {
        Ok(Dataset {
            vocab: split.vocab.clone(),
            train: dataio::augment_all(&split.train)?,
            test: dataio::augment_all(&split.test)?,
            cfg: Cfg::build(&split.train, split.vocab.len())?,
        })
    }

    pub fn from_events(events: &[RawEvent], test_window_days: i64) -> Result<(Self, Stats)> {
        let split = dataio::filter_and_split(events, test_window_days)?;
        let ds = Self::from_split(&split)?;
        let prefix_total: usize = ds.train.iter().chain(&ds.test).map(|e| e.prefix.len()).sum();
        let n_examples = ds.train.len() + ds.test.len();
        let stats = Stats {
            items: ds.vocab.len(),
            clicks: split.clicks(),
            train: ds.train.len(),
            test: ds.test.len(),
            avg_len: prefix_total as f64 / n_examples as f64,
        };
        Ok((ds, stats))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RestcError::io(dir, e))?;
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        dataio::write_examples(&dir.join(TRAIN_FILE), &self.train)?;
        dataio::write_examples(&dir.join(TEST_FILE), &self.test)?;
        self.cfg.write(&dir.join(CFG_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(RestcError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let vocab = Vocab::read(&dir.join(VOCAB_FILE))?;
        let cfg = Cfg::read(&dir.join(CFG_FILE))?;
        if cfg.n != vocab.len() {
            return Err(RestcError::Format {
                path: dir.join(CFG_FILE),
                message: format!("graph covers {} items but the vocabulary has {}", cfg.n, vocab.len()),
            });
        }
        let ds = Dataset {
            train: dataio::read_examples(&dir.join(TRAIN_FILE))?,
            test: dataio::read_examples(&dir.join(TEST_FILE))?,
            vocab,
            cfg,
        };
        let n = ds.vocab.len();
        for (file, set) in [(TRAIN_FILE, &ds.train), (TEST_FILE, &ds.test)] {
            if let Some(bad) = set.iter().find(|e| e.target == 0 || e.target > n || e.prefix.iter().any(|&i| i == 0 || i > n)) {
                return Err(RestcError::Format {
                    path: dir.join(file),
                    message: format!("item index outside 1..={n} in example with target {}", bad.target),
                });
            }
        }
        if ds.train.is_empty() {
            return Err(RestcError::EmptyDataset(format!("{} has no training examples", dir.display())));
        }
        Ok(ds)
    }

    pub fn max_len(&self, cap: usize) -> usize {
        dataio::max_prefix_len(&self.train, cap)
    }

    pub fn build_model(&self, config: &TrainConfig) -> Result<Restc> {
        Restc::new(
            config.clone(),
            self.vocab.len(),
            self.max_len(config.max_len_cap),
            self.cfg.propagation_matrix()?,
        )
    }
}

pub fn preprocess(input: &Path, out_dir: &Path, test_window_days: i64) -> Result<Stats> {
    let log = dataio::parse_sessions(input)?;
    let (ds, stats) = Dataset::from_events(&log.events, test_window_days).map_err(|e| match e {
        RestcError::EmptyDataset(m) => RestcError::EmptyDataset(format!(
            "{m} (input {}; items need at least {} clicks and sessions at least 2 items; try a smaller test window)",
            input.display(),
            dataio::MIN_ITEM_OCCURRENCES
        )),
        other => other,
    })?;
    ds.write(out_dir)?;
    let path = out_dir.join(STATS_FILE);
    fs::write(&path, stats.to_tsv()).map_err(|e| RestcError::io(&path, e))?;
    Ok(stats)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub logs: Vec<EpochLog>,
    pub val_hr20: f64,
    pub val_mrr20: f64,
    pub popularity_val_hr20: f64,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RestcError::io(path, e))
}

/// Trains on the dataset's training examples minus a seeded validation
/// share. With `out_dir`, writes the resolved config, the per-epoch log, and
/// a checkpoint of the kept parameters.
pub fn train(ds: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let (train, val) = validation_split(&ds.train, config.val_fraction, config.seed);
    let mut trainer = Trainer::new(ds.build_model(config)?);
    let mut log_text = format!("{}\n", EpochLog::HEADER);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| RestcError::io(dir, e))?;
        write_file(&dir.join(RESOLVED_CONFIG_FILE), &config.to_toml())?;
    }
    let logs = trainer.fit(&train, &val, |row, _| {
        log_text.push_str(&row.csv_row());
        log_text.push('\n');
        if let Some(dir) = out_dir {
            write_file(&dir.join(LOG_FILE), &log_text)?;
        }
        Ok(())
    })?;
    let (val_hr20, val_mrr20, popularity_val_hr20) = if val.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let ranks = eval::rank_examples(&trainer.model, &val)?;
        let pop = eval::popularity_ranks(&train, &val, ds.vocab.len())?;
        (eval::hit_rate(&ranks, 20), eval::mrr(&ranks, 20), eval::hit_rate(&pop, 20))
    };
    log::info!("validation HR@20 {val_hr20:.4} (popularity baseline {popularity_val_hr20:.4})");
    if let Some(dir) = out_dir {
        checkpoint::save(&trainer, &dir.join(CHECKPOINT_FILE))?;
        write_file(
            &dir.join("summary.csv"),
            &format!("val_hr20,val_mrr20,popularity_val_hr20\n{val_hr20},{val_mrr20},{popularity_val_hr20}\n"),
        )?;
    }
    Ok(TrainOutcome { trainer, logs, val_hr20, val_mrr20, popularity_val_hr20 })
}

pub fn load_checkpoint(ds: &Dataset, path: &Path, expected: Option<&TrainConfig>) -> Result<Trainer> {
    let trainer = checkpoint::load(path, ds.cfg.propagation_matrix()?)?;
    if let Some(cfg) = expected {
        if cfg.architecture_hash() != trainer.model.config.architecture_hash() {
            return Err(RestcError::Checkpoint(format!(
                "{} was trained with a different model configuration than the one supplied",
                path.display()
            )));
        }
    }
    Ok(trainer)
}

/// Test-split report for a trained model; also writes `metrics.csv` and
/// `metrics.txt` (plus the popularity baseline) under `out_dir`.
pub fn evaluate(ds: &Dataset, model: &Restc, cutoffs: &[usize], out_dir: Option<&Path>) -> Result<MetricReport> {
    if ds.test.is_empty() {
        return Err(RestcError::EmptyDataset("the test split is empty".into()));
    }
    let ranks = eval::rank_examples(model, &ds.test)?;
    let report = eval::compute_metrics(&ranks, cutoffs)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| RestcError::io(dir, e))?;
        write_file(&dir.join("metrics.csv"), &report.to_csv())?;
        write_file(&dir.join("metrics.txt"), &report.to_table())?;
        let pop = eval::compute_metrics(&eval::popularity_ranks(&ds.train, &ds.test, ds.vocab.len())?, cutoffs)?;
        write_file(&dir.join("popularity.csv"), &pop.to_csv())?;
    }
    Ok(report)
}

/// Sets `key` (dotted for nested tables, e.g. `ablations.no_cfg`) from a
/// TOML literal, or a bare string when the literal does not parse.
pub fn apply_override(config: &TrainConfig, key: &str, value: &str) -> Result<TrainConfig> {
    let mut table: toml::Table = toml::from_str(&config.to_toml()).expect("config round-trips");
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| RestcError::Config(format!("empty key in `{key}`")))?;
    let mut slot = &mut table;
    for p in parts {
        slot = slot
            .get_mut(p)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| RestcError::Config(format!("unknown configuration section `{p}`")))?;
    }
    if !slot.contains_key(last) {
        return Err(RestcError::Config(format!("unknown configuration key `{key}`")));
    }
    slot.insert(last.to_string(), parsed);
    TrainConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
        .map_err(|e| RestcError::Config(format!("`{key} = {value}`: {e}")))
}

/// `key=v1,v2;key2=v3` → the cartesian product of assignments.
pub fn parse_grid(spec: &str) -> Result<Vec<Vec<(String, String)>>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    let mut any = false;
    for axis in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| RestcError::Config(format!("grid axis `{axis}` is not `key=v1,v2`")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(RestcError::Config(format!("grid axis `{key}` has no values")));
        }
        any = true;
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.trim().to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    if !any {
        return Err(RestcError::Config("empty sweep grid".into()));
    }
    Ok(combos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub assignment: Vec<(String, String)>,
    pub config: TrainConfig,
    pub val_hr20: f64,
    pub val_mrr20: f64,
}

/// Trains one model per grid point; writes `sweep.csv` (and each run's
/// artifacts under `run_<k>/`) when `out_dir` is given. `jobs > 1` trains
/// that many configurations at once; results do not depend on it.
pub fn sweep(ds: &Dataset, base: &TrainConfig, grid: &str, out_dir: Option<&Path>, jobs: usize) -> Result<Vec<SweepRow>> {
    let combos = parse_grid(grid)?;
    let configs = combos
        .iter()
        .map(|c| c.iter().try_fold(base.clone(), |cfg, (k, v)| apply_override(&cfg, k, v)))
        .collect::<Result<Vec<_>>>()?;
    let run = |k: usize, assignment: Vec<(String, String)>, config: TrainConfig| -> Result<SweepRow> {
        log::info!("sweep run {k}: {assignment:?}");
        let run_dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("run_{k}")));
        let outcome = train(ds, &config, run_dir.as_deref())?;
        Ok(SweepRow {
            assignment,
            config,
            val_hr20: outcome.val_hr20,
            val_mrr20: outcome.val_mrr20,
        })
    };
    let work: Vec<_> = combos.into_iter().zip(configs).enumerate().collect();
    let rows = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| RestcError::Config(format!("cannot start {jobs} sweep workers: {e}")))?;
        pool.install(|| work.into_par_iter().map(|(k, (a, c))| run(k, a, c)).collect::<Result<Vec<_>>>())?
    } else {
        work.into_iter().map(|(k, (a, c))| run(k, a, c)).collect::<Result<Vec<_>>>()?
    };
    if let Some(dir) = out_dir {
        write_file(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let keys: Vec<&str> = rows
        .first()
        .map(|r| r.assignment.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut out = String::from("run");
    for k in &keys {
        let _ = write!(out, ",{k}");
    }
    out.push_str(",seed,val_hr20,val_mrr20\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(out, "{i}");
        for (_, v) in &r.assignment {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{},{}", r.config.seed, r.val_hr20, r.val_mrr20);
    }
    out
}
