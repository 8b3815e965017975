mod common;

use std::fs;

use restc::dataio;
use restc::eval::LengthGroup;
use restc::pipeline::{self, Dataset};
use restc::synthetic::MarkovSpec;
use restc::{RestcError, TrainConfig};

fn write_log(dir: &std::path::Path, spec: &MarkovSpec) -> std::path::PathBuf {
    let path = dir.join("clicks.csv");
    fs::write(&path, MarkovSpec::to_csv(&spec.generate())).unwrap();
    path
}

#[test]
fn preprocess_outputs_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = MarkovSpec { items: 15, sessions: 120, seed: 9, ..MarkovSpec::default() };
    let input = write_log(tmp.path(), &spec);
    let out = tmp.path().join("ds");
    let stats = pipeline::preprocess(&input, &out, 7).unwrap();

    let split = dataio::filter_and_split(&spec.generate(), 7).unwrap();
    let sessions: Vec<usize> = split.train.iter().chain(&split.test).map(|s| s.items.len()).collect();
    let prefix_sum: usize = sessions.iter().map(|m| m * (m - 1) / 2).sum();
    let count: usize = sessions.iter().map(|m| m - 1).sum();
    assert!((stats.avg_len - prefix_sum as f64 / count as f64).abs() < 1e-12);
    assert_eq!(stats.clicks, sessions.iter().sum::<usize>());
    assert_eq!(stats.items, 15);
    assert_eq!(stats.train + stats.test, count);

    let text = fs::read_to_string(out.join("stats.tsv")).unwrap();
    assert!(text.starts_with("items\tclicks\ttrain\ttest\tavg.len\n"));

    let again = tmp.path().join("ds2");
    pipeline::preprocess(&input, &again, 7).unwrap();
    for f in ["vocab.tsv", "train.examples", "test.examples", "cfg.tsv", "stats.tsv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.train.len(), stats.train);
    assert_eq!(ds.test.len(), stats.test);
    assert_eq!(ds.cfg.n, 15);
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let err = pipeline::preprocess(&missing, tmp.path(), 7).unwrap_err();
    assert!(err.to_string().contains("nope.csv"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_after_filtering_explains() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("few.csv");
    fs::write(&path, "s1,a,0\ns1,b,60\ns2,c,0\n").unwrap();
    let err = pipeline::preprocess(&path, &tmp.path().join("o"), 7).unwrap_err();
    assert!(matches!(err, RestcError::EmptyDataset(_)));
    assert!(err.to_string().contains("at least"), "{err}");
}

#[test]
fn untrained_model_ranks_like_chance() {
    // Uniform transitions make every target independent of its prefix.
    let spec = MarkovSpec { items: 30, sessions: 600, dominant: 1.0 / 30.0, seed: 11, ..MarkovSpec::default() };
    let ds = common::toy_dataset(&spec);
    let model = ds.build_model(&TrainConfig { dim: 16, ..TrainConfig::default() }).unwrap();
    let report = pipeline::evaluate(&ds, &model, &[10, 20], None).unwrap();
    let hr = report.get("HR", 20, LengthGroup::Overall).unwrap();
    let p = 20.0 / 30.0;
    let sigma = (p * (1.0 - p) / ds.test.len() as f64).sqrt();
    assert!((hr - p).abs() < 3.0 * sigma, "HR@20 {hr} vs {p} ± {}", 3.0 * sigma);
}

#[test]
fn train_evaluate_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::toy_dataset(&MarkovSpec { items: 20, sessions: 200, seed: 1, ..MarkovSpec::default() });
    let cfg = TrainConfig { dim: 8, epochs: 2, batch_size: 32, ..TrainConfig::default() };
    let run = tmp.path().join("run");
    let out = pipeline::train(&ds, &cfg, Some(&run)).unwrap();
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,main_loss,cont_loss,l2,total,lr,val_hr20,val_mrr20");
    assert_eq!(log.lines().count(), 3);
    let resolved = TrainConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(resolved, cfg);

    let trainer = pipeline::load_checkpoint(&ds, &run.join("checkpoint.bin"), Some(&cfg)).unwrap();
    assert_eq!(restc::checkpoint::encode(&trainer), restc::checkpoint::encode(&out.trainer));
    let other = TrainConfig { dim: 4, ..cfg.clone() };
    let err = pipeline::load_checkpoint(&ds, &run.join("checkpoint.bin"), Some(&other)).err().unwrap();
    assert!(matches!(err, RestcError::Checkpoint(_)));

    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    let r1 = pipeline::evaluate(&ds, &trainer.model, &[10, 20], Some(&e1)).unwrap();
    let r2 = pipeline::evaluate(&ds, &trainer.model, &[10, 20], Some(&e2)).unwrap();
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(fs::read(e1.join("metrics.csv")).unwrap(), fs::read(e2.join("metrics.csv")).unwrap());
    assert_eq!(r1.rows.len(), 16);

    let emb = tmp.path().join("emb.csv");
    restc::eval::export_embeddings(&trainer.model, &ds.test, &ds.vocab, &emb).unwrap();
    let back = restc::eval::read_embeddings(&emb).unwrap();
    let direct = restc::eval::session_embeddings(&trainer.model, &ds.test).unwrap();
    assert_eq!(back.len(), ds.test.len());
    for ((_, a), b) in back.iter().zip(&direct) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}

#[test]
fn identical_sessions_embed_identically() {
    let ds = common::toy_dataset(&MarkovSpec { items: 20, sessions: 200, seed: 1, ..MarkovSpec::default() });
    let model = ds.build_model(&TrainConfig { dim: 8, ..TrainConfig::default() }).unwrap();
    let ex = common::examples(&[&[1, 2, 3], &[4, 5], &[1, 2, 3]], &[4, 6, 9]);
    let rows = restc::eval::session_embeddings(&model, &ex).unwrap();
    assert_eq!(rows[0], rows[2]);
    assert_ne!(rows[0], rows[1]);
}

#[test]
fn sweep_grid_rows_and_zero_weight_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::toy_dataset(&MarkovSpec { items: 20, sessions: 200, seed: 2, ..MarkovSpec::default() });
    let base = TrainConfig { dim: 8, epochs: 1, batch_size: 32, ..TrainConfig::default() };
    let rows = pipeline::sweep(&ds, &base, "tau=0.1,0.5;eta1=0,0.01", Some(tmp.path()), 1).unwrap();
    assert_eq!(rows.len(), 4);
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("run,tau,eta1,seed,val_hr20,val_mrr20\n"));

    let mut no_cont = base.clone();
    no_cont.ablations.no_cont = true;
    let ablated = pipeline::train(&ds, &no_cont, None).unwrap();
    let zero = rows.iter().find(|r| r.assignment[1].1 == "0").unwrap();
    assert_eq!((zero.val_hr20, zero.val_mrr20), (ablated.val_hr20, ablated.val_mrr20));

    let parallel = pipeline::sweep(&ds, &base, "tau=0.1,0.5;eta1=0,0.01", None, 2).unwrap();
    assert_eq!(parallel, rows);

    let rerun = pipeline::train(&ds, &rows[3].config, None).unwrap();
    assert_eq!((rerun.val_hr20, rerun.val_mrr20), (rows[3].val_hr20, rows[3].val_mrr20));
}
