mod common;

use restc::checkpoint;
use restc::pipeline::{self, Dataset};
use restc::synthetic::MarkovSpec;
use restc::trainer::Trainer;
use restc::{RestcError, Scheduler, TrainConfig};

fn small_corpus() -> Dataset {
    common::toy_dataset(&MarkovSpec { items: 20, sessions: 200, seed: 3, ..MarkovSpec::default() })
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 32,
        lr: 0.005,
        epochs: 5,
        scheduler: Scheduler::Constant,
        patience: 0,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_goes_down() {
    let ds = small_corpus();
    let out = pipeline::train(&ds, &quick(0), None).unwrap();
    let totals: Vec<f64> = out.logs.iter().map(|l| l.total).collect();
    assert_eq!(totals.len(), 5);
    let rises = totals.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{totals:?}");
    assert!(totals[4] < totals[0], "{totals:?}");
}

#[test]
fn disabled_contrastive_matches_zero_weight() {
    let ds = small_corpus();
    let mut a = quick(1);
    a.epochs = 2;
    a.ablations.no_cont = true;
    let mut b = quick(1);
    b.epochs = 2;
    b.eta1 = 0.0;
    let ra = pipeline::train(&ds, &a, None).unwrap();
    let rb = pipeline::train(&ds, &b, None).unwrap();
    assert!(ra.logs.iter().all(|l| l.cont_loss == 0.0));
    let strip = |logs: &[restc::trainer::EpochLog]| logs.iter().map(|l| (l.main_loss, l.val_hr20, l.val_mrr20)).collect::<Vec<_>>();
    assert_eq!(strip(&ra.logs), strip(&rb.logs));
}

#[test]
fn same_seed_same_run() {
    let ds = small_corpus();
    let mut cfg = quick(7);
    cfg.epochs = 2;
    cfg.dropout = 0.2;
    let a = pipeline::train(&ds, &cfg, None).unwrap();
    let b = pipeline::train(&ds, &cfg, None).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(checkpoint::encode(&a.trainer), checkpoint::encode(&b.trainer));
    cfg.seed = 8;
    let c = pipeline::train(&ds, &cfg, None).unwrap();
    assert_ne!(a.logs, c.logs);
}

#[test]
fn resume_from_checkpoint_is_seamless() {
    let ds = small_corpus();
    let mut cfg = quick(2);
    cfg.dropout = 0.1;
    let build = || Trainer::new(ds.build_model(&cfg).unwrap());

    let mut straight = build();
    straight.train_epoch(&ds.train).unwrap();
    let second = straight.train_epoch(&ds.train).unwrap();

    let mut first = build();
    first.train_epoch(&ds.train).unwrap();
    let bytes = checkpoint::encode(&first);
    let mut resumed = checkpoint::decode(&bytes, ds.cfg.propagation_matrix().unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    let again = resumed.train_epoch(&ds.train).unwrap();
    assert_eq!(second, again);
    assert_eq!(checkpoint::encode(&straight), checkpoint::encode(&resumed));
}

#[test]
fn non_finite_parameters_abort() {
    let ds = small_corpus();
    let mut trainer = Trainer::new(ds.build_model(&quick(0)).unwrap());
    let id = trainer.model.ids.embedding;
    trainer.model.store.get_mut(id).value.data_mut()[20] = f64::NAN;
    let err = trainer.train_epoch(&ds.train).unwrap_err();
    assert!(matches!(err, RestcError::NumericalAbort { epoch: 0, batch: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn every_strategy_and_loss_trains() {
    let ds = small_corpus();
    for strategy in restc::Strategy::ALL {
        for loss in [restc::LossKind::Binary, restc::LossKind::Categorical] {
            for standard in [false, true] {
                let cfg = TrainConfig { strategy, loss, standard_infonce: standard, epochs: 1, ..quick(0) };
                let out = pipeline::train(&ds, &cfg, None).unwrap();
                let l = &out.logs[0];
                assert!(l.total.is_finite() && l.cont_loss.is_finite(), "{strategy} {loss:?}");
            }
        }
    }
}

#[test]
fn cfg_refresh_reuses_cached_embedding() {
    let ds = small_corpus();
    let base = TrainConfig { epochs: 1, ..quick(0) };
    let every = pipeline::train(&ds, &base, None).unwrap();
    let sparse = pipeline::train(&ds, &TrainConfig { cfg_refresh: 4, ..base.clone() }, None).unwrap();
    assert!(sparse.logs[0].total.is_finite());
    assert_ne!(every.logs[0].total, sparse.logs[0].total);
}
