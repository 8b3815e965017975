#![allow(dead_code)]

use restc::dataio::{AugmentedExample, Batch, Session};
use restc::graphs::Cfg;
use restc::model::Restc;
use restc::pipeline::Dataset;
use restc::synthetic::MarkovSpec;
use restc::{Scheduler, TrainConfig};

pub fn tiny_config(dim: usize) -> TrainConfig {
    TrainConfig { dim, heads: 2, dropout: 0.0, ..TrainConfig::default() }
}

pub fn examples(prefixes: &[&[usize]], targets: &[usize]) -> Vec<AugmentedExample> {
    prefixes
        .iter()
        .zip(targets)
        .map(|(p, &target)| AugmentedExample { prefix: p.to_vec(), target, original_length: p.len() })
        .collect()
}

pub fn batch(ex: &[AugmentedExample], max_len: usize, cls: usize) -> Batch {
    let refs: Vec<&AugmentedExample> = ex.iter().collect();
    Batch::from_examples(&refs, max_len, cls)
}

/// Model whose item graph comes from `sessions` (a chain over all items when empty).
pub fn model_with(config: TrainConfig, n: usize, max_len: usize, sessions: &[Vec<usize>]) -> Restc {
    let sessions: Vec<Session> = if sessions.is_empty() {
        vec![Session { id: "chain".into(), items: (1..=n).collect() }]
    } else {
        sessions
            .iter()
            .enumerate()
            .map(|(i, s)| Session { id: format!("s{i}"), items: s.clone() })
            .collect()
    };
    let cfg = Cfg::build(&sessions, n).unwrap();
    Restc::new(config, n, max_len, cfg.propagation_matrix().unwrap()).unwrap()
}

pub fn toy_dataset(spec: &MarkovSpec) -> Dataset {
    Dataset::from_events(&spec.generate(), 7).unwrap().0
}

/// Settings for the synthetic Markov corpus runs.
pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 16,
        batch_size: 64,
        lr: 0.005,
        eta1: 0.001,
        epochs: 10,
        scheduler: Scheduler::Step { step: 7, gamma: 0.3 },
        patience: 0,
        seed,
        ..TrainConfig::default()
    }
}
