//! The multi-task training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restc_tensor::{Adam, Tape, Tensor, TensorError};

use crate::dataio::{make_batches, AugmentedExample, Batch};
use crate::error::{RestcError, Result};
use crate::eval;
use crate::model::{Dropout, Layout, Restc};
use crate::objectives::{self, LossBreakdown};

#[derive(Clone, Copy, Debug)]
enum Stream {
    Shuffle = 1,
    Dropout = 2,
    Negatives = 3,
    Validation = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG for a (seed, epoch, batch, purpose) tuple, so a resumed
/// run needs nothing beyond the seed and the epoch counter.
fn derived_rng(seed: u64, epoch: usize, batch: usize, stream: Stream) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [epoch as u64, batch as u64, stream as u64] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Seeded train/validation split of the augmented examples.
pub fn validation_split(
    examples: &[AugmentedExample],
    fraction: f64,
    seed: u64,
) -> (Vec<AugmentedExample>, Vec<AugmentedExample>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut derived_rng(seed, 0, 0, Stream::Validation));
    let n_val = ((examples.len() as f64) * fraction).floor() as usize;
    let n_val = n_val.min(examples.len().saturating_sub(1));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| examples[i].clone()).collect(),
        val.into_iter().map(|i| examples[i].clone()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub main_loss: f64,
    pub cont_loss: f64,
    pub l2: f64,
    pub total: f64,
    pub lr: f64,
    pub val_hr20: f64,
    pub val_mrr20: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,main_loss,cont_loss,l2,total,lr,val_hr20,val_mrr20";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.main_loss, self.cont_loss, self.l2, self.total, self.lr, self.val_hr20, self.val_mrr20
        )
    }
}

pub struct Trainer {
    pub model: Restc,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub steps: u64,
    cached_cfg: Option<Tensor>,
}

impl Trainer {
    pub fn new(model: Restc) -> Self {
        let adam = Adam::new(&model.store, model.config.lr);
        Trainer {
            model,
            adam,
            epoch: 0,
            steps: 0,
            cached_cfg: None,
        }
    }

    pub fn from_parts(model: Restc, adam: Adam, epoch: usize, steps: u64) -> Self {
        Trainer {
            model,
            adam,
            epoch,
            steps,
            cached_cfg: None,
        }
    }

    pub fn epoch_batches(&self, examples: &[AugmentedExample], epoch: usize) -> Vec<Batch> {
        let cfg = &self.model.config;
        let seed = rand::Rng::gen(&mut derived_rng(cfg.seed, epoch, 0, Stream::Shuffle));
        make_batches(examples, cfg.batch_size, self.model.max_len, self.model.cls(), Some(seed))
    }

    /// Forward + backward on one batch; leaves gradients in the parameter store.
    pub fn compute_gradients(&mut self, batch: &Batch, epoch: usize, index: usize) -> Result<LossBreakdown> {
        let cfg = self.model.config.clone();
        let layout = Layout::new(batch)?;
        let mut tape = Tape::new();
        let b = self.model.store.bind(&mut tape);
        let mut drop_rng = derived_rng(cfg.seed, epoch, index, Stream::Dropout);
        let mut dropout = Dropout::train(cfg.dropout, &mut drop_rng);

        let live_cfg = cfg.cfg_refresh <= 1 || self.cached_cfg.is_none() || self.steps.is_multiple_of(cfg.cfg_refresh as u64);
        let cached = if live_cfg { None } else { self.cached_cfg.as_ref() };
        let out = self.model.forward(&mut tape, &b, &layout, &mut dropout, cached)?;
        if cfg.cfg_refresh > 1 && live_cfg {
            self.cached_cfg = out.cfg_embedding.map(|z| tape.value(z).clone());
        }

        let main = objectives::main_loss(&mut tape, out.logits, &batch.targets, cfg.loss)?;
        let mut loss = main;
        let mut cont_value = 0.0;
        if cfg.contrastive_active() && batch.size() >= 2 {
            let mut neg_rng = derived_rng(cfg.seed, epoch, index, Stream::Negatives);
            let neg = objectives::sample_negatives(cfg.strategy, batch.size(), cfg.dim, &mut neg_rng)?;
            let cont = objectives::contrastive_loss(&mut tape, out.g, out.t, &neg, cfg.tau, cfg.standard_infonce)?;
            cont_value = tape.value(cont).item()?;
            let weighted = tape.scale(cont, cfg.eta1)?;
            loss = tape.add(main, weighted)?;
        }
        let breakdown = LossBreakdown::new(
            tape.value(main).item()?,
            cont_value,
            self.model.store.sq_norm(),
            cfg.eta1,
            cfg.eta2,
        )?;
        if !breakdown.is_finite() {
            return Err(RestcError::NumericalAbort {
                epoch,
                batch: index,
                breakdown: breakdown.to_string(),
            });
        }
        tape.backward(loss)?;
        self.model.store.accumulate_grads(&tape, &b);
        Ok(breakdown)
    }

    pub fn train_step(&mut self, batch: &Batch, epoch: usize, index: usize) -> Result<LossBreakdown> {
        let breakdown = self.compute_gradients(batch, epoch, index)?;
        self.adam.lr = self.model.config.scheduler.lr(self.model.config.lr, epoch);
        self.adam
            .step(&mut self.model.store, self.model.config.eta2)
            .map_err(|e| match e {
                TensorError::Divergence { param } => RestcError::NumericalAbort {
                    epoch,
                    batch: index,
                    breakdown: format!("{breakdown}; non-finite gradient in {param}"),
                },
                other => other.into(),
            })?;
        self.steps += 1;
        Ok(breakdown)
    }

    /// One pass over `examples`; returns batch-mean losses.
    pub fn train_epoch(&mut self, examples: &[AugmentedExample]) -> Result<LossBreakdown> {
        let epoch = self.epoch;
        let batches = self.epoch_batches(examples, epoch);
        let mut sum = LossBreakdown::default();
        for (i, batch) in batches.iter().enumerate() {
            let b = self.train_step(batch, epoch, i)?;
            sum.main += b.main;
            sum.contrastive += b.contrastive;
            sum.l2 += b.l2;
            sum.total += b.total;
            log::debug!("epoch {epoch} batch {i}: {b}");
        }
        let n = batches.len().max(1) as f64;
        self.epoch += 1;
        let cfg = &self.model.config;
        Ok(LossBreakdown {
            main: sum.main / n,
            contrastive: sum.contrastive / n,
            l2: sum.l2 / n,
            eta1: cfg.eta1,
            eta2: cfg.eta2,
            total: sum.total / n,
        })
    }

    /// Trains until the configured epoch count or early stop, keeping the
    /// parameters of the best validation MRR@20. `on_epoch` sees each log row
    /// and the trainer state after that epoch.
    pub fn fit(
        &mut self,
        train: &[AugmentedExample],
        val: &[AugmentedExample],
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let cfg = self.model.config.clone();
        let mut logs = Vec::new();
        let mut best: Option<(f64, Vec<Tensor>)> = None;
        let mut stale = 0;
        while self.epoch < cfg.epochs {
            let epoch = self.epoch;
            let lr = cfg.scheduler.lr(cfg.lr, epoch);
            let losses = self.train_epoch(train)?;
            let (hr, mrr) = if val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let ranks = eval::rank_examples(&self.model, val)?;
                (eval::hit_rate(&ranks, 20), eval::mrr(&ranks, 20))
            };
            let row = EpochLog {
                epoch,
                main_loss: losses.main,
                cont_loss: losses.contrastive,
                l2: losses.l2,
                total: losses.total,
                lr,
                val_hr20: hr,
                val_mrr20: mrr,
            };
            log::info!(
                "epoch {epoch}: loss {:.5} (main {:.5}, cont {:.5}) val HR@20 {hr:.4} MRR@20 {mrr:.4}",
                row.total,
                row.main_loss,
                row.cont_loss
            );
            on_epoch(&row, self)?;
            logs.push(row);
            if !val.is_empty() {
                if best.as_ref().is_none_or(|(b, _)| mrr > *b) {
                    let snapshot = self.model.store.iter().map(|(_, p)| p.value.clone()).collect();
                    best = Some((mrr, snapshot));
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        log::info!("early stop after epoch {epoch}");
                        break;
                    }
                }
            }
        }
        if let Some((_, snapshot)) = best {
            let ids: Vec<_> = self.model.store.iter().map(|(id, _)| id).collect();
            for (id, v) in ids.into_iter().zip(snapshot) {
                self.model.store.set(id, v)?;
            }
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize) -> Vec<AugmentedExample> {
        (0..n)
            .map(|i| AugmentedExample {
                prefix: vec![i % 3 + 1],
                target: (i + 1) % 3 + 1,
                original_length: 1,
            })
            .collect()
    }

    #[test]
    fn validation_split_is_seeded_partition() {
        let all = ex(10);
        let (t, v) = validation_split(&all, 0.2, 5);
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(validation_split(&all, 0.2, 5), (t, v));
        let (t, v) = validation_split(&all, 0.0, 5);
        assert_eq!((t.len(), v.len()), (10, 0));
    }

    #[test]
    fn derived_streams_differ() {
        use rand::Rng;
        let a: u64 = derived_rng(1, 0, 0, Stream::Dropout).gen();
        let b: u64 = derived_rng(1, 0, 0, Stream::Negatives).gen();
        let c: u64 = derived_rng(1, 0, 1, Stream::Dropout).gen();
        let a2: u64 = derived_rng(1, 0, 0, Stream::Dropout).gen();
        assert!(a != b && a != c);
        assert_eq!(a, a2);
    }
}
