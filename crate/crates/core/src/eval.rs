//! Ranking metrics, length-group reports, and session embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::{AugmentedExample, Batch, Vocab};
use crate::error::{RestcError, Result};
use crate::model::Restc;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub rank: usize,
    /// Observed prefix length `M`.
    pub length: usize,
}

/// 1-based rank of column `target`: items with a strictly greater score, plus
/// tied items at a lower index, rank ahead of it.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&s) = scores.get(target) else {
        return Err(RestcError::Contract(format!("target column {target} outside {} scores", scores.len())));
    };
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count();
    Ok(ahead + 1)
}

pub fn hit_rate(ranks: &[RankResult], k: usize) -> f64 {
    ranks.iter().filter(|r| r.rank <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr(ranks: &[RankResult], k: usize) -> f64 {
    ranks
        .iter()
        .map(|r| if r.rank <= k { 1.0 / r.rank as f64 } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthGroup {
    Overall,
    /// `(0, 5]`
    Short,
    /// `(5, 10]`
    Medium,
    /// `(10, ∞)`
    Long,
}

impl LengthGroup {
    pub const ALL: [LengthGroup; 4] = [LengthGroup::Overall, LengthGroup::Short, LengthGroup::Medium, LengthGroup::Long];

    pub fn contains(self, length: usize) -> bool {
        match self {
            LengthGroup::Overall => true,
            LengthGroup::Short => (1..=5).contains(&length),
            LengthGroup::Medium => (6..=10).contains(&length),
            LengthGroup::Long => length > 10,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthGroup::Overall => "overall",
            LengthGroup::Short => "S",
            LengthGroup::Medium => "M",
            LengthGroup::Long => "L",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub cutoff: usize,
    pub group: LengthGroup,
    /// Examples in the group; the value is NaN when zero.
    pub count: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub fn compute_metrics(ranks: &[RankResult], cutoffs: &[usize]) -> Result<MetricReport> {
    if ranks.is_empty() {
        return Err(RestcError::EmptyDataset("no ranked examples to score".into()));
    }
    let mut rows = Vec::new();
    for group in LengthGroup::ALL {
        let members: Vec<RankResult> = ranks.iter().copied().filter(|r| group.contains(r.length)).collect();
        for &k in cutoffs {
            for metric in ["HR", "MRR"] {
                let value = match (members.is_empty(), metric) {
                    (true, _) => f64::NAN,
                    (false, "HR") => hit_rate(&members, k),
                    (false, _) => mrr(&members, k),
                };
                rows.push(MetricRow { metric, cutoff: k, group, count: members.len(), value });
            }
        }
    }
    Ok(MetricReport { rows })
}

impl MetricReport {
    pub fn get(&self, metric: &str, cutoff: usize, group: LengthGroup) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.cutoff == cutoff && r.group == group)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,cutoff,group,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.metric, r.cutoff, r.group.label(), r.value);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}{:>8}{:>8}{:>10}{:>10}\n", "group", "n", "metric", "@K", "value");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8}{:>8}{:>8}{:>10}{:>10.4}",
                r.group.label(),
                r.count,
                r.metric,
                r.cutoff,
                r.value
            );
        }
        out
    }
}

fn eval_batches(model: &Restc, examples: &[AugmentedExample]) -> Vec<Batch> {
    let refs: Vec<&AugmentedExample> = examples.iter().collect();
    refs.chunks(EVAL_BATCH)
        .map(|c| Batch::from_examples(c, model.max_len, model.cls()))
        .collect()
}

fn cached_cfg(model: &Restc) -> Result<Option<restc_tensor::Tensor>> {
    if model.config.ablations.no_cfg {
        Ok(None)
    } else {
        model.cfg_embedding().map(Some)
    }
}

/// Scores every example against all items (eval mode, parallel over batches).
pub fn rank_examples(model: &Restc, examples: &[AugmentedExample]) -> Result<Vec<RankResult>> {
    let z = cached_cfg(model)?;
    let per_batch: Vec<Vec<RankResult>> = eval_batches(model, examples)
        .par_iter()
        .map(|batch| {
            let (logits, _) = model.infer(batch, z.as_ref())?;
            let n = model.n_items;
            (0..batch.size())
                .map(|r| {
                    let rank = rank_target(&logits.data()[r * n..(r + 1) * n], batch.targets[r] - 1)?;
                    Ok(RankResult { rank, length: batch.original_lengths[r] })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// Ranks by training-target frequency, identical for every prefix.
pub fn popularity_ranks(train: &[AugmentedExample], test: &[AugmentedExample], n_items: usize) -> Result<Vec<RankResult>> {
    let mut counts = vec![0.0; n_items];
    for e in train {
        if let Some(c) = e.target.checked_sub(1).and_then(|i| counts.get_mut(i)) {
            *c += 1.0;
        }
    }
    test.iter()
        .map(|e| {
            let rank = rank_target(&counts, e.target.wrapping_sub(1))?;
            Ok(RankResult { rank, length: e.original_length })
        })
        .collect()
}

/// Session embeddings `s_h` for each example, in order.
pub fn session_embeddings(model: &Restc, examples: &[AugmentedExample]) -> Result<Vec<Vec<f64>>> {
    let z = cached_cfg(model)?;
    let per_batch: Vec<Vec<Vec<f64>>> = eval_batches(model, examples)
        .par_iter()
        .map(|batch| {
            let (_, s_h) = model.infer(batch, z.as_ref())?;
            Ok((0..batch.size()).map(|r| s_h.row(r).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// CSV `label,dim_0,..` with the target item's external id as label.
pub fn export_embeddings(model: &Restc, examples: &[AugmentedExample], vocab: &Vocab, path: &Path) -> Result<()> {
    let rows = session_embeddings(model, examples)?;
    let mut out = String::from("label");
    for j in 0..model.config.dim {
        let _ = write!(out, ",dim_{j}");
    }
    out.push('\n');
    for (e, row) in examples.iter().zip(&rows) {
        out.push_str(vocab.external(e.target).unwrap_or("?"));
        for v in row {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RestcError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RestcError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RestcError::Format { path: path.to_path_buf(), message: e.to_string() })?;
        let values = rec
            .iter()
            .skip(1)
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| RestcError::Format { path: path.to_path_buf(), message: e.to_string() })?;
        out.push((rec[0].to_string(), values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rr(ranks: &[usize]) -> Vec<RankResult> {
        ranks.iter().map(|&rank| RankResult { rank, length: 3 }).collect()
    }

    #[test]
    fn rank_rules() {
        assert_eq!(rank_target(&[0.1, 0.7, 0.2], 1).unwrap(), 1);
        assert_eq!(rank_target(&[0.25; 4], 0).unwrap(), 1);
        assert_eq!(rank_target(&[0.25; 4], 3).unwrap(), 4);
        assert!(rank_target(&[0.5], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        let all_one = rr(&[1, 1, 1]);
        assert_eq!((hit_rate(&all_one, 10), mrr(&all_one, 10)), (1.0, 1.0));
        let half = rr(&[1, 11]);
        assert_eq!((hit_rate(&half, 10), mrr(&half, 10)), (0.5, 0.5));
        let r = rr(&[2, 5, 20]);
        assert_eq!(hit_rate(&r, 20), 1.0);
        assert!((mrr(&r, 20) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn report_layout() {
        let ranks = vec![
            RankResult { rank: 1, length: 5 },
            RankResult { rank: 3, length: 6 },
            RankResult { rank: 30, length: 2 },
        ];
        let rep = compute_metrics(&ranks, &DEFAULT_CUTOFFS).unwrap();
        let overall = rep.rows.iter().filter(|r| r.group == LengthGroup::Overall).count();
        assert_eq!(overall, 4);
        assert_eq!(rep.rows.len() - overall, 12);
        assert_eq!(rep.get("HR", 10, LengthGroup::Short), Some(0.5));
        assert_eq!(rep.get("MRR", 10, LengthGroup::Medium), Some(1.0 / 3.0));
        assert!(rep.get("HR", 20, LengthGroup::Long).unwrap().is_nan());
        let csv = rep.to_csv();
        assert!(csv.starts_with("metric,cutoff,group,value\nHR,10,overall,"));
        assert_eq!(csv.lines().count(), 17);
    }

    #[test]
    fn popularity_orders_by_frequency() {
        let ex = |target| AugmentedExample { prefix: vec![1], target, original_length: 1 };
        let train = vec![ex(3), ex(3), ex(2)];
        let ranks = popularity_ranks(&train, &[ex(3), ex(2), ex(1)], 3).unwrap();
        assert_eq!(ranks.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
