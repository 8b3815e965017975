//! View fusion, next-item scoring, and the training objectives.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use restc_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var, NORM_FLOOR};

use crate::config::{LossKind, Strategy};
use crate::error::{RestcError, Result};
use crate::model::{Init, Layout};

/// Probability clamp applied before the logs of the binary main loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FusionIds {
    pub w_f: ParamId,
    pub w7: ParamId,
    pub w8: ParamId,
    pub b7: ParamId,
    pub f_g: ParamId,
    /// `[D, N]`
    pub w_y: ParamId,
}

impl FusionIds {
    pub fn register(store: &mut ParamStore, init: &mut Init, d: usize, n_items: usize) -> Self {
        FusionIds {
            w_f: init.uniform(store, "fusion.w_f", &[d, d]),
            w7: init.uniform(store, "fusion.w7", &[d, d]),
            w8: init.uniform(store, "fusion.w8", &[d, d]),
            b7: init.zeros(store, "fusion.b7", &[d]),
            f_g: init.uniform(store, "fusion.f_g", &[d]),
            w_y: init.uniform(store, "fusion.w_y", &[d, n_items]),
        }
    }
}

pub struct Fused {
    pub s_h: Var,
    /// Per-position gate `[R]`.
    pub rho: Var,
}

/// Gates each position by the enhanced spatial state and the temporal view,
/// then sums `ρ (z̃ + h̃)` over unique items (each taken at its last
/// occurrence).
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    tape: &mut Tape,
    b: &Bindings,
    ids: &FusionIds,
    layout: &Layout,
    h_g: Var,
    t: Var,
    h_exp: Var,
    z_s: Var,
) -> Result<Fused> {
    let hg = tape.matmul(h_g, b[ids.w_f])?;
    let hg = tape.tanh(hg)?;
    let a = tape.matmul(hg, b[ids.w7])?;
    let tw = tape.matmul(t, b[ids.w8])?;
    let tw = tape.gather_rows(tw, &layout.seg_opt)?;
    let a = tape.add(a, tw)?;
    let a = tape.add_row(a, b[ids.b7])?;
    let a = tape.sigmoid(a)?;
    let a = tape.mul_row(a, b[ids.f_g])?;
    let rho = tape.row_sum(a)?;

    let u = layout.num_nodes();
    let rho_u = tape.gather_flat(rho, &layout.node_last_row, vec![u])?;
    let zh = tape.add(z_s, h_exp)?;
    let zh = tape.gather_rows(zh, &layout.node_last_row_opt)?;
    let zh = tape.mul_col(zh, rho_u)?;
    let s_h = tape.segment_sum(zh, &layout.node_session, layout.c)?;
    Ok(Fused { s_h, rho })
}

/// Mean main loss over the batch. `targets` are 1-based item indices.
pub fn main_loss(tape: &mut Tape, logits: Var, targets: &[usize], kind: LossKind) -> Result<Var> {
    let (c, n) = tape.value(logits).dims2()?;
    if targets.len() != c {
        return Err(RestcError::Contract(format!("{} targets for {c} rows", targets.len())));
    }
    let mut flat = Vec::with_capacity(c);
    for (r, &t) in targets.iter().enumerate() {
        if t == 0 || t > n {
            return Err(RestcError::Contract(format!("target {t} outside items 1..={n}")));
        }
        flat.push(r * n + t - 1);
    }
    match kind {
        LossKind::Categorical => {
            let lp = tape.log_softmax_rows(logits)?;
            let picked = tape.gather_flat(lp, &flat, vec![c])?;
            let s = tape.sum(picked)?;
            Ok(tape.scale(s, -1.0 / c as f64)?)
        }
        LossKind::Binary => {
            let p = tape.softmax_rows(logits, None)?;
            let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
            let mut y = vec![0.0; c * n];
            for &i in &flat {
                y[i] = 1.0;
            }
            let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let y = tape.constant(Tensor::new(vec![c, n], y)?);
            let not_y = tape.constant(Tensor::new(vec![c, n], not_y)?);
            let lp = tape.log(p)?;
            let q = tape.affine(p, -1.0, 1.0)?;
            let lq = tape.log(q)?;
            let a = tape.mul(y, lp)?;
            let bq = tape.mul(not_y, lq)?;
            let total = tape.add(a, bq)?;
            let s = tape.sum(total)?;
            Ok(tape.scale(s, -1.0 / c as f64)?)
        }
    }
}

/// Negative sets for a batch of `C` anchors, `k` per anchor, as row indices
/// into the strategy's candidate matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    pub strategy: Strategy,
    pub k: usize,
    pub index: Vec<usize>,
    /// Flat gather index producing the column-shuffled copy of `T` (mixed noise).
    pub shuffle: Option<Vec<usize>>,
}

impl Negatives {
    pub fn for_anchor(&self, i: usize) -> &[usize] {
        &self.index[i * self.k..(i + 1) * self.k]
    }
}

/// Draws negatives for `c` anchors with embedding width `d`.
///
/// Candidate matrices: `G` (spatial only), `T` (single/multi align),
/// `[G; T]` (self multi align), `[shuffled T; T]` (mixed noise).
pub fn sample_negatives<R: Rng>(strategy: Strategy, c: usize, d: usize, rng: &mut R) -> Result<Negatives> {
    if c < 2 {
        return Err(RestcError::Config(format!("contrastive learning needs batches of at least 2, got {c}")));
    }
    let others = |i: usize| (0..c).filter(move |&j| j != i);
    let mut index = Vec::new();
    let mut shuffle = None;
    let k = match strategy {
        Strategy::SpatialOnly | Strategy::MultiAlign => {
            (0..c).for_each(|i| index.extend(others(i)));
            c - 1
        }
        Strategy::SingleAlign => {
            for i in 0..c {
                let j = rng.gen_range(0..c - 1);
                index.push(if j >= i { j + 1 } else { j });
            }
            1
        }
        Strategy::SelfMultiAlign => {
            for i in 0..c {
                index.extend(others(i));
                index.extend(others(i).map(|j| c + j));
            }
            2 * (c - 1)
        }
        Strategy::MixedNoise => {
            let mut flat = Vec::with_capacity(c * d);
            let mut perm: Vec<usize> = (0..d).collect();
            for i in 0..c {
                perm.shuffle(rng);
                flat.extend(perm.iter().map(|&p| i * d + p));
            }
            shuffle = Some(flat);
            for i in 0..c {
                // Pool of 2C minus the anchor's own positive at C+i.
                for s in index::sample(rng, 2 * c - 1, c) {
                    index.push(if s >= c + i { s + 1 } else { s });
                }
            }
            c
        }
    };
    Ok(Negatives { strategy, k, index, shuffle })
}

fn check_rows(tape: &Tape, x: Var, which: &'static str) -> Result<()> {
    let v = tape.value(x);
    let (m, n) = v.dims2()?;
    for r in 0..m {
        let norm: f64 = v.data()[r * n..(r + 1) * n].iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(RestcError::DegenerateEmbedding { which, row: r });
        }
    }
    Ok(())
}

/// InfoNCE with cosine similarity, summed over anchors.
///
/// `anchors[i]` is paired with `positives[i]`; its negatives are the
/// `candidates` rows listed in `neg_index[i*k..(i+1)*k]`. By default the
/// denominator runs over negatives only; `include_positive` gives the
/// standard form.
#[allow(clippy::too_many_arguments)]
pub fn info_nce(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    candidates: Var,
    neg_index: &[usize],
    k: usize,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_rows(tape, anchors, "anchor")?;
    check_rows(tape, positives, "positive")?;
    check_rows(tape, candidates, "negative")?;
    let c = tape.value(anchors).dims2()?.0;
    if k == 0 || neg_index.len() != c * k {
        return Err(RestcError::Contract(format!("expected {c}x{k} negative indices, got {}", neg_index.len())));
    }
    let a = tape.l2_normalize_rows(anchors)?;
    let p = tape.l2_normalize_rows(positives)?;
    let n = tape.l2_normalize_rows(candidates)?;
    let pos = tape.mul(a, p)?;
    let pos = tape.row_sum(pos)?;
    let pos = tape.scale(pos, 1.0 / tau)?;

    let rep: Vec<Option<usize>> = (0..c).flat_map(|i| std::iter::repeat_n(Some(i), k)).collect();
    let ar = tape.gather_rows(a, &rep)?;
    let nr = tape.gather_rows(n, &neg_index.iter().map(|&j| Some(j)).collect::<Vec<_>>())?;
    let neg = tape.mul(ar, nr)?;
    let neg = tape.row_sum(neg)?;
    let neg = tape.scale(neg, 1.0 / tau)?;
    let neg = tape.reshape(neg, vec![c, k])?;
    let denom_logits = if include_positive {
        let pcol = tape.reshape(pos, vec![c, 1])?;
        tape.concat_cols(&[pcol, neg])?
    } else {
        neg
    };
    let lse = tape.logsumexp_rows(denom_logits)?;
    let per = tape.sub(lse, pos)?;
    Ok(tape.sum(per)?)
}

/// Contrastive loss between spatial views `g` and temporal views `t`, both
/// `[C, D]`, under the negatives' strategy.
pub fn contrastive_loss(
    tape: &mut Tape,
    g: Var,
    t: Var,
    neg: &Negatives,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let (c, d) = tape.value(t).dims2()?;
    let candidates = match neg.strategy {
        Strategy::SpatialOnly => g,
        Strategy::SingleAlign | Strategy::MultiAlign => t,
        Strategy::SelfMultiAlign => tape.concat_rows(&[g, t])?,
        Strategy::MixedNoise => {
            let idx = neg
                .shuffle
                .as_ref()
                .ok_or_else(|| RestcError::Contract("mixed-noise negatives without a shuffle".into()))?;
            let noisy = tape.gather_flat(t, idx, vec![c, d])?;
            tape.concat_rows(&[noisy, t])?
        }
    };
    info_nce(tape, g, t, candidates, &neg.index, neg.k, tau, include_positive)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub contrastive: f64,
    pub l2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(main: f64, contrastive: f64, l2: f64, eta1: f64, eta2: f64) -> Result<Self> {
        if !(eta1 >= 0.0 && eta2 >= 0.0) {
            return Err(RestcError::Config(format!("loss weights must be non-negative, got {eta1}, {eta2}")));
        }
        Ok(LossBreakdown {
            main,
            contrastive,
            l2,
            eta1,
            eta2,
            total: main + eta1 * contrastive + eta2 * l2,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.main.is_finite() && self.contrastive.is_finite()
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "main={} cont={} l2={} total={}",
            self.main, self.contrastive, self.l2, self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(tape: &mut Tape, r: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(r).unwrap(), true)
    }

    #[test]
    fn orthogonal_negative_example() {
        let mut tape = Tape::new();
        let g = rows(&mut tape, &[vec![1.0, 0.0]]);
        let t = rows(&mut tape, &[vec![1.0, 0.0]]);
        let n = rows(&mut tape, &[vec![0.0, 1.0]]);
        let l = info_nce(&mut tape, g, t, n, &[0], 1, 0.5, true).unwrap();
        let want = -((2.0f64).exp() / ((2.0f64).exp() + 1.0)).ln();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.12693).abs() < 1e-5);
        // As written (negatives only): -2 + log(e^0) = -2.
        let l = info_nce(&mut tape, g, t, n, &[0], 1, 0.5, false).unwrap();
        assert!((tape.value(l).item().unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::new();
        let v = vec![0.6, 0.8];
        let g = rows(&mut tape, &[v.clone()]);
        let t = rows(&mut tape, &[v.clone()]);
        let k = 5;
        let n = rows(&mut tape, &vec![v.clone(); k]);
        let idx: Vec<usize> = (0..k).collect();
        let l = info_nce(&mut tape, g, t, n, &idx, k, 0.3, false).unwrap();
        assert!((tape.value(l).item().unwrap() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut tape = Tape::new();
        let base = [vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 2.0]];
        let tb = [vec![0.2, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
        let scaled = |r: &[Vec<f64>]| r.iter().map(|x| x.iter().map(|v| v * 10.0).collect()).collect::<Vec<Vec<f64>>>();
        let g = rows(&mut tape, &base);
        let t = rows(&mut tape, &tb);
        let g10 = rows(&mut tape, &scaled(&base));
        let t10 = rows(&mut tape, &scaled(&tb));
        let neg = sample_negatives(Strategy::MultiAlign, 2, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = contrastive_loss(&mut tape, g, t, &neg, 0.5, false).unwrap();
        let b = contrastive_loss(&mut tape, g10, t10, &neg, 0.5, false).unwrap();
        assert!((tape.value(a).item().unwrap() - tape.value(b).item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rows_rejected() {
        let mut tape = Tape::new();
        let g = rows(&mut tape, &[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let t = rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let neg = sample_negatives(Strategy::MultiAlign, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            contrastive_loss(&mut tape, g, t, &neg, 0.5, false),
            Err(RestcError::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn mixed_noise_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negatives(Strategy::MixedNoise, 2, 4, &mut rng).unwrap();
        assert_eq!(neg.k, 2);
        for i in 0..2 {
            let s = neg.for_anchor(i);
            assert!(s.iter().all(|&j| j < 4 && j != 2 + i));
            assert_ne!(s[0], s[1]);
        }
        let again = sample_negatives(Strategy::MixedNoise, 2, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(neg, again);
        // Each shuffled row is a permutation of that row's coordinates.
        let sh = neg.shuffle.unwrap();
        for i in 0..2 {
            let mut r: Vec<usize> = sh[i * 4..(i + 1) * 4].to_vec();
            r.sort();
            assert_eq!(r, (i * 4..(i + 1) * 4).collect::<Vec<_>>());
        }
        assert!(matches!(
            sample_negatives(Strategy::MixedNoise, 1, 4, &mut rng),
            Err(RestcError::Config(_))
        ));
    }

    #[test]
    fn single_coordinate_shuffle_is_identity() {
        let neg = sample_negatives(Strategy::MixedNoise, 3, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(neg.shuffle.unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn strategy_negative_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let so = sample_negatives(Strategy::SpatialOnly, c, 2, &mut rng).unwrap();
        assert_eq!(so.for_anchor(1), &[0, 2, 3]);
        let sa = sample_negatives(Strategy::SingleAlign, c, 2, &mut rng).unwrap();
        assert!((0..c).all(|i| sa.for_anchor(i)[0] != i && sa.for_anchor(i).len() == 1));
        let sma = sample_negatives(Strategy::SelfMultiAlign, c, 2, &mut rng).unwrap();
        assert_eq!(sma.for_anchor(0), &[1, 2, 3, 5, 6, 7]);
    }

    #[test]
    fn binary_main_loss_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), true);
        let l = main_loss(&mut tape, logits, &[1], LossKind::Binary).unwrap();
        assert!((tape.value(l).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let logits = tape.leaf(Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap(), true);
        let l = main_loss(&mut tape, logits, &[1], LossKind::Binary).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v >= 0.0 && v <= 1e-9 * 3.0, "{v}");

        let logits = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap(), true);
        let l = main_loss(&mut tape, logits, &[2], LossKind::Binary).unwrap();
        assert!(tape.value(l).item().unwrap() > 0.0);
        let l = main_loss(&mut tape, logits, &[2], LossKind::Categorical).unwrap();
        let lse = (0.3f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
        assert!((tape.value(l).item().unwrap() - (lse + 1.0)).abs() < 1e-12);
        assert!(main_loss(&mut tape, logits, &[4], LossKind::Binary).is_err());
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(1.5, 2.25, 40.0, 0.01, 1e-5).unwrap();
        assert!((b.total - (1.5 + 0.01 * 2.25 + 1e-5 * 40.0)).abs() < 1e-12);
        let b = LossBreakdown::new(1.5, 2.25, 40.0, 0.0, 1e-5).unwrap();
        assert_eq!(b.total, 1.5 + 1e-5 * 40.0);
        let b = LossBreakdown::new(1.5, 2.25, 0.0, 0.1, 0.0).unwrap();
        assert_eq!(b.total, 1.5 + 0.1 * 2.25);
        assert!(LossBreakdown::new(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn lower_temperature_sharpens_gradient() {
        let grad_norm = |tau: f64| {
            let mut tape = Tape::new();
            let g = rows(&mut tape, &[vec![1.0, 0.2, 0.0]]);
            let t = rows(&mut tape, &[vec![0.9, 0.3, 0.1]]);
            let n = rows(&mut tape, &[vec![0.5, 1.0, 0.0], vec![-0.2, 0.4, 1.0]]);
            let l = info_nce(&mut tape, g, t, n, &[0, 1], 2, tau, false).unwrap();
            tape.backward(l).unwrap();
            tape.grad(g).unwrap().sq_norm().sqrt()
        };
        assert!(grad_norm(0.1) > grad_norm(1.0));
    }
}
