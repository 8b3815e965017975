//! Transformer session encoder with a [CLS]-query aggregation head.

use restc_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

use super::{layer_norm, linear, Dropout, Init, Layout};
use crate::config::TrainConfig;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TemporalIds {
    /// `[L+1, D]`
    pub position: ParamId,
    pub layers: Vec<LayerIds>,
    pub w3: ParamId,
    pub w4: ParamId,
    pub b3: ParamId,
    pub f_t: ParamId,
    /// `[4D, D]`
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl TemporalIds {
    pub fn register(store: &mut ParamStore, init: &mut Init, cfg: &TrainConfig, max_len: usize) -> Self {
        let (d, d2) = (cfg.dim, 2 * cfg.dim);
        let position = init.uniform(store, "temporal.position", &[max_len + 1, d]);
        let layers = (0..cfg.sestrans_layers)
            .map(|l| {
                let p = |s: &str| format!("temporal.layer{l}.{s}");
                LayerIds {
                    wq: init.uniform(store, &p("wq"), &[d2, d2]),
                    wk: init.uniform(store, &p("wk"), &[d2, d2]),
                    wv: init.uniform(store, &p("wv"), &[d2, d2]),
                    w1: init.uniform(store, &p("w1"), &[d2, d2]),
                    b1: init.zeros(store, &p("b1"), &[d2]),
                    w2: init.uniform(store, &p("w2"), &[d2, d2]),
                    b2: init.zeros(store, &p("b2"), &[d2]),
                    ln1_gain: init.ones(store, &p("ln1.gain"), &[d2]),
                    ln1_bias: init.zeros(store, &p("ln1.bias"), &[d2]),
                    ln2_gain: init.ones(store, &p("ln2.gain"), &[d2]),
                    ln2_bias: init.zeros(store, &p("ln2.bias"), &[d2]),
                }
            })
            .collect();
        TemporalIds {
            position,
            layers,
            w3: init.uniform(store, "temporal.enhance.w3", &[d2, d2]),
            w4: init.uniform(store, "temporal.enhance.w4", &[d2, d2]),
            b3: init.zeros(store, "temporal.enhance.b3", &[d2]),
            f_t: init.uniform(store, "temporal.enhance.f_t", &[d2]),
            w_out: init.uniform(store, "temporal.out.w", &[2 * d2, d]),
            b_out: init.zeros(store, "temporal.out.b", &[d]),
        }
    }
}

pub struct TemporalOut {
    pub t: Var,
    pub gamma: Var,
    pub attention: Vec<Var>,
    /// `[C·W, 2D]`
    pub x_init: Var,
    pub x_out: Var,
    pub h_t: Var,
}

/// Item embedding concatenated with the position embedding of each slot.
pub fn embed_with_positions(
    tape: &mut Tape,
    emb: Var,
    positions: Var,
    layout: &Layout,
    zero_positions: bool,
) -> Result<Var> {
    let items = tape.gather_rows(emb, &layout.tokens)?;
    let pos = if zero_positions {
        let d = tape.shape(positions)[1];
        tape.constant(Tensor::zeros(&[layout.tokens.len(), d]))
    } else {
        tape.gather_rows(positions, &layout.positions)?
    };
    Ok(tape.concat_cols(&[items, pos])?)
}

fn split_heads(tape: &mut Tape, x: Var, c: usize, w: usize, heads: usize) -> Result<Var> {
    let dh = tape.shape(x)[1] / heads;
    let x = tape.reshape(x, vec![c, w, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, vec![c * heads, w, dh])?)
}

fn merge_heads(tape: &mut Tape, x: Var, c: usize, w: usize, heads: usize) -> Result<Var> {
    let dh = tape.shape(x)[2];
    let x = tape.reshape(x, vec![c, heads, w, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, vec![c * w, heads * dh])?)
}

/// One post-norm encoder layer over `[C·W, 2D]` rows. Returns the output and
/// the attention distribution `[C·heads, W, W]`.
pub fn transformer_layer(
    tape: &mut Tape,
    b: &Bindings,
    ids: &LayerIds,
    x: Var,
    layout: &Layout,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    let (c, w) = (layout.c, layout.width);
    let d2 = tape.shape(x)[1];
    let q = tape.matmul(x, b[ids.wq])?;
    let k = tape.matmul(x, b[ids.wk])?;
    let v = tape.matmul(x, b[ids.wv])?;
    let (q, k, v) = (
        split_heads(tape, q, c, w, heads)?,
        split_heads(tape, k, c, w, heads)?,
        split_heads(tape, v, c, w, heads)?,
    );
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d2 as f64).sqrt())?;
    let mut mask = Vec::with_capacity(c * heads * w * w);
    for ci in 0..c {
        let keys = &layout.key_mask[ci * w..(ci + 1) * w];
        for _ in 0..heads * w {
            mask.extend_from_slice(keys);
        }
    }
    let attn = tape.softmax_rows(scores, Some(&mask))?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = merge_heads(tape, ctx, c, w, heads)?;

    let r1 = tape.add(x, ctx)?;
    let x1 = layer_norm(tape, r1, b[ids.ln1_gain], b[ids.ln1_bias])?;
    let f = linear(tape, x1, b[ids.w1], b[ids.b1])?;
    let f = tape.relu(f)?;
    let f = linear(tape, f, b[ids.w2], b[ids.b2])?;
    let r2 = tape.add(x1, f)?;
    let x2 = layer_norm(tape, r2, b[ids.ln2_gain], b[ids.ln2_bias])?;
    Ok((dropout.apply(tape, x2)?, attn))
}

/// [CLS]-query attention over the real positions. Keys come from the encoder
/// output, values from the initial embeddings. Returns `(h_t, γ)`.
pub fn temporal_enhanced(
    tape: &mut Tape,
    b: &Bindings,
    ids: &TemporalIds,
    x_out: Var,
    x_init: Var,
    layout: &Layout,
) -> Result<(Var, Var)> {
    let q = tape.gather_rows(x_out, &layout.cls_rows)?;
    let q = tape.matmul(q, b[ids.w3])?;
    let q = tape.gather_rows(q, &layout.seg_opt)?;
    let k = tape.gather_rows(x_out, &layout.real_rows)?;
    let k = tape.matmul(k, b[ids.w4])?;
    let s = tape.add(q, k)?;
    let s = tape.add_row(s, b[ids.b3])?;
    let s = tape.relu(s)?;
    let s = tape.mul_row(s, b[ids.f_t])?;
    let score = tape.row_sum(s)?;
    let gamma = tape.segment_softmax(score, &layout.seg, layout.c)?;
    let v = tape.gather_rows(x_init, &layout.real_rows)?;
    let weighted = tape.mul_col(v, gamma)?;
    let h_t = tape.segment_sum(weighted, &layout.seg, layout.c)?;
    Ok((h_t, gamma))
}

/// `T(s) = L2Norm(Dropout(Concat(h_t, x_c) W + b))`
pub fn temporal_view(
    tape: &mut Tape,
    b: &Bindings,
    ids: &TemporalIds,
    h_t: Var,
    x_c: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let cat = tape.concat_cols(&[h_t, x_c])?;
    let o = linear(tape, cat, b[ids.w_out], b[ids.b_out])?;
    let o = dropout.apply(tape, o)?;
    Ok(tape.l2_normalize_rows(o)?)
}

pub fn forward(
    tape: &mut Tape,
    b: &Bindings,
    ids: &TemporalIds,
    emb: Var,
    layout: &Layout,
    cfg: &TrainConfig,
    dropout: &mut Dropout<'_>,
) -> Result<TemporalOut> {
    let x_init = embed_with_positions(tape, emb, b[ids.position], layout, cfg.ablations.no_pe_s)?;
    let mut x = x_init;
    let mut attention = Vec::with_capacity(ids.layers.len());
    for layer in &ids.layers {
        let (y, a) = transformer_layer(tape, b, layer, x, layout, cfg.heads, dropout)?;
        x = y;
        attention.push(a);
    }
    let (h_t, gamma) = temporal_enhanced(tape, b, ids, x, x_init, layout)?;
    let x_c = tape.gather_rows(x, &layout.cls_rows)?;
    let t = temporal_view(tape, b, ids, h_t, x_c, dropout)?;
    Ok(TemporalOut {
        t,
        gamma,
        attention,
        x_init,
        x_out: x,
        h_t,
    })
}
