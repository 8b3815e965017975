//! Relation-aware graph attention over session graphs, then gated pooling of
//! the position-aware node states into the spatial view.

use restc_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

use super::{Init, Layout};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::graphs::Relation;

#[derive(Clone, Debug)]
pub struct SpatialIds {
    /// One `[4, D]` relation table per layer, rows in `Relation` order.
    pub relations: Vec<ParamId>,
    /// `[L, D]`, indexed by distance from the session end.
    pub position: ParamId,
    pub w_s: ParamId,
    pub w5: ParamId,
    pub w6: ParamId,
    pub b5: ParamId,
    pub f_s: ParamId,
}

impl SpatialIds {
    pub fn register(store: &mut ParamStore, init: &mut Init, cfg: &TrainConfig, max_len: usize) -> Self {
        let d = cfg.dim;
        let relations = (0..cfg.mgat_layers)
            .map(|l| init.uniform(store, &format!("relation.layer{l}"), &[Relation::COUNT, d]))
            .collect();
        SpatialIds {
            relations,
            position: init.uniform(store, "spatial.position", &[max_len, d]),
            w_s: init.uniform(store, "spatial.w_s", &[2 * d, d]),
            w5: init.uniform(store, "spatial.w5", &[d, d]),
            w6: init.uniform(store, "spatial.w6", &[d, d]),
            b5: init.zeros(store, "spatial.b5", &[d]),
            f_s: init.uniform(store, "spatial.f_s", &[d]),
        }
    }
}

/// One attention layer: each node attends, per relation, over its typed
/// neighbours; relation outputs are summed. Returns `(H', α)`.
pub fn mgat_layer(tape: &mut Tape, h: Var, relations: Var, layout: &Layout, slope: f64) -> Result<(Var, Var)> {
    let hs = tape.gather_rows(h, &layout.edge_src_opt)?;
    let hd = tape.gather_rows(h, &layout.edge_dst)?;
    let r = tape.gather_rows(relations, &layout.edge_rel)?;
    let e = tape.mul(r, hs)?;
    let e = tape.mul(e, hd)?;
    let e = tape.row_sum(e)?;
    let e = tape.leaky_relu(e, slope)?;
    let alpha = tape.segment_softmax(e, &layout.edge_group, layout.num_nodes() * Relation::COUNT)?;
    let msg = tape.mul_col(hd, alpha)?;
    let out = tape.segment_sum(msg, &layout.edge_src, layout.num_nodes())?;
    Ok((out, alpha))
}

/// Node states `[U, D]` after all layers, plus each layer's attention.
pub fn mgat(
    tape: &mut Tape,
    b: &Bindings,
    ids: &SpatialIds,
    emb: Var,
    layout: &Layout,
    slope: f64,
) -> Result<(Var, Vec<Var>)> {
    let mut h = tape.gather_rows(emb, &layout.node_items)?;
    let mut alphas = Vec::with_capacity(ids.relations.len());
    for &rel in &ids.relations {
        let (next, alpha) = mgat_layer(tape, h, b[rel], layout, slope)?;
        h = next;
        alphas.push(alpha);
    }
    Ok((h, alphas))
}

pub struct SpatialOut {
    pub g: Var,
    /// Per-position gate `[R]`.
    pub beta: Var,
    pub h_check: Var,
}

/// Gated sum of the expanded node states `h_exp [R, D]` into `G(s) [C, D]`.
pub fn local_aggregation(
    tape: &mut Tape,
    b: &Bindings,
    ids: &SpatialIds,
    layout: &Layout,
    h_exp: Var,
    p_rev: Var,
) -> Result<SpatialOut> {
    let cat = tape.concat_cols(&[p_rev, h_exp])?;
    let h_check = tape.matmul(cat, b[ids.w_s])?;
    let h_check = tape.tanh(h_check)?;
    let total = tape.segment_sum(h_exp, &layout.seg, layout.c)?;
    let inv = tape.constant(Tensor::vector(layout.inv_lengths.clone())?);
    let mean = tape.mul_col(total, inv)?;
    let mean = tape.matmul(mean, b[ids.w6])?;
    let mean = tape.gather_rows(mean, &layout.seg_opt)?;
    let a = tape.matmul(h_check, b[ids.w5])?;
    let a = tape.add(a, mean)?;
    let a = tape.add_row(a, b[ids.b5])?;
    let a = tape.sigmoid(a)?;
    let a = tape.mul_row(a, b[ids.f_s])?;
    let beta = tape.row_sum(a)?;
    let weighted = tape.mul_col(h_exp, beta)?;
    let g = tape.segment_sum(weighted, &layout.seg, layout.c)?;
    Ok(SpatialOut { g, beta, h_check })
}
