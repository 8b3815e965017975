//! Mean-pooling propagation over the global item graph and the enhanced
//! spatial projection.

use std::sync::Arc;

use restc_tensor::{Bindings, CsrMatrix, ParamId, ParamStore, Tape, Var};

use super::Init;
use crate::config::TrainConfig;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct CfgIds {
    pub layers: Vec<ParamId>,
    /// `[3D, D]`
    pub w_g: ParamId,
}

impl CfgIds {
    pub fn register(store: &mut ParamStore, init: &mut Init, cfg: &TrainConfig) -> Self {
        let d = cfg.dim;
        CfgIds {
            layers: (0..cfg.cfg_layers)
                .map(|k| init.uniform(store, &format!("cfg.layer{k}"), &[d, d]))
                .collect(),
            w_g: init.uniform(store, "cfg.w_g", &[3 * d, d]),
        }
    }
}

/// `Z⁽ᵏ⁾ = LeakyReLU(P Z⁽ᵏ⁻¹⁾ W⁽ᵏ⁾)` starting from the item rows of the
/// embedding table. Row 0 (padding) stays zero.
pub fn propagate_from(
    tape: &mut Tape,
    z0: Var,
    weights: &[Var],
    propagation: &Arc<CsrMatrix>,
    slope: f64,
) -> Result<Var> {
    let mut z = z0;
    for &w in weights {
        let p = tape.spmm(Arc::clone(propagation), z)?;
        let p = tape.matmul(p, w)?;
        z = tape.leaky_relu(p, slope)?;
    }
    Ok(z)
}

pub fn propagate(
    tape: &mut Tape,
    b: &Bindings,
    ids: &CfgIds,
    emb: Var,
    n_items: usize,
    propagation: &Arc<CsrMatrix>,
    slope: f64,
) -> Result<Var> {
    let rows: Vec<Option<usize>> = std::iter::once(None).chain((1..=n_items).map(Some)).collect();
    let z0 = tape.gather_rows(emb, &rows)?;
    let weights: Vec<Var> = ids.layers.iter().map(|&id| b[id]).collect();
    propagate_from(tape, z0, &weights, propagation, slope)
}

/// `H_g = Concat(P_e, H̃, Z̃_s) W_g`
pub fn enhance(tape: &mut Tape, b: &Bindings, ids: &CfgIds, p_e: Var, h_exp: Var, z_s: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[p_e, h_exp, z_s])?;
    Ok(tape.matmul(cat, b[ids.w_g])?)
}
