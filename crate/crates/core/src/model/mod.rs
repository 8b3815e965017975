//! The full model: parameter registry, batch index layout, and forward pass.

pub mod cfg_encoder;
pub mod spatial;
pub mod temporal;

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restc_tensor::{Bindings, CsrMatrix, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::TrainConfig;
use crate::dataio::Batch;
use crate::error::{RestcError, Result};
use crate::graphs::{Msg, Relation};
use crate::objectives::{self, FusionIds};

pub use cfg_encoder::CfgIds;
pub use spatial::SpatialIds;
pub use temporal::{LayerIds, TemporalIds};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout; a no-op without an RNG (evaluation).
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

/// Index bookkeeping that turns a padded batch plus its session graphs into
/// flat gather/segment lists.
///
/// "Real rows" enumerate every real item position of every session in batch
/// order; they index the `[R, ·]` per-position tensors.
#[derive(Clone, Debug)]
pub struct Layout {
    pub c: usize,
    /// Trimmed row width: longest prefix in the batch plus the [CLS] slot.
    pub width: usize,
    pub lengths: Vec<usize>,
    pub tokens: Vec<Option<usize>>,
    pub positions: Vec<Option<usize>>,
    pub key_mask: Vec<bool>,
    pub cls_rows: Vec<Option<usize>>,
    pub real_rows: Vec<Option<usize>>,
    /// Session of each real row.
    pub seg: Vec<usize>,
    pub seg_opt: Vec<Option<usize>>,
    pub items: Vec<Option<usize>>,
    /// Reversed position index `M-1-k` of each real row.
    pub rev_pos: Vec<Option<usize>>,
    pub msgs: Vec<Msg>,
    pub node_items: Vec<Option<usize>>,
    pub node_session: Vec<usize>,
    /// Real row of each node's last occurrence.
    pub node_last_row: Vec<usize>,
    pub node_last_row_opt: Vec<Option<usize>>,
    /// Global node of each real row.
    pub row_node: Vec<Option<usize>>,
    pub edge_src: Vec<usize>,
    pub edge_src_opt: Vec<Option<usize>>,
    pub edge_dst: Vec<Option<usize>>,
    pub edge_rel: Vec<Option<usize>>,
    /// `src * 4 + relation`: the softmax neighbourhood of each edge.
    pub edge_group: Vec<usize>,
    pub inv_lengths: Vec<f64>,
}

impl Layout {
    pub fn new(batch: &Batch) -> Result<Self> {
        let msgs = (0..batch.size())
            .map(|r| Msg::build(batch.prefix(r)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_graphs(batch, msgs)
    }

    pub fn with_graphs(batch: &Batch, msgs: Vec<Msg>) -> Result<Self> {
        let c = batch.size();
        if c == 0 || msgs.len() != c {
            return Err(RestcError::Contract("layout needs a nonempty batch with one graph per row".into()));
        }
        let max_len = *batch.lengths.iter().max().expect("nonempty");
        if max_len == 0 {
            return Err(RestcError::Contract("batch rows must hold at least one item".into()));
        }
        let width = max_len + 1;
        let mut lay = Layout {
            c,
            width,
            lengths: batch.lengths.clone(),
            tokens: Vec::with_capacity(c * width),
            positions: Vec::with_capacity(c * width),
            key_mask: Vec::with_capacity(c * width),
            cls_rows: Vec::with_capacity(c),
            real_rows: Vec::new(),
            seg: Vec::new(),
            seg_opt: Vec::new(),
            items: Vec::new(),
            rev_pos: Vec::new(),
            msgs: Vec::new(),
            node_items: Vec::new(),
            node_session: Vec::new(),
            node_last_row: Vec::new(),
            node_last_row_opt: Vec::new(),
            row_node: Vec::new(),
            edge_src: Vec::new(),
            edge_src_opt: Vec::new(),
            edge_dst: Vec::new(),
            edge_rel: Vec::new(),
            edge_group: Vec::new(),
            inv_lengths: batch.lengths.iter().map(|&m| 1.0 / m as f64).collect(),
        };
        for (r, msg) in msgs.into_iter().enumerate() {
            let row = batch.row(r);
            let m = batch.lengths[r];
            if msg.position_node.len() != m {
                return Err(RestcError::Contract(format!("graph for row {r} does not match its prefix")));
            }
            for j in 0..width {
                let tok = row.get(j).copied().unwrap_or(0);
                lay.tokens.push((tok != 0).then_some(tok));
                lay.positions.push(Some(j));
                lay.key_mask.push(j <= m);
            }
            lay.cls_rows.push(Some(r * width + m));

            let node_base = lay.node_items.len();
            let row_base = lay.real_rows.len();
            for (k, &item) in row[..m].iter().enumerate() {
                lay.real_rows.push(Some(r * width + k));
                lay.seg.push(r);
                lay.seg_opt.push(Some(r));
                lay.items.push(Some(item));
                lay.rev_pos.push(Some(m - 1 - k));
                lay.row_node.push(Some(node_base + msg.position_node[k]));
            }
            let mut last = vec![0; msg.num_nodes()];
            for (k, &node) in msg.position_node.iter().enumerate() {
                last[node] = row_base + k;
            }
            for (node, &item) in msg.nodes.iter().enumerate() {
                lay.node_items.push(Some(item));
                lay.node_session.push(r);
                lay.node_last_row.push(last[node]);
                lay.node_last_row_opt.push(Some(last[node]));
            }
            let mut has_edge = vec![false; msg.num_nodes()];
            for e in &msg.edges {
                has_edge[e.src] = true;
                let src = node_base + e.src;
                lay.edge_src.push(src);
                lay.edge_src_opt.push(Some(src));
                lay.edge_dst.push(Some(node_base + e.dst));
                lay.edge_rel.push(Some(e.rel.index()));
                lay.edge_group.push(src * Relation::COUNT + e.rel.index());
            }
            if let Some(node) = has_edge.iter().position(|&h| !h) {
                return Err(RestcError::Contract(format!("node {node} of row {r} has no outgoing edge")));
            }
            lay.msgs.push(msg);
        }
        Ok(lay)
    }

    pub fn num_real(&self) -> usize {
        self.real_rows.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_items.len()
    }
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub embedding: ParamId,
    pub temporal: TemporalIds,
    pub spatial: SpatialIds,
    pub cfg: CfgIds,
    pub fusion: FusionIds,
}

/// Parameter initializer: uniform(±1/√D) weights, zero biases, unit gains.
pub struct Init {
    rng: ChaCha8Rng,
    bound: f64,
}

impl Init {
    pub fn new(seed: u64, dim: usize) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: 1.0 / (dim as f64).sqrt(),
        }
    }

    pub fn uniform(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let b = self.bound;
        let data = (0..n).map(|_| self.rng.gen_range(-b..b)).collect();
        store.add(name, Tensor::new(shape.to_vec(), data).expect("valid shape"))
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, Tensor::full(shape, 1.0))
    }
}

/// Outputs of one forward pass. Per-position tensors are `[R, ·]` over the
/// layout's real rows; per-node tensors are `[U, ·]`.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Temporal view `[C, D]`, unit rows (zeros under `no_sestrans`).
    pub t: Var,
    /// Spatial view `[C, D]`.
    pub g: Var,
    pub s_h: Var,
    pub logits: Var,
    /// MGAT node embeddings `[U, D]` before position encoding.
    pub nodes: Var,
    pub h_exp: Var,
    pub z_s: Var,
    pub h_g: Var,
    /// Temporal-enhanced attention weights `[R]`.
    pub gamma: Option<Var>,
    /// Per-layer self-attention distributions `[C·heads, W, W]`.
    pub attention: Vec<Var>,
    /// MGAT attention per layer, over the layout's edges.
    pub alpha: Vec<Var>,
    pub beta: Var,
    pub rho: Var,
    pub cfg_embedding: Option<Var>,
}

pub struct Restc {
    pub config: TrainConfig,
    pub n_items: usize,
    pub max_len: usize,
    pub store: ParamStore,
    pub ids: ModelIds,
    propagation: Arc<CsrMatrix>,
}

impl Restc {
    /// `propagation` is the `[N+1, N+1]` CFG propagation matrix.
    pub fn new(config: TrainConfig, n_items: usize, max_len: usize, propagation: CsrMatrix) -> Result<Self> {
        config.validate()?;
        if n_items == 0 || max_len == 0 {
            return Err(RestcError::Contract("model needs at least one item and positive max length".into()));
        }
        if propagation.rows() != n_items + 1 || propagation.cols() != n_items + 1 {
            return Err(RestcError::Contract(format!(
                "propagation matrix is {}x{}, expected {}x{}",
                propagation.rows(),
                propagation.cols(),
                n_items + 1,
                n_items + 1
            )));
        }
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed, d);
        let embedding = init.uniform(&mut store, "embedding", &[n_items + 2, d]);
        store.get_mut(embedding).value.data_mut()[..d].fill(0.0);
        let temporal = TemporalIds::register(&mut store, &mut init, &config, max_len);
        let spatial = SpatialIds::register(&mut store, &mut init, &config, max_len);
        let cfg = CfgIds::register(&mut store, &mut init, &config);
        let fusion = FusionIds::register(&mut store, &mut init, d, n_items);
        Ok(Restc {
            config,
            n_items,
            max_len,
            store,
            ids: ModelIds { embedding, temporal, spatial, cfg, fusion },
            propagation: Arc::new(propagation),
        })
    }

    pub fn propagation(&self) -> &Arc<CsrMatrix> {
        &self.propagation
    }

    pub fn cls(&self) -> usize {
        self.n_items + 1
    }

    /// Batched forward pass. `cached_cfg` substitutes a precomputed `[N+1, D]`
    /// CFG embedding (held constant) for the per-step propagation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        layout: &Layout,
        dropout: &mut Dropout<'_>,
        cached_cfg: Option<&Tensor>,
    ) -> Result<ForwardOut> {
        let abl = self.config.ablations;
        let d = self.config.dim;
        let emb = b[self.ids.embedding];

        let (t, gamma, attention) = if abl.no_sestrans {
            (tape.constant(Tensor::zeros(&[layout.c, d])), None, Vec::new())
        } else {
            let out = temporal::forward(tape, b, &self.ids.temporal, emb, layout, &self.config, dropout)?;
            (out.t, Some(out.gamma), out.attention)
        };

        let (nodes, alpha) = spatial::mgat(tape, b, &self.ids.spatial, emb, layout, self.config.leaky_slope)?;
        let h_exp = tape.gather_rows(nodes, &layout.row_node)?;
        let p_rev = if abl.no_pe_g {
            tape.constant(Tensor::zeros(&[layout.num_real(), d]))
        } else {
            tape.gather_rows(b[self.ids.spatial.position], &layout.rev_pos)?
        };
        let sp = spatial::local_aggregation(tape, b, &self.ids.spatial, layout, h_exp, p_rev)?;

        let (z_s, cfg_embedding) = if abl.no_cfg {
            (tape.constant(Tensor::zeros(&[layout.num_real(), d])), None)
        } else {
            let z = match cached_cfg {
                Some(z) => tape.constant(z.clone()),
                None => cfg_encoder::propagate(
                    tape,
                    b,
                    &self.ids.cfg,
                    emb,
                    self.n_items,
                    &self.propagation,
                    self.config.leaky_slope,
                )?,
            };
            (tape.gather_rows(z, &layout.items)?, Some(z))
        };
        let h_g = cfg_encoder::enhance(tape, b, &self.ids.cfg, p_rev, h_exp, z_s)?;
        let fused = objectives::fuse(tape, b, &self.ids.fusion, layout, h_g, t, h_exp, z_s)?;
        let logits = tape.matmul(fused.s_h, b[self.ids.fusion.w_y])?;
        Ok(ForwardOut {
            t,
            g: sp.g,
            s_h: fused.s_h,
            logits,
            nodes,
            h_exp,
            z_s,
            h_g,
            gamma,
            attention,
            alpha,
            beta: sp.beta,
            rho: fused.rho,
            cfg_embedding,
        })
    }

    /// CFG embedding `[N+1, D]` under the current parameters.
    pub fn cfg_embedding(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let z = cfg_encoder::propagate(
            &mut tape,
            &b,
            &self.ids.cfg,
            b[self.ids.embedding],
            self.n_items,
            &self.propagation,
            self.config.leaky_slope,
        )?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode scores `[C, N]` and session embeddings `[C, D]`.
    pub fn infer(&self, batch: &Batch, cached_cfg: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let layout = Layout::new(batch)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &b, &layout, &mut Dropout::eval(), cached_cfg)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.s_h).clone()))
    }
}

/// `x̂ · γ + β` after row-wise standardization.
pub(crate) fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let g = tape.mul_row(n, gain)?;
    Ok(tape.add_row(g, bias)?)
}

/// `x · w + b`
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn layout_indices() {
        let batch = batch_of(&[&[3, 4, 3], &[5]], 6, 9);
        let lay = Layout::new(&batch).unwrap();
        assert_eq!(lay.width, 4);
        assert_eq!(lay.cls_rows, vec![Some(3), Some(5)]);
        assert_eq!(lay.real_rows, vec![Some(0), Some(1), Some(2), Some(4)]);
        assert_eq!(lay.seg, vec![0, 0, 0, 1]);
        assert_eq!(lay.rev_pos, vec![Some(2), Some(1), Some(0), Some(0)]);
        assert_eq!(lay.node_items, vec![Some(3), Some(4), Some(5)]);
        assert_eq!(lay.row_node, vec![Some(0), Some(1), Some(0), Some(2)]);
        assert_eq!(lay.node_last_row, vec![2, 1, 3]);
        assert_eq!(lay.tokens[4..8], [Some(5), Some(9), None, None]);
        assert_eq!(lay.key_mask[4..8], [true, true, false, false]);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let m = model(small_config(), 6, 5);
        let batch = batch_of(&[&[1, 2, 3], &[4, 4], &[6]], 5, m.cls());
        let lay = Layout::new(&batch).unwrap();
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape);
        let out = m.forward(&mut tape, &b, &lay, &mut Dropout::eval(), None).unwrap();
        assert_eq!(tape.shape(out.t), &[3, 4]);
        assert_eq!(tape.shape(out.g), &[3, 4]);
        assert_eq!(tape.shape(out.logits), &[3, 6]);
        assert!(tape.value(out.logits).is_finite());
    }

    #[test]
    fn padding_row_of_embedding_starts_zero() {
        let m = model(small_config(), 3, 2);
        assert!(m.store.value(m.ids.embedding).row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = Dropout::eval().apply(&mut tape, x).unwrap();
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Dropout::train(0.5, &mut rng).apply(&mut tape, x).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
