//! Message-passing layers: per-kind input projection, GCN aggregation and
//! multi-head temporal graph attention.

mod messages;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use messages::{MessageBuilder, Messages, Query};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeKind};
use crate::ingest::HOUR;
use crate::numerics::{Activation, Matrix, MessageWeights, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    /// Attention with heads concatenated, ReLU output.
    GatConcat,
    /// Attention with heads averaged, linear output; final layer only.
    GatMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub window_secs: i64,
    pub layers: Vec<LayerKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            time_dim: 8,
            window_secs: 6 * HOUR,
            layers: vec![LayerKind::Gcn, LayerKind::GatConcat, LayerKind::GatMean],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("dim and heads must be positive".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even, got {}",
                self.time_dim
            )));
        }
        if self.window_secs <= 0 {
            return Err(Error::Config("window_secs must be positive".into()));
        }
        let n = self.layers.len();
        for (i, &l) in self.layers.iter().enumerate() {
            let last = i + 1 == n;
            if l == LayerKind::GatMean && !last {
                return Err(Error::Config(
                    "mean-combined attention is only allowed as the final layer".into(),
                ));
            }
            if l == LayerKind::GatConcat && last {
                return Err(Error::Config(
                    "the final attention layer must average its heads".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-head width of attention layer `l`.
    pub fn head_width(&self, l: usize) -> usize {
        match self.layers[l] {
            LayerKind::GatConcat => self.dim.div_ceil(self.heads),
            _ => self.dim,
        }
    }

    /// `(input, output)` widths of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut width = self.dim;
        (0..self.layers.len())
            .map(|l| {
                let out = match self.layers[l] {
                    LayerKind::Gcn | LayerKind::GatMean => self.dim,
                    LayerKind::GatConcat => self.head_width(l) * self.heads,
                };
                let pair = (width, out);
                width = out;
                pair
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims().last().map_or(self.dim, |d| d.1)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

pub fn proj_name(kind: NodeKind, part: &str) -> String {
    format!("proj.{}.{part}", kind.as_str())
}

fn gcn_name(l: usize) -> String {
    format!("layer{l}.gcn.w")
}

fn head_name(l: usize, head: usize, part: &str) -> String {
    format!("layer{l}.gat.h{head}.{part}")
}

/// Glorot-initialised weights, zero biases.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    for kind in NodeKind::ALL {
        store.insert_glorot(proj_name(kind, "w"), kind.feature_dim(), cfg.dim, rng);
        store.insert(proj_name(kind, "b"), Matrix::zeros(1, cfg.dim));
    }
    for (l, (din, dout)) in cfg.layer_dims().into_iter().enumerate() {
        match cfg.layers[l] {
            LayerKind::Gcn => store.insert_glorot(gcn_name(l), din, dout, rng),
            LayerKind::GatConcat | LayerKind::GatMean => {
                let hw = cfg.head_width(l);
                for h in 0..cfg.heads {
                    store.insert_glorot(head_name(l, h, "w"), din, hw, rng);
                    store.insert_glorot(head_name(l, h, "a_dst"), hw, 1, rng);
                    store.insert_glorot(head_name(l, h, "a_src"), hw, 1, rng);
                    if cfg.time_dim > 0 {
                        store.insert_glorot(head_name(l, h, "a_time"), cfg.time_dim, 1, rng);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parameters for the layer stack alone, seeded.
pub fn init_stack(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_params(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

/// Sinusoidal encoding of an offset `t` inside a window of `window` seconds.
pub fn time_encode(t: f64, window: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let omega = 10f64.powf(-4.0 * i as f64 / dim as f64);
        let phase = omega * t / window;
        out.push(phase.cos());
        out.push(phase.sin());
    }
    out
}

/// Projects the feature rows of `rows` (graph rows, any order) into the
/// shared embedding space.
pub fn project(
    tape: &mut Tape,
    params: &ParamStore,
    graph: &HeteroGraph,
    rows: &[usize],
) -> Result<Var> {
    let mut blocks = Vec::with_capacity(3);
    let mut positions = vec![0usize; rows.len()];
    let mut stacked = 0;
    for kind in NodeKind::ALL {
        let members: Vec<usize> = (0..rows.len())
            .filter(|&i| graph.node_at(rows[i]).kind == kind)
            .collect();
        let dim = kind.feature_dim();
        let mut values = Vec::with_capacity(members.len() * dim);
        for &i in &members {
            values.extend_from_slice(graph.features(graph.node_at(rows[i])));
            positions[i] = stacked;
            stacked += 1;
        }
        let x = tape.constant(Matrix::from_vec(members.len(), dim, values)?);
        let w = tape.param(params, &proj_name(kind, "w"))?;
        let b = tape.param(params, &proj_name(kind, "b"))?;
        blocks.push(tape.affine(x, w, b)?);
    }
    let all = tape.concat_rows(&blocks)?;
    tape.gather_rows(all, positions.into())
}

/// `ReLU(Σ_u coef_vu · h_u W)` over each query's messages.
pub fn gcn_forward(
    tape: &mut Tape,
    params: &ParamStore,
    l: usize,
    h: Var,
    msgs: &Messages,
) -> Result<Var> {
    let w = tape.param(params, &gcn_name(l))?;
    let z = tape.matmul(h, w)?;
    let agg = tape.aggregate(
        z,
        MessageWeights::Fixed(msgs.coef.clone()),
        msgs.src.clone(),
        msgs.offsets.clone(),
    )?;
    Ok(tape.activate(agg, Activation::Relu))
}

/// Output of one attention layer: embeddings and per-head attention over
/// messages (column vectors, one entry per message).
pub struct GatOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

pub fn gat_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    l: usize,
    h: Var,
    msgs: &Messages,
) -> Result<GatOutput> {
    let time = (cfg.time_dim > 0).then(|| tape.constant(msgs.time.clone()));
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for k in 0..cfg.heads {
        let w = tape.param(params, &head_name(l, k, "w"))?;
        let a_dst = tape.param(params, &head_name(l, k, "a_dst"))?;
        let a_src = tape.param(params, &head_name(l, k, "a_src"))?;
        let z = tape.matmul(h, w)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let s_src = tape.matmul(z, a_src)?;
        let per_dst = tape.gather_rows(s_dst, msgs.receiver.clone())?;
        let per_src = tape.gather_rows(s_src, msgs.src.clone())?;
        let mut logit = tape.add(per_dst, per_src)?;
        if let Some(t) = time {
            let a_time = tape.param(params, &head_name(l, k, "a_time"))?;
            let tt = tape.matmul(t, a_time)?;
            logit = tape.add(logit, tt)?;
        }
        let logit = tape.activate(logit, Activation::LeakyRelu);
        let alpha = tape.segment_softmax(logit, msgs.offsets.clone())?;
        let agg = tape.aggregate(
            z,
            MessageWeights::Learned(alpha),
            msgs.src.clone(),
            msgs.offsets.clone(),
        )?;
        heads.push(agg);
        attention.push(alpha);
    }
    let out = match cfg.layers[l] {
        LayerKind::GatConcat => {
            let cat = tape.concat_cols(&heads)?;
            tape.activate(cat, Activation::Relu)
        }
        _ => {
            let mut sum = heads[0];
            for &hk in &heads[1..] {
                sum = tape.add(sum, hk)?;
            }
            tape.scale(sum, 1.0 / cfg.heads as f64)
        }
    };
    Ok(GatOutput { out, attention })
}

/// Applies layer `l` of the stack to input rows `h`.
pub fn layer_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    l: usize,
    h: Var,
    msgs: &Messages,
) -> Result<GatOutput> {
    match cfg.layers[l] {
        LayerKind::Gcn => Ok(GatOutput {
            out: gcn_forward(tape, params, l, h, msgs)?,
            attention: Vec::new(),
        }),
        LayerKind::GatConcat | LayerKind::GatMean => gat_forward(tape, params, cfg, l, h, msgs),
    }
}

pub struct StackOutput {
    /// One row per final query.
    pub out: Var,
    /// Attention per layer (empty for GCN layers), per head.
    pub attention: Vec<Vec<Var>>,
}

/// Runs every layer but the last over the whole graph (`full`, indexed by
/// graph row) and the last over `final_queries`. A depth-0 stack returns
/// the projected rows of the queries' centres.
pub fn stack_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    graph: &HeteroGraph,
    full: &Messages,
    final_queries: &Messages,
) -> Result<StackOutput> {
    let rows: Vec<usize> = (0..graph.num_nodes()).collect();
    let mut h = project(tape, params, graph, &rows)?;
    let depth = cfg.depth();
    if depth == 0 {
        let out = tape.gather_rows(h, final_queries.centers.clone())?;
        return Ok(StackOutput {
            out,
            attention: Vec::new(),
        });
    }
    let mut attention = Vec::with_capacity(depth);
    for l in 0..depth - 1 {
        let o = layer_forward(tape, params, cfg, l, h, full)?;
        h = o.out;
        attention.push(o.attention);
    }
    let o = layer_forward(tape, params, cfg, depth - 1, h, final_queries)?;
    attention.push(o.attention);
    Ok(StackOutput {
        out: o.out,
        attention,
    })
}

/// Final embeddings of every node on the full graph.
pub fn full_embeddings(
    params: &ParamStore,
    cfg: &ModelConfig,
    graph: &HeteroGraph,
    builder: &MessageBuilder<'_>,
) -> Result<Matrix> {
    let full = builder.full();
    let mut tape = Tape::new();
    let out = stack_forward(&mut tape, params, cfg, graph, &full, &full)?.out;
    Ok(tape.value(out).clone())
}
