//! Runs the layer stack over a graph and exposes the per-step user states and
//! ad embeddings the scorer consumes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{sym_norm, HeteroGraph, NodeKind, NodeRef, NormCoefficients};
use crate::layers::{stack_forward, MessageBuilder, Messages, ModelConfig, Query};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::scorer::UserSequence;

/// Stack output for a set of users and ads, still on the tape.
pub struct Encoded {
    /// Step states of every requested user, stacked in request order.
    pub states: Var,
    /// `user_offsets[i]..user_offsets[i + 1]` are the rows of user `i`.
    pub user_offsets: Vec<usize>,
    /// Window index of every stacked step.
    pub windows: Vec<i64>,
    pub ads: Var,
}

/// Graph-side state shared by every forward pass over one graph.
pub struct Encoder<'g> {
    graph: &'g HeteroGraph,
    cfg: ModelConfig,
    coeffs: NormCoefficients,
    full: Messages,
    user_rows: HashMap<String, usize>,
    ad_rows: HashMap<String, usize>,
}

impl<'g> Encoder<'g> {
    pub fn new(graph: &'g HeteroGraph, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let coeffs = sym_norm(graph);
        let full = MessageBuilder::new(graph, &coeffs, cfg.window_secs, cfg.time_dim).full();
        let user_rows = graph
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.unified_user_id.clone(), i))
            .collect();
        let ad_rows = graph
            .ads
            .iter()
            .enumerate()
            .map(|(i, a)| (a.ad_id.clone(), i))
            .collect();
        Ok(Self {
            graph,
            cfg: cfg.clone(),
            coeffs,
            full,
            user_rows,
            ad_rows,
        })
    }

    pub fn graph(&self) -> &'g HeteroGraph {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn coefficients(&self) -> &NormCoefficients {
        &self.coeffs
    }

    pub fn builder(&self) -> MessageBuilder<'_> {
        MessageBuilder::new(
            self.graph,
            &self.coeffs,
            self.cfg.window_secs,
            self.cfg.time_dim,
        )
    }

    /// User index of a unified id.
    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_rows.get(id).copied()
    }

    /// Ad index of an ad id.
    pub fn ad_index(&self, id: &str) -> Option<usize> {
        self.ad_rows.get(id).copied()
    }

    /// Step queries of user `u` (a user index, not a graph row).
    pub fn user_steps(&self, u: usize) -> Vec<Query> {
        self.builder()
            .step_queries(self.graph.row(NodeRef::user(u)), |_| true)
    }

    /// Runs the stack with the last layer restricted to the steps of `users`
    /// and the nodes of `ads` (kind indices).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        users: &[usize],
        ads: &[usize],
    ) -> Result<Encoded> {
        let builder = self.builder();
        let mut queries = Vec::new();
        let mut user_offsets = vec![0];
        let mut windows = Vec::new();
        for &u in users {
            for q in self.user_steps(u) {
                windows.push(q.max_window.unwrap_or(i64::MAX));
                queries.push(q);
            }
            user_offsets.push(queries.len());
        }
        let n_steps = queries.len();
        queries.extend(
            ads.iter()
                .map(|&a| Query::node(self.graph.row(NodeRef::ad(a)))),
        );
        let last = builder.build(&queries, Some, |_| true);
        let out = stack_forward(tape, params, &self.cfg, self.graph, &self.full, &last)?.out;
        let states = tape.gather_rows(out, (0..n_steps).collect::<Vec<_>>().into())?;
        let ads = tape.gather_rows(out, (n_steps..queries.len()).collect::<Vec<_>>().into())?;
        Ok(Encoded {
            states,
            user_offsets,
            windows,
            ads,
        })
    }

    /// Concrete sequences and ad embeddings, without gradients.
    pub fn embed(
        &self,
        params: &ParamStore,
        users: &[usize],
        ads: &[usize],
    ) -> Result<(Vec<UserSequence>, Matrix)> {
        let mut tape = Tape::new();
        let enc = self.forward(&mut tape, params, users, ads)?;
        let states = tape.value(enc.states);
        let seqs = users
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let (lo, hi) = (enc.user_offsets[i], enc.user_offsets[i + 1]);
                UserSequence {
                    user: self.graph.users[u].unified_user_id.clone(),
                    windows: enc.windows[lo..hi].to_vec(),
                    states: states.gather_rows(&(lo..hi).collect::<Vec<_>>()),
                }
            })
            .collect();
        Ok((seqs, tape.value(enc.ads).clone()))
    }
}

/// Checks that every stack and scorer parameter has the shape `cfg` implies.
pub fn check_params(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let expected = crate::scorer::init_model(cfg, 0)?;
    for (name, m) in expected.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model is missing parameter {name}")))?;
        if got.shape() != m.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                got.shape(),
                m.shape()
            )));
        }
    }
    Ok(())
}

/// Ids of every node of `kind`, in kind order.
pub fn node_ids(graph: &HeteroGraph, kind: NodeKind) -> Vec<String> {
    (0..graph.kind_len(kind))
        .map(|i| graph.node_id(NodeRef { kind, index: i }).to_string())
        .collect()
}
