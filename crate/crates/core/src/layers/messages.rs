use std::sync::Arc;

use super::time_encode;
use crate::graph::{HeteroGraph, NormCoefficients};
use crate::numerics::Matrix;

/// A row that receives messages: a node, optionally restricted to incident
/// edges whose time window is at most `max_window`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub row: usize,
    pub max_window: Option<i64>,
}

impl Query {
    pub fn node(row: usize) -> Self {
        Self {
            row,
            max_window: None,
        }
    }
}

/// Per-query message lists in CSR form. Each query's first message is its
/// self-loop, followed by incident edges in ascending edge index.
#[derive(Clone, Debug, PartialEq)]
pub struct Messages {
    /// Input row of each query's own node.
    pub centers: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
    /// Input row each message comes from.
    pub src: Arc<[usize]>,
    /// Input row of the receiving node, per message.
    pub receiver: Arc<[usize]>,
    /// Edge weight times symmetric normalisation.
    pub coef: Arc<[f64]>,
    /// Time encoding of each message's offset inside its window.
    pub time: Matrix,
}

impl Messages {
    pub fn num_queries(&self) -> usize {
        self.centers.len()
    }

    pub fn num_messages(&self) -> usize {
        self.src.len()
    }
}

/// Builds [`Messages`] over a graph with fixed normalisation and window.
pub struct MessageBuilder<'a> {
    graph: &'a HeteroGraph,
    coeffs: &'a NormCoefficients,
    window_secs: i64,
    time_dim: usize,
}

impl<'a> MessageBuilder<'a> {
    pub fn new(
        graph: &'a HeteroGraph,
        coeffs: &'a NormCoefficients,
        window_secs: i64,
        time_dim: usize,
    ) -> Self {
        Self {
            graph,
            coeffs,
            window_secs,
            time_dim,
        }
    }

    pub fn graph(&self) -> &HeteroGraph {
        self.graph
    }

    pub fn window_of(&self, timestamp: i64) -> i64 {
        timestamp.div_euclid(self.window_secs)
    }

    /// Every node as a query over the full graph.
    pub fn full(&self) -> Messages {
        let queries: Vec<Query> = (0..self.graph.num_nodes()).map(Query::node).collect();
        self.build(&queries, Some, |_| true)
    }

    /// `local` maps a graph row into the input matrix (None drops the
    /// message); `keep` filters edges by index.
    pub fn build(
        &self,
        queries: &[Query],
        local: impl Fn(usize) -> Option<usize>,
        keep: impl Fn(usize) -> bool,
    ) -> Messages {
        let mut centers = Vec::with_capacity(queries.len());
        let mut offsets = Vec::with_capacity(queries.len() + 1);
        let mut src = Vec::new();
        let mut receiver = Vec::new();
        let mut coef = Vec::new();
        let mut time = Vec::new();
        let zero = time_encode(0.0, self.window_secs as f64, self.time_dim);
        offsets.push(0);
        for q in queries {
            let center = local(q.row).expect("query rows must be present in the input");
            centers.push(center);
            src.push(center);
            receiver.push(center);
            coef.push(self.coeffs.self_loop[q.row]);
            time.extend_from_slice(&zero);
            for inc in self.graph.incidence(q.row) {
                let edge = self.graph.edge(inc.edge);
                if !keep(inc.edge)
                    || q.max_window
                        .is_some_and(|w| self.window_of(edge.timestamp) > w)
                {
                    continue;
                }
                let Some(from) = local(inc.neighbor) else {
                    continue;
                };
                src.push(from);
                receiver.push(center);
                coef.push(edge.weight * self.coeffs.edge[inc.edge]);
                let offset = edge.timestamp.rem_euclid(self.window_secs) as f64;
                time.extend(time_encode(offset, self.window_secs as f64, self.time_dim));
            }
            offsets.push(src.len());
        }
        let m = src.len();
        Messages {
            centers: centers.into(),
            offsets: offsets.into(),
            src: src.into(),
            receiver: receiver.into(),
            coef: coef.into(),
            time: Matrix::from_vec(m, self.time_dim, time).expect("time encoding width"),
        }
    }

    /// Distinct windows of the edges incident to `row` that pass `keep`,
    /// ascending.
    pub fn steps(&self, row: usize, keep: impl Fn(usize) -> bool) -> Vec<i64> {
        let mut w: Vec<i64> = self
            .graph
            .incidence(row)
            .iter()
            .filter(|inc| keep(inc.edge))
            .map(|inc| self.window_of(self.graph.edge(inc.edge).timestamp))
            .collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    /// One query per step of the user at `row`. A node with no incident
    /// edges gets a single unrestricted step.
    pub fn step_queries(&self, row: usize, keep: impl Fn(usize) -> bool) -> Vec<Query> {
        let steps = self.steps(row, keep);
        if steps.is_empty() {
            return vec![Query::node(row)];
        }
        steps
            .into_iter()
            .map(|w| Query {
                row,
                max_window: Some(w),
            })
            .collect()
    }
}
