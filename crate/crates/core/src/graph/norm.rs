use super::HeteroGraph;

/// Symmetric normalisation coefficients with a self-loop on every node.
#[derive(Clone, Debug, PartialEq)]
pub struct NormCoefficients {
    /// `1/√(d_src·d_dst)` per edge, degrees including the self-loop.
    pub edge: Vec<f64>,
    /// `1/d` per node for its self-loop.
    pub self_loop: Vec<f64>,
}

impl NormCoefficients {
    /// Computes coefficients from per-node degrees that exclude self-loops.
    pub fn from_degrees(graph: &HeteroGraph, degrees: &[usize]) -> Self {
        let edge = graph
            .edges()
            .iter()
            .map(|e| {
                let ds = (degrees[graph.row(e.src)] + 1) as f64;
                let dd = (degrees[graph.row(e.dst)] + 1) as f64;
                1.0 / (ds * dd).sqrt()
            })
            .collect();
        let self_loop = degrees.iter().map(|&d| 1.0 / (d + 1) as f64).collect();
        Self { edge, self_loop }
    }
}

pub fn sym_norm(graph: &HeteroGraph) -> NormCoefficients {
    NormCoefficients::from_degrees(graph, graph.degrees())
}
