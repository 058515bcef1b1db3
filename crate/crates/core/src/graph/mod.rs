//! Typed heterogeneous user/ad/platform graph.

mod build;
mod identity;
mod io;
mod norm;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NUM_ATTRS;

pub use build::{
    build_graph, cross_platform_weight, derive_cross_platform_edges, CrossPlatformConfig,
};
pub use identity::{unify_users, IdentityMap, MergeRecord, MergeRule, UnifyConfig};
pub use io::{read_graph, write_graph};
pub use norm::{sym_norm, NormCoefficients};

pub const USER_FEATURES: usize = 11;
pub const AD_FEATURES: usize = 8;
pub const PLATFORM_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Ad,
    Platform,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::User, NodeKind::Ad, NodeKind::Platform];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Ad => "ad",
            NodeKind::Platform => "platform",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            NodeKind::User => USER_FEATURES,
            NodeKind::Ad => AD_FEATURES,
            NodeKind::Platform => PLATFORM_FEATURES,
        }
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NodeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown node kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeRef {
    pub fn user(index: usize) -> Self {
        Self {
            kind: NodeKind::User,
            index,
        }
    }

    pub fn ad(index: usize) -> Self {
        Self {
            kind: NodeKind::Ad,
            index,
        }
    }

    pub fn platform(index: usize) -> Self {
        Self {
            kind: NodeKind::Platform,
            index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserNode {
    pub unified_user_id: String,
    pub features: [f64; USER_FEATURES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdNode {
    pub ad_id: String,
    pub features: [f64; AD_FEATURES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformNode {
    pub platform_id: String,
    pub features: [f64; PLATFORM_FEATURES],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ViewPlatform,
    ClickAd,
    BrowseUser,
    ViewCrossPlatform,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::ViewPlatform,
        EdgeKind::ClickAd,
        EdgeKind::BrowseUser,
        EdgeKind::ViewCrossPlatform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::ViewPlatform => "view_platform",
            EdgeKind::ClickAd => "click_ad",
            EdgeKind::BrowseUser => "browse_user",
            EdgeKind::ViewCrossPlatform => "view_cross_platform",
        }
    }

    /// Legal `(src, dst)` endpoint kinds.
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            EdgeKind::ViewPlatform | EdgeKind::ViewCrossPlatform => {
                (NodeKind::User, NodeKind::Platform)
            }
            EdgeKind::ClickAd => (NodeKind::User, NodeKind::Ad),
            EdgeKind::BrowseUser => (NodeKind::Ad, NodeKind::User),
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EdgeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown edge kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub src: NodeRef,
    pub dst: NodeRef,
    /// Normalised attributes.
    pub attrs: [f64; NUM_ATTRS],
    pub weight: f64,
    /// Raw event time in epoch seconds.
    pub timestamp: i64,
}

impl Edge {
    fn validate(&self) -> Result<()> {
        let (s, d) = self.kind.endpoints();
        if self.src.kind != s || self.dst.kind != d {
            return Err(Error::Input(format!(
                "{} edge cannot connect {} to {}",
                self.kind,
                self.src.kind.as_str(),
                self.dst.kind.as_str()
            )));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::Input(format!(
                "edge weight {} outside [0, 1]",
                self.weight
            )));
        }
        if self.attrs.iter().any(|a| !a.is_finite()) {
            return Err(Error::Input("non-finite edge attribute".into()));
        }
        Ok(())
    }
}

/// Incidence entry: edge index plus the node on the other end (global row).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Incidence {
    pub edge: usize,
    pub neighbor: usize,
}

/// Users, ads and platforms with typed, attributed edges.
///
/// Nodes are addressed either by [`NodeRef`] or by a global row: users
/// first, then ads, then platforms.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub users: Vec<UserNode>,
    pub ads: Vec<AdNode>,
    pub platforms: Vec<PlatformNode>,
    edges: Vec<Edge>,
    by_kind: [Vec<usize>; 4],
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    incidence: Vec<Vec<Incidence>>,
    degrees: Vec<usize>,
}

impl HeteroGraph {
    /// Validates edges, drops exact `(src, dst, kind, timestamp)` duplicates
    /// (first occurrence wins) and builds adjacency.
    pub fn new(
        users: Vec<UserNode>,
        ads: Vec<AdNode>,
        platforms: Vec<PlatformNode>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let mut g = HeteroGraph {
            users,
            ads,
            platforms,
            edges: Vec::new(),
            by_kind: Default::default(),
            out_edges: Vec::new(),
            in_edges: Vec::new(),
            incidence: Vec::new(),
            degrees: Vec::new(),
        };
        g.append_edges(edges)?;
        Ok(g)
    }

    pub(crate) fn append_edges(&mut self, new_edges: Vec<Edge>) -> Result<()> {
        let mut seen: HashSet<(NodeRef, NodeRef, EdgeKind, i64)> = self
            .edges
            .iter()
            .map(|e| (e.src, e.dst, e.kind, e.timestamp))
            .collect();
        for e in new_edges {
            e.validate()?;
            for r in [e.src, e.dst] {
                if r.index >= self.kind_len(r.kind) {
                    return Err(Error::Input(format!(
                        "{} node {} out of range ({} nodes)",
                        r.kind.as_str(),
                        r.index,
                        self.kind_len(r.kind)
                    )));
                }
            }
            if seen.insert((e.src, e.dst, e.kind, e.timestamp)) {
                self.edges.push(e);
            }
        }
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        let n = self.num_nodes();
        self.by_kind = Default::default();
        self.out_edges = vec![Vec::new(); n];
        self.in_edges = vec![Vec::new(); n];
        self.incidence = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            let (s, d) = (self.row(e.src), self.row(e.dst));
            self.by_kind[e.kind as usize].push(i);
            self.out_edges[s].push(i);
            self.in_edges[d].push(i);
            self.incidence[s].push(Incidence {
                edge: i,
                neighbor: d,
            });
            self.incidence[d].push(Incidence {
                edge: i,
                neighbor: s,
            });
        }
        self.degrees = self.incidence.iter().map(Vec::len).collect();
    }

    pub fn kind_len(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => self.users.len(),
            NodeKind::Ad => self.ads.len(),
            NodeKind::Platform => self.platforms.len(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.users.len() + self.ads.len() + self.platforms.len()
    }

    pub fn kind_offset(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => 0,
            NodeKind::Ad => self.users.len(),
            NodeKind::Platform => self.users.len() + self.ads.len(),
        }
    }

    #[inline]
    pub fn row(&self, r: NodeRef) -> usize {
        self.kind_offset(r.kind) + r.index
    }

    pub fn node_at(&self, row: usize) -> NodeRef {
        let (u, a) = (self.users.len(), self.ads.len());
        if row < u {
            NodeRef::user(row)
        } else if row < u + a {
            NodeRef::ad(row - u)
        } else {
            NodeRef::platform(row - u - a)
        }
    }

    pub fn features(&self, r: NodeRef) -> &[f64] {
        match r.kind {
            NodeKind::User => &self.users[r.index].features,
            NodeKind::Ad => &self.ads[r.index].features,
            NodeKind::Platform => &self.platforms[r.index].features,
        }
    }

    pub fn node_id(&self, r: NodeRef) -> &str {
        match r.kind {
            NodeKind::User => &self.users[r.index].unified_user_id,
            NodeKind::Ad => &self.ads[r.index].ad_id,
            NodeKind::Platform => &self.platforms[r.index].platform_id,
        }
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, i: usize) -> &Edge {
        &self.edges[i]
    }

    pub fn edges_of_kind(&self, kind: EdgeKind) -> impl Iterator<Item = &Edge> {
        self.by_kind[kind as usize].iter().map(|&i| &self.edges[i])
    }

    pub fn out_edges(&self, row: usize) -> &[usize] {
        &self.out_edges[row]
    }

    pub fn in_edges(&self, row: usize) -> &[usize] {
        &self.in_edges[row]
    }

    /// Incident edges of a node in ascending edge-index order.
    pub fn incidence(&self, row: usize) -> &[Incidence] {
        &self.incidence[row]
    }

    /// Number of incident edges, all kinds, self-loop excluded.
    pub fn degree(&self, row: usize) -> usize {
        self.degrees[row]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn find_user(&self, unified_id: &str) -> Option<usize> {
        self.users
            .iter()
            .position(|u| u.unified_user_id == unified_id)
    }

    pub fn find_ad(&self, ad_id: &str) -> Option<usize> {
        self.ads
            .binary_search_by(|a| a.ad_id.as_str().cmp(ad_id))
            .ok()
    }

    pub fn find_platform(&self, platform_id: &str) -> Option<usize> {
        self.platforms
            .iter()
            .position(|p| p.platform_id == platform_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(id: &str) -> UserNode {
        UserNode {
            unified_user_id: id.into(),
            features: [0.0; USER_FEATURES],
        }
    }

    fn edge(kind: EdgeKind, src: NodeRef, dst: NodeRef, ts: i64) -> Edge {
        Edge {
            kind,
            src,
            dst,
            attrs: [0.0; NUM_ATTRS],
            weight: 1.0,
            timestamp: ts,
        }
    }

    fn tiny() -> HeteroGraph {
        HeteroGraph::new(
            vec![user("u0"), user("u1")],
            vec![AdNode {
                ad_id: "a0".into(),
                features: [0.0; AD_FEATURES],
            }],
            vec![PlatformNode {
                platform_id: "P".into(),
                features: [0.0; PLATFORM_FEATURES],
            }],
            vec![
                edge(EdgeKind::ClickAd, NodeRef::user(0), NodeRef::ad(0), 10),
                edge(EdgeKind::ClickAd, NodeRef::user(0), NodeRef::ad(0), 10),
                edge(EdgeKind::ClickAd, NodeRef::user(0), NodeRef::ad(0), 11),
                edge(EdgeKind::BrowseUser, NodeRef::ad(0), NodeRef::user(1), 12),
                edge(
                    EdgeKind::ViewPlatform,
                    NodeRef::user(1),
                    NodeRef::platform(0),
                    13,
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn duplicates_dropped_and_degrees_cached() {
        let g = tiny();
        assert_eq!(g.edges().len(), 4);
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.degree(2), 3);
        assert_eq!(g.degree(3), 1);
        assert_eq!(g.edges_of_kind(EdgeKind::ClickAd).count(), 2);
        assert_eq!(g.out_edges(2), &[2]);
        assert_eq!(g.in_edges(2), &[0, 1]);
    }

    #[test]
    fn degree_cache_matches_recount() {
        let g = tiny();
        for row in 0..g.num_nodes() {
            let recount = g
                .edges()
                .iter()
                .filter(|e| g.row(e.src) == row || g.row(e.dst) == row)
                .count();
            assert_eq!(g.degree(row), recount);
        }
    }

    #[test]
    fn illegal_endpoints_rejected() {
        let err = HeteroGraph::new(
            vec![user("u0")],
            vec![],
            vec![PlatformNode {
                platform_id: "P".into(),
                features: [0.0; PLATFORM_FEATURES],
            }],
            vec![edge(
                EdgeKind::ClickAd,
                NodeRef::user(0),
                NodeRef::platform(0),
                1,
            )],
        );
        assert!(err.is_err());
        let mut bad_weight = edge(
            EdgeKind::ViewPlatform,
            NodeRef::user(0),
            NodeRef::platform(0),
            1,
        );
        bad_weight.weight = 1.5;
        assert!(HeteroGraph::new(
            vec![user("u0")],
            vec![],
            vec![PlatformNode {
                platform_id: "P".into(),
                features: [0.0; PLATFORM_FEATURES],
            }],
            vec![bad_weight],
        )
        .is_err());
    }

    #[test]
    fn row_mapping_round_trips() {
        let g = tiny();
        for row in 0..g.num_nodes() {
            assert_eq!(g.row(g.node_at(row)), row);
        }
        assert_eq!(g.node_at(3), NodeRef::platform(0));
    }
}
