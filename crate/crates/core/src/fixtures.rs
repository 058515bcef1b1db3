//! Small random graphs for tests, checks and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    AdNode, Edge, EdgeKind, HeteroGraph, NodeRef, PlatformNode, UserNode, AD_FEATURES,
    PLATFORM_FEATURES, USER_FEATURES,
};
use crate::ingest::NUM_ATTRS;

fn features<const N: usize>(rng: &mut ChaCha8Rng) -> [f64; N] {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

/// Node tables with uniform features in `[-1, 1)` and no edges.
pub fn random_nodes(
    rng: &mut ChaCha8Rng,
    users: usize,
    ads: usize,
    platforms: usize,
) -> HeteroGraph {
    HeteroGraph::new(
        (0..users)
            .map(|i| UserNode {
                unified_user_id: format!("u{i:04}"),
                features: features::<USER_FEATURES>(rng),
            })
            .collect(),
        (0..ads)
            .map(|i| AdNode {
                ad_id: format!("a{i:04}"),
                features: features::<AD_FEATURES>(rng),
            })
            .collect(),
        (0..platforms)
            .map(|i| PlatformNode {
                platform_id: format!("p{i}"),
                features: features::<PLATFORM_FEATURES>(rng),
            })
            .collect(),
        Vec::new(),
    )
    .expect("edge-free graph is valid")
}

/// A random edge of a random legal kind between existing nodes.
pub fn random_edge(
    rng: &mut ChaCha8Rng,
    users: usize,
    ads: usize,
    platforms: usize,
    t0: i64,
) -> Edge {
    let kinds: Vec<EdgeKind> = EdgeKind::ALL
        .into_iter()
        .filter(|k| match k {
            EdgeKind::ClickAd | EdgeKind::BrowseUser => ads > 0,
            _ => platforms > 0,
        })
        .collect();
    let kind = kinds[rng.random_range(0..kinds.len())];
    let user = NodeRef::user(rng.random_range(0..users));
    let (src, dst) = match kind {
        EdgeKind::ClickAd => (user, NodeRef::ad(rng.random_range(0..ads))),
        EdgeKind::BrowseUser => (NodeRef::ad(rng.random_range(0..ads)), user),
        _ => (user, NodeRef::platform(rng.random_range(0..platforms))),
    };
    let weight = if kind == EdgeKind::ViewCrossPlatform {
        rng.random_range(0.85..=1.0)
    } else {
        1.0
    };
    Edge {
        kind,
        src,
        dst,
        attrs: features::<NUM_ATTRS>(rng),
        weight,
        timestamp: t0 + rng.random_range(0..7 * 86_400),
    }
}

/// Random heterogeneous graph with roughly `edges` edges (exact duplicates
/// are dropped).
pub fn random_graph(
    seed: u64,
    users: usize,
    ads: usize,
    platforms: usize,
    edges: usize,
) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = random_nodes(&mut rng, users, ads, platforms);
    let list = (0..edges)
        .map(|_| random_edge(&mut rng, users, ads, platforms, 1_700_000_000))
        .collect();
    g.append_edges(list).expect("fixture edges are legal");
    g
}

/// Random graph with a total node count of `nodes` (at least 3).
pub fn random_graph_of_size(seed: u64, nodes: usize, density: f64) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let nodes = nodes.max(3);
    let platforms = rng.random_range(1..=3.min(nodes - 2));
    let ads = rng.random_range(1..=(nodes - platforms - 1));
    let users = nodes - platforms - ads;
    let edges = ((nodes as f64) * density).round() as usize;
    random_graph(seed, users, ads, platforms, edges)
}

/// One user clicking `leaves` distinct ads.
pub fn star_graph(leaves: usize) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(leaves as u64);
    let mut g = random_nodes(&mut rng, 1, leaves, 0);
    let edges = (0..leaves)
        .map(|i| Edge {
            kind: EdgeKind::ClickAd,
            src: NodeRef::user(0),
            dst: NodeRef::ad(i),
            attrs: [0.0; NUM_ATTRS],
            weight: 1.0,
            timestamp: 1_700_000_000 + i as i64,
        })
        .collect();
    g.append_edges(edges).expect("star edges are legal");
    g
}
