use proptest::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use super::*;
use crate::fixtures::{random_graph, random_graph_of_size, star_graph};
use crate::graph::NodeRef;
use crate::layers::{full_embeddings, LayerKind, ModelConfig};
use crate::scorer::init_model;

fn cfg() -> ModelConfig {
    ModelConfig {
        dim: 4,
        heads: 2,
        time_dim: 2,
        window_secs: 6 * 3600,
        layers: vec![LayerKind::Gcn, LayerKind::GatConcat, LayerKind::GatMean],
    }
}

fn exact(now: i64) -> InferOptions {
    InferOptions {
        k: 3,
        rate: 1.0,
        ..InferOptions::new(now)
    }
}

fn cold() -> EmbedCache {
    EmbedCache::new(10_000, DEFAULT_CACHE_WINDOW_SECS).unwrap()
}

/// Breadth-first distances over an explicit undirected edge list.
fn bfs(graph: &HeteroGraph, seeds: &[usize], edges: &[usize]) -> HashMap<usize, usize> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &e in edges {
        let edge = graph.edge(e);
        let (a, b) = (graph.row(edge.src), graph.row(edge.dst));
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut dist: HashMap<usize, usize> = seeds.iter().map(|&s| (s, 0)).collect();
    let mut queue: std::collections::VecDeque<usize> = seeds.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        for &u in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if !dist.contains_key(&u) {
                dist.insert(u, dist[&v] + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

#[test]
fn star_closure_and_zero_hops() {
    let g = star_graph(30);
    let center = g.row(NodeRef::user(0));
    let b = sample_khop(&g, &[center], 1, 1.0, 4).unwrap();
    assert_eq!(b.num_nodes(), 31);
    assert_eq!(b.edges.len(), 30);
    assert!((0..30).all(|a| b.hop(g.row(NodeRef::ad(a))) == Some(1)));

    let b = sample_khop(&g, &[center], 0, 0.5, 4).unwrap();
    assert_eq!(b.num_nodes(), 1);
    assert!(b.edges.is_empty());
    assert_eq!(b.hops, vec![vec![center]]);
}

#[test]
fn sampling_rejects_bad_arguments() {
    let g = star_graph(3);
    assert!(sample_khop(&g, &[], 1, 0.5, 0).is_err());
    assert!(sample_khop(&g, &[0], 1, 0.0, 0).is_err());
    assert!(sample_khop(&g, &[0], 1, 1.5, 0).is_err());
    assert!(sample_khop(&g, &[99], 1, 0.5, 0).is_err());
}

#[test]
fn sampled_star_counts_follow_the_binomial() {
    let g = star_graph(1000);
    let bin = Binomial::new(0.15, 1000).unwrap();
    let (lo, hi) = (bin.inverse_cdf(0.005), bin.inverse_cdf(0.995));
    let inside = (0..50)
        .filter(|&s| {
            let n = sample_khop(&g, &[0], 1, 0.15, s).unwrap().hops[1].len() as u64;
            (lo..=hi).contains(&n)
        })
        .count();
    assert!(inside >= 48, "{inside}/50 inside [{lo}, {hi}]");
}

#[test]
fn memory_model_arithmetic() {
    let g = random_graph(1, 3, 3, 1, 8);
    assert_eq!(estimate_memory(&g, &SubgraphBatch::default(), 128), 0);
    let one = sample_khop(&g, &[g.row(NodeRef::user(0))], 0, 1.0, 0).unwrap();
    assert_eq!(estimate_memory(&g, &one, 128), 1112);
    let ad = sample_khop(&g, &[g.row(NodeRef::ad(0))], 0, 1.0, 0).unwrap();
    let both = sample_khop(
        &g,
        &[g.row(NodeRef::user(0)), g.row(NodeRef::ad(0))],
        0,
        1.0,
        0,
    )
    .unwrap();
    assert_eq!(
        estimate_memory(&g, &both, 64),
        estimate_memory(&g, &one, 64) + estimate_memory(&g, &ad, 64)
    );
    let wide = sample_khop(&g, &[0], 2, 1.0, 0).unwrap();
    let nodes: u64 = wide
        .nodes()
        .map(|r| (g.node_at(r).kind.feature_dim() + 16) as u64 * 8)
        .sum();
    assert_eq!(
        estimate_memory(&g, &wide, 16),
        nodes + wide.edges.len() as u64 * 104
    );
}

#[test]
fn cache_window_and_eviction() {
    let cache = EmbedCache::new(2, DEFAULT_CACHE_WINDOW_SECS).unwrap();
    let v: Arc<[f64]> = Arc::from(vec![1.0, 2.0]);
    cache.put(1, 1, 7, v.clone());
    assert_eq!(cache.get(1, 1, 7), Some(v.clone()));
    assert_eq!(cache.get(1, 1, 8), None);
    assert_eq!(cache.get(1, 2, 7), None);

    cache.put(2, 1, 7, v.clone());
    cache.get(1, 1, 7);
    cache.put(3, 1, 7, v.clone());
    assert_eq!(cache.len(), 2);
    assert!(
        cache.get(2, 1, 7).is_none(),
        "entry 2 was least recently used"
    );
    assert!(cache.get(1, 1, 7).is_some() && cache.get(3, 1, 7).is_some());

    cache.put(4, MAX_CACHE_HOPS + 1, 7, v.clone());
    assert!(cache.peek(4, MAX_CACHE_HOPS + 1, 7).is_none());
    assert_eq!(cache.tag_of(6 * 3600 * 5 + 17), 5);

    let off = EmbedCache::new(0, 3600).unwrap();
    off.put(1, 1, 0, v);
    assert!(off.is_empty() && off.get(1, 1, 0).is_none());
    assert!(EmbedCache::new(4, 0).is_err());
}

fn full_reference(
    g: &HeteroGraph,
    c: &ModelConfig,
    params: &ParamStore,
) -> (Encoder<'static>, Matrix)
where
{
    let g: &'static HeteroGraph = Box::leak(Box::new(g.clone()));
    let enc = Encoder::new(g, c).unwrap();
    let full = full_embeddings(params, c, g, &enc.builder()).unwrap();
    (enc, full)
}

fn assert_exact(
    g: &HeteroGraph,
    c: &ModelConfig,
    seeds: &[usize],
    budget: MemoryBudget,
) -> InferStats {
    let params = init_model(c, 5).unwrap();
    let (enc, full) = full_reference(g, c, &params);
    let users: Vec<usize> = seeds
        .iter()
        .filter(|&&s| g.node_at(s).kind == NodeKind::User)
        .map(|&s| g.node_at(s).index)
        .collect();
    let (seqs, _) = enc.embed(&params, &users, &[]).unwrap();
    let opts = InferOptions {
        budget,
        ..exact(1_700_000_000)
    };
    let got = gmi_infer(&enc, &params, seeds, &opts, &cold()).unwrap();
    let mut seq_iter = seqs.iter();
    for (o, &s) in got.outputs.iter().zip(seeds) {
        assert_eq!(o.row, s);
        assert_eq!(o.embedding(), full.row(s), "seed row {s}");
        if g.node_at(s).kind == NodeKind::User {
            let seq = seq_iter.next().unwrap();
            assert_eq!(o.states, seq.states);
            assert_eq!(o.windows, seq.windows);
        }
    }
    got.stats
}

#[test]
fn full_rate_matches_full_graph_forward() {
    let g = random_graph(8, 12, 9, 3, 60);
    let seeds: Vec<usize> = vec![0, 14, 3, 22, 5];
    let stats = assert_exact(&g, &cfg(), &seeds, MemoryBudget::unlimited());
    assert_eq!(stats.batches, 1);
}

#[test]
fn budget_split_keeps_outputs_exact() {
    let g = random_graph(9, 40, 30, 2, 25);
    let seeds: Vec<usize> = (0..g.num_nodes()).step_by(3).collect();
    let c = cfg();
    let enc = Encoder::new(&g, &c).unwrap();
    let single = seeds
        .iter()
        .map(|&s| {
            estimate_memory(
                &g,
                &sample_khop(&g, &[s], 3, 1.0, 0).unwrap(),
                widest_layer(&enc),
            )
        })
        .max()
        .unwrap();
    let stats = assert_exact(
        &g,
        &c,
        &seeds,
        MemoryBudget {
            bytes: single + 400,
        },
    );
    assert!(stats.batches >= 2, "{stats:?}");
}

#[test]
fn budget_below_one_seed_is_an_error() {
    let g = random_graph(2, 4, 4, 1, 12);
    let c = cfg();
    let enc = Encoder::new(&g, &c).unwrap();
    let params = init_model(&c, 0).unwrap();
    let opts = InferOptions {
        budget: MemoryBudget { bytes: 100 },
        ..exact(0)
    };
    let err = gmi_infer(&enc, &params, &[0, 1], &opts, &cold()).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("bytes needed"), "{err}");
}

#[test]
fn warm_cache_skips_cached_layers() {
    let g = random_graph(3, 10, 8, 2, 40);
    let c = cfg();
    let enc = Encoder::new(&g, &c).unwrap();
    let params = init_model(&c, 2).unwrap();
    let cache = cold();
    let opts = InferOptions {
        rate: 0.5,
        k: 2,
        ..InferOptions::new(1_700_000_000)
    };
    let seeds = [0, 4, 12];
    let first = gmi_infer(&enc, &params, &seeds, &opts, &cache).unwrap();
    assert!(first.stats.computed[0] > 0 && first.stats.computed[1] > 0);
    assert_eq!(first.stats.cache_hits, 0);
    let second = gmi_infer(&enc, &params, &seeds, &opts, &cache).unwrap();
    assert_eq!(second.stats.computed[..2], [0, 0]);
    assert_eq!(second.stats.computed[2], first.stats.computed[2]);
    assert!(second.stats.cache_hits > 0);
    assert_eq!(second.outputs, first.outputs);

    let later = InferOptions {
        now: opts.now + DEFAULT_CACHE_WINDOW_SECS,
        ..opts
    };
    let third = gmi_infer(&enc, &params, &seeds, &later, &cache).unwrap();
    assert_eq!(third.stats.computed, first.stats.computed);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let g = random_graph(6, 20, 12, 3, 90);
    let c = cfg();
    let enc = Encoder::new(&g, &c).unwrap();
    let params = init_model(&c, 3).unwrap();
    let seeds: Vec<usize> = (0..g.num_nodes()).collect();
    let opts = InferOptions {
        rate: 0.3,
        budget: MemoryBudget { bytes: 8_000 },
        ..InferOptions::new(1_700_000_000)
    };
    let run = |threads: usize| {
        let cache = cold();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let out = pool.install(|| gmi_infer(&enc, &params, &seeds, &opts, &cache).unwrap());
        (out, cache.len())
    };
    let (a, na) = run(1);
    let (b, nb) = run(4);
    assert!(a.stats.batches > 1);
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn shallow_k_still_runs() {
    let g = random_graph(4, 6, 5, 2, 20);
    let c = cfg();
    let enc = Encoder::new(&g, &c).unwrap();
    let params = init_model(&c, 1).unwrap();
    let opts = InferOptions {
        k: 0,
        rate: 1.0,
        ..InferOptions::new(0)
    };
    let out = gmi_infer(&enc, &params, &[0, 7], &opts, &cold()).unwrap();
    assert_eq!(out.outputs.len(), 2);
    assert!(out.outputs.iter().all(|o| o.states.is_finite()));
}

#[test]
fn recommendations_match_full_graph_ranking() {
    let g = random_graph(12, 6, 7, 2, 40);
    let c = cfg();
    let params = init_model(&c, 9).unwrap();
    let enc = Encoder::new(&g, &c).unwrap();
    let users = [4, 0, 2];
    let (got, _) = recommend(&enc, &params, &users, 3, &exact(0), &cold()).unwrap();
    let ads: Vec<usize> = (0..g.ads.len()).collect();
    let (seqs, ad_emb) = enc.embed(&params, &users, &ads).unwrap();
    let ids = node_ids(&g, NodeKind::Ad);
    for (r, seq) in got.iter().zip(&seqs) {
        assert_eq!(*r, rank(&params, seq, &ids, &ad_emb, 3).unwrap());
    }
    let (all, _) = recommend(&enc, &params, &[1], 100, &exact(0), &cold()).unwrap();
    assert_eq!(all[0].len(), g.ads.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hop_labels_are_bfs_distances(seed in 0u64..500, rate in 0.05f64..1.0, k in 0usize..4) {
        let g = random_graph_of_size(seed, 40, 2.0);
        let seeds = [0, g.num_nodes() / 2];
        let b = sample_khop(&g, &seeds, k, rate, seed).unwrap();
        let dist = bfs(&g, &b.seeds, &b.edges);
        prop_assert_eq!(dist.len(), b.num_nodes());
        for r in b.nodes() {
            prop_assert_eq!(Some(dist[&r]), b.hop(r));
            prop_assert!(dist[&r] <= k);
        }
        let mut rows: Vec<usize> = b.nodes().collect();
        let n = rows.len();
        rows.sort_unstable();
        rows.dedup();
        prop_assert_eq!(rows.len(), n);
    }

    #[test]
    fn sampling_ignores_seed_order(seed in 0u64..500, rate in 0.05f64..1.0) {
        let g = random_graph_of_size(seed, 30, 2.5);
        let a = sample_khop(&g, &[1, 5, 9], 2, rate, seed).unwrap();
        let b = sample_khop(&g, &[9, 1, 5, 1], 2, rate, seed).unwrap();
        prop_assert_eq!(&a.edges, &b.edges);
        for r in a.nodes() {
            prop_assert_eq!(a.hop(r), b.hop(r));
        }
        prop_assert_eq!(a.num_nodes(), b.num_nodes());
    }

    #[test]
    fn exact_on_random_graphs(seed in 0u64..1000, nodes in 6usize..200) {
        let g = random_graph_of_size(seed, nodes, 2.0);
        let seeds: Vec<usize> = (0..g.num_nodes()).step_by(7).collect();
        assert_exact(&g, &cfg(), &seeds, MemoryBudget::unlimited());
    }
}
