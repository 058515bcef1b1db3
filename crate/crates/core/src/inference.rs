//! Graph mini-batch inference: sampled k-hop subgraphs, a hop-bounded
//! embedding cache shared across calls, and memory-budgeted batching.

use std::collections::{HashMap, HashSet};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeKind};
use crate::layers::{layer_forward, project, Query};
use crate::model::{check_params, node_ids, Encoder};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::scorer::{rank, Ranked, UserSequence};

pub const DEFAULT_RATE: f64 = 0.15;
pub const DEFAULT_KHOP: usize = 2;
/// Deepest layer output the cache keeps, counted in aggregation hops.
pub const MAX_CACHE_HOPS: usize = 2;
pub const DEFAULT_CACHE_WINDOW_SECS: i64 = 6 * 3600;
pub const DEFAULT_CACHE_CAPACITY: usize = 100_000;
/// Edge cost: twelve attributes and one coefficient.
pub const EDGE_BYTES: u64 = 13 * 8;

/// Nodes and edges reached from a seed set by sampled frontier expansion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubgraphBatch {
    /// Distinct seed rows in first-seen order.
    pub seeds: Vec<usize>,
    /// `hops[h]` holds the rows first reached after `h` expansions.
    pub hops: Vec<Vec<usize>>,
    /// Included edge indices, ascending.
    pub edges: Vec<usize>,
    /// Full-graph normalisation coefficient of each included edge.
    pub coefficients: Vec<f64>,
    pub rate: f64,
    pub seed: u64,
    hop_of: HashMap<usize, usize>,
}

impl SubgraphBatch {
    pub fn num_nodes(&self) -> usize {
        self.hop_of.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.hops.iter().flatten().copied()
    }

    pub fn hop(&self, row: usize) -> Option<usize> {
        self.hop_of.get(&row).copied()
    }

    pub fn contains_edge(&self, edge: usize) -> bool {
        self.edges.binary_search(&edge).is_ok()
    }
}

/// Independent Bernoulli draw for the neighbour `to` of `from` at `hop`,
/// keyed so the outcome does not depend on visiting order.
fn keep_neighbor(seed: u64, from: usize, to: usize, hop: usize, rate: f64) -> bool {
    if rate >= 1.0 {
        return true;
    }
    let mut key = [0u8; 32];
    for (chunk, v) in key
        .chunks_exact_mut(8)
        .zip([seed, from as u64, to as u64, hop as u64])
    {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key).random::<f64>() < rate
}

/// Expands `seeds` for `k` hops, keeping each neighbour of a frontier node
/// with probability `rate`. Parallel edges to a kept neighbour are all
/// included; edges back to nodes two or more hops closer to the seeds are
/// not, so every hop label is the distance within the kept edges. At
/// `rate = 1` the result is the exact k-hop closure.
pub fn sample_khop(
    graph: &HeteroGraph,
    seeds: &[usize],
    k: usize,
    rate: f64,
    seed: u64,
) -> Result<SubgraphBatch> {
    if seeds.is_empty() {
        return Err(Error::Input(
            "k-hop sampling needs at least one seed".into(),
        ));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= graph.num_nodes()) {
        return Err(Error::Input(format!(
            "seed row {bad} outside a graph of {} nodes",
            graph.num_nodes()
        )));
    }
    let mut hop_of = HashMap::new();
    let mut frontier = Vec::new();
    for &s in seeds {
        if hop_of.insert(s, 0).is_none() {
            frontier.push(s);
        }
    }
    let unique_seeds = frontier.clone();
    let mut hops = vec![frontier];
    let mut edges = HashSet::new();
    for h in 0..k {
        let mut next = Vec::new();
        for &v in &hops[h] {
            let mut decided: HashMap<usize, bool> = HashMap::new();
            for inc in graph.incidence(v) {
                let kept = *decided
                    .entry(inc.neighbor)
                    .or_insert_with(|| keep_neighbor(seed, v, inc.neighbor, h, rate));
                if !kept {
                    continue;
                }
                match hop_of.get(&inc.neighbor) {
                    // An edge back past the previous hop would shorten the
                    // neighbour's distance below its label.
                    Some(&d) if d + 1 < h => continue,
                    Some(_) => {}
                    None => {
                        hop_of.insert(inc.neighbor, h + 1);
                        next.push(inc.neighbor);
                    }
                }
                edges.insert(inc.edge);
            }
        }
        if next.is_empty() {
            break;
        }
        hops.push(next);
    }
    let mut edges: Vec<usize> = edges.into_iter().collect();
    edges.sort_unstable();
    Ok(SubgraphBatch {
        seeds: unique_seeds,
        hops,
        coefficients: Vec::new(),
        edges,
        rate,
        seed,
        hop_of,
    })
}

/// Attaches full-graph coefficients to a sampled batch.
fn with_coefficients(mut batch: SubgraphBatch, encoder: &Encoder<'_>) -> SubgraphBatch {
    let coeffs = encoder.coefficients();
    let graph = encoder.graph();
    batch.coefficients = batch
        .edges
        .iter()
        .map(|&e| graph.edge(e).weight * coeffs.edge[e])
        .collect();
    batch
}

/// Byte limit for one sub-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryBudget {
    pub bytes: u64,
}

impl MemoryBudget {
    pub fn unlimited() -> Self {
        Self { bytes: u64::MAX }
    }
}

/// Cost model: `(feature dims + embedding dims) · 8` bytes per node plus
/// [`EDGE_BYTES`] per edge.
pub fn estimate_memory(graph: &HeteroGraph, batch: &SubgraphBatch, embedding_dim: usize) -> u64 {
    let nodes: u64 = batch
        .nodes()
        .map(|r| ((graph.node_at(r).kind.feature_dim() + embedding_dim) * 8) as u64)
        .sum();
    nodes + batch.edges.len() as u64 * EDGE_BYTES
}

type CacheKey = (usize, usize, i64);

/// Bounded LRU store of intermediate embeddings keyed by node row, hop
/// depth and time-window tag. Only depths up to [`MAX_CACHE_HOPS`] are kept.
pub struct EmbedCache {
    window_secs: i64,
    inner: Option<Mutex<LruCache<CacheKey, Arc<[f64]>>>>,
}

impl EmbedCache {
    /// A zero capacity disables caching.
    pub fn new(capacity: usize, window_secs: i64) -> Result<Self> {
        if window_secs <= 0 {
            return Err(Error::Config(format!(
                "cache window must be positive, got {window_secs}"
            )));
        }
        Ok(Self {
            window_secs,
            inner: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
        })
    }

    pub fn window_secs(&self) -> i64 {
        self.window_secs
    }

    /// Window tag of a timestamp.
    pub fn tag_of(&self, now: i64) -> i64 {
        now.div_euclid(self.window_secs)
    }

    pub fn capacity(&self) -> usize {
        self.inner
            .as_ref()
            .map_or(0, |m| m.lock().expect("cache lock").cap().get())
    }

    pub fn len(&self) -> usize {
        self.inner
            .as_ref()
            .map_or(0, |m| m.lock().expect("cache lock").len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the entry and marks it most recently used.
    pub fn get(&self, row: usize, hops: usize, tag: i64) -> Option<Arc<[f64]>> {
        let inner = self.inner.as_ref()?;
        inner
            .lock()
            .expect("cache lock")
            .get(&(row, hops, tag))
            .cloned()
    }

    /// Returns the entry without touching recency.
    pub fn peek(&self, row: usize, hops: usize, tag: i64) -> Option<Arc<[f64]>> {
        let inner = self.inner.as_ref()?;
        inner
            .lock()
            .expect("cache lock")
            .peek(&(row, hops, tag))
            .cloned()
    }

    /// Inserts, evicting the least recently used entry when full. Entries
    /// deeper than [`MAX_CACHE_HOPS`] or of depth zero are not stored.
    pub fn put(&self, row: usize, hops: usize, tag: i64, embedding: Arc<[f64]>) {
        if hops == 0 || hops > MAX_CACHE_HOPS {
            return;
        }
        if let Some(inner) = &self.inner {
            inner
                .lock()
                .expect("cache lock")
                .put((row, hops, tag), embedding);
        }
    }
}

/// Worker threads for inference: `ADREC_THREADS` when set, else rayon's
/// default.
pub fn thread_count() -> Option<usize> {
    std::env::var("ADREC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub k: usize,
    pub rate: f64,
    pub seed: u64,
    pub budget: MemoryBudget,
    /// Current time; selects the live cache window.
    pub now: i64,
}

impl InferOptions {
    pub fn new(now: i64) -> Self {
        Self {
            k: DEFAULT_KHOP,
            rate: DEFAULT_RATE,
            seed: 0,
            budget: MemoryBudget::unlimited(),
            now,
        }
    }
}

/// Final states of one seed. Users carry one row per step, oldest first;
/// other nodes a single row. The last row is the node's embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutput {
    pub row: usize,
    pub windows: Vec<i64>,
    pub states: Matrix,
}

impl SeedOutput {
    pub fn embedding(&self) -> &[f64] {
        self.states.row(self.states.rows() - 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InferStats {
    pub batches: usize,
    /// Rows evaluated per layer, summed over sub-batches.
    pub computed: Vec<usize>,
    pub cache_hits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// One entry per requested seed, in request order.
    pub outputs: Vec<SeedOutput>,
    pub stats: InferStats,
}

struct BatchResult {
    outputs: Vec<SeedOutput>,
    computed: Vec<usize>,
    hits: Vec<CacheKey>,
    puts: Vec<(CacheKey, Arc<[f64]>)>,
}

/// Embeds `seeds` (graph rows) by sampled sub-batches.
///
/// Sub-batches run concurrently and only read the cache; their new entries
/// and hits are applied afterwards in batch order, so results and cache
/// state do not depend on scheduling. With `rate = 1`, `k` at least the
/// stack depth and a cold cache every output equals the full-graph forward
/// pass bit for bit.
pub fn gmi_infer(
    encoder: &Encoder<'_>,
    params: &ParamStore,
    seeds: &[usize],
    opts: &InferOptions,
    cache: &EmbedCache,
) -> Result<Inference> {
    let cfg = encoder.config();
    check_params(cfg, params)?;
    if seeds.is_empty() {
        return Err(Error::Input("inference needs at least one seed".into()));
    }
    if opts.k < cfg.depth() {
        log::warn!(
            "k = {} is below the stack depth {}; embeddings see a truncated neighbourhood",
            opts.k,
            cfg.depth()
        );
    }
    let batches = plan_batches(encoder, seeds, opts)?;
    let tag = cache.tag_of(opts.now);
    let run = |b: &SubgraphBatch| run_batch(encoder, params, b, tag, cache);
    let results: Vec<BatchResult> = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?
            .install(|| batches.par_iter().map(run).collect::<Result<_>>())?,
        None => batches.par_iter().map(run).collect::<Result<_>>()?,
    };

    let mut stats = InferStats {
        batches: batches.len(),
        computed: vec![0; cfg.depth().max(1)],
        cache_hits: 0,
    };
    let mut by_row = HashMap::new();
    for r in results {
        for &(row, hops, t) in &r.hits {
            cache.get(row, hops, t);
        }
        stats.cache_hits += r.hits.len();
        for ((row, hops, t), v) in r.puts {
            cache.put(row, hops, t, v);
        }
        for (total, c) in stats.computed.iter_mut().zip(r.computed) {
            *total += c;
        }
        for o in r.outputs {
            by_row.insert(o.row, o);
        }
    }
    let outputs = seeds.iter().map(|s| by_row[s].clone()).collect();
    Ok(Inference { outputs, stats })
}

fn widest_layer(encoder: &Encoder<'_>) -> usize {
    let cfg = encoder.config();
    cfg.layer_dims()
        .iter()
        .map(|&(_, o)| o)
        .chain([cfg.dim])
        .max()
        .unwrap_or(cfg.dim)
}

/// Greedy split: seeds join the current sub-batch while the sum of their
/// single-seed costs fits the budget. A merged batch that still overflows
/// is halved until it fits.
fn plan_batches(
    encoder: &Encoder<'_>,
    seeds: &[usize],
    opts: &InferOptions,
) -> Result<Vec<SubgraphBatch>> {
    let graph = encoder.graph();
    let width = widest_layer(encoder);
    let sample = |s: &[usize]| sample_khop(graph, s, opts.k, opts.rate, opts.seed);
    let mut unique = Vec::new();
    let mut seen = HashSet::new();
    for &s in seeds {
        if seen.insert(s) {
            unique.push(s);
        }
    }
    let whole = sample(&unique)?;
    if estimate_memory(graph, &whole, width) <= opts.budget.bytes {
        return Ok(vec![with_coefficients(whole, encoder)]);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0u64;
    for &s in &unique {
        let cost = estimate_memory(graph, &sample(&[s])?, width);
        if cost > opts.budget.bytes {
            return Err(Error::Config(format!(
                "memory budget of {} bytes is below the {cost} bytes needed for seed row {s}",
                opts.budget.bytes
            )));
        }
        if !current.is_empty() && used + cost > opts.budget.bytes {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(s);
        used += cost;
    }
    groups.push(current);

    let mut out = Vec::new();
    while let Some(group) = groups.pop() {
        let batch = sample(&group)?;
        if group.len() > 1 && estimate_memory(graph, &batch, width) > opts.budget.bytes {
            let (a, b) = group.split_at(group.len() / 2);
            groups.push(b.to_vec());
            groups.push(a.to_vec());
        } else {
            out.push(with_coefficients(batch, encoder));
        }
    }
    // Popping reverses the greedy order.
    out.sort_by_key(|b| unique.iter().position(|&s| s == b.seeds[0]));
    Ok(out)
}

/// Layer outputs available as the next layer's input rows.
struct Level {
    value: Var,
    local: HashMap<usize, usize>,
}

fn run_batch(
    encoder: &Encoder<'_>,
    params: &ParamStore,
    batch: &SubgraphBatch,
    tag: i64,
    cache: &EmbedCache,
) -> Result<BatchResult> {
    let cfg = encoder.config();
    let graph = encoder.graph();
    let builder = encoder.builder();
    let depth = cfg.depth();
    let keep = |e: usize| batch.contains_edge(e);
    let neighbors = |rows: &[usize]| -> Vec<usize> {
        let mut set: HashSet<usize> = rows.iter().copied().collect();
        let mut out = rows.to_vec();
        for &r in rows {
            for inc in graph.incidence(r) {
                if keep(inc.edge) && set.insert(inc.neighbor) {
                    out.push(inc.neighbor);
                }
            }
        }
        out
    };

    let mut final_queries = Vec::new();
    let mut offsets = vec![0];
    for &s in &batch.seeds {
        if graph.node_at(s).kind == NodeKind::User {
            final_queries.extend(builder.step_queries(s, keep));
        } else {
            final_queries.push(Query::node(s));
        }
        offsets.push(final_queries.len());
    }
    let mut computed = vec![0; depth.max(1)];
    let mut tape = Tape::new();
    let mut hits = Vec::new();
    let mut puts = Vec::new();

    let out = if depth == 0 {
        let rows: Vec<usize> = final_queries.iter().map(|q| q.row).collect();
        computed[0] = rows.len();
        project(&mut tape, params, graph, &rows)?
    } else {
        // Walk down from the final layer to find which rows each lower
        // layer must produce and which the cache already holds.
        let centers: Vec<usize> = batch.seeds.clone();
        let mut demand = neighbors(&centers);
        let mut missing: Vec<Vec<usize>> = vec![Vec::new(); depth - 1];
        let mut cached: Vec<Vec<(usize, Arc<[f64]>)>> = vec![Vec::new(); depth - 1];
        for l in (0..depth - 1).rev() {
            for &r in &demand {
                match cache.peek(r, l + 1, tag) {
                    Some(v) if l < MAX_CACHE_HOPS => {
                        hits.push((r, l + 1, tag));
                        cached[l].push((r, v));
                    }
                    _ => missing[l].push(r),
                }
            }
            demand = neighbors(&missing[l]);
        }

        let mut level = Level {
            value: project(&mut tape, params, graph, &demand)?,
            local: demand.iter().enumerate().map(|(i, &r)| (r, i)).collect(),
        };
        for l in 0..depth - 1 {
            let queries: Vec<Query> = missing[l].iter().map(|&r| Query::node(r)).collect();
            let msgs = builder.build(&queries, |r| level.local.get(&r).copied(), keep);
            let fresh = layer_forward(&mut tape, params, cfg, l, level.value, &msgs)?.out;
            computed[l] += queries.len();
            if l < MAX_CACHE_HOPS {
                let values = tape.value(fresh);
                for (i, &r) in missing[l].iter().enumerate() {
                    puts.push(((r, l + 1, tag), Arc::from(values.row(i))));
                }
            }
            let mut rows = missing[l].clone();
            let value = if cached[l].is_empty() {
                fresh
            } else {
                let width = tape.value(fresh).cols();
                let mut stored = Vec::with_capacity(cached[l].len() * width);
                for (r, v) in &cached[l] {
                    rows.push(*r);
                    stored.extend_from_slice(v);
                }
                let stored = tape.constant(Matrix::from_vec(cached[l].len(), width, stored)?);
                tape.concat_rows(&[fresh, stored])?
            };
            level = Level {
                value,
                local: rows.iter().enumerate().map(|(i, &r)| (r, i)).collect(),
            };
        }
        let msgs = builder.build(&final_queries, |r| level.local.get(&r).copied(), keep);
        computed[depth - 1] += final_queries.len();
        layer_forward(&mut tape, params, cfg, depth - 1, level.value, &msgs)?.out
    };

    let values = tape.value(out);
    if !values.is_finite() {
        return Err(Error::Numeric("inference forward pass".into()));
    }
    let outputs = batch
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &row)| SeedOutput {
            row,
            windows: final_queries[offsets[i]..offsets[i + 1]]
                .iter()
                .map(|q| q.max_window.unwrap_or(i64::MAX))
                .collect(),
            states: values.gather_rows(&(offsets[i]..offsets[i + 1]).collect::<Vec<_>>()),
        })
        .collect();
    Ok(BatchResult {
        outputs,
        computed,
        hits,
        puts,
    })
}

/// Top-`k` ads for each user (user indices), scored against every ad of
/// the graph. Users and ads are embedded through [`gmi_infer`].
pub fn recommend(
    encoder: &Encoder<'_>,
    params: &ParamStore,
    users: &[usize],
    k: usize,
    opts: &InferOptions,
    cache: &EmbedCache,
) -> Result<(Vec<Vec<Ranked>>, InferStats)> {
    let graph = encoder.graph();
    let ad_ids = node_ids(graph, NodeKind::Ad);
    if ad_ids.is_empty() {
        return Err(Error::Input("the graph holds no ads to rank".into()));
    }
    let mut seeds: Vec<usize> = users
        .iter()
        .map(|&u| graph.row(crate::graph::NodeRef::user(u)))
        .collect();
    let first_ad = graph.kind_offset(NodeKind::Ad);
    seeds.extend(first_ad..first_ad + ad_ids.len());
    let inference = gmi_infer(encoder, params, &seeds, opts, cache)?;
    let (user_out, ad_out) = inference.outputs.split_at(users.len());
    let width = ad_out[0].states.cols();
    let mut ads = Vec::with_capacity(ad_out.len() * width);
    for o in ad_out {
        ads.extend_from_slice(o.embedding());
    }
    let ads = Matrix::from_vec(ad_out.len(), width, ads)?;
    let ranked = user_out
        .iter()
        .zip(users)
        .map(|(o, &u)| {
            let seq = UserSequence {
                user: graph.users[u].unified_user_id.clone(),
                windows: o.windows.clone(),
                states: o.states.clone(),
            };
            rank(params, &seq, &ad_ids, &ads, k)
        })
        .collect::<Result<_>>()?;
    Ok((ranked, inference.stats))
}

#[cfg(test)]
mod tests;
