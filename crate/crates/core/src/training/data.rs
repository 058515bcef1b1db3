//! Sample construction: temporal holdout, negatives and the user split.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_class_weights, LabeledSample, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, derive_cross_platform_edges, unify_users, CrossPlatformConfig, EdgeKind,
    HeteroGraph, IdentityMap, UnifyConfig,
};
use crate::ingest::{default_schema, fit_normalizer, Action, EventRecord, NormalizerStats};

/// Per-platform ad catalogues and each user's clicked ads.
#[derive(Clone, Debug, Default)]
pub struct NegativeSampler {
    catalog: BTreeMap<String, Vec<String>>,
    clicked: BTreeMap<usize, BTreeSet<String>>,
}

impl NegativeSampler {
    /// Catalogues every (platform, ad) seen in `events`; events by users
    /// outside `identity` are ignored.
    pub fn from_events(events: &[EventRecord], identity: &IdentityMap) -> Self {
        let mut catalog: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut clicked: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for e in events {
            catalog
                .entry(e.platform_id.clone())
                .or_default()
                .insert(e.ad_id.clone());
            if e.action == Action::Click {
                if let Some(u) = identity.unified_of(e) {
                    clicked.entry(u).or_default().insert(e.ad_id.clone());
                }
            }
        }
        Self {
            catalog: catalog
                .into_iter()
                .map(|(p, ads)| (p, ads.into_iter().collect()))
                .collect(),
            clicked,
        }
    }

    /// Drops catalogue entries `keep` rejects.
    pub fn restrict(mut self, keep: impl Fn(&str) -> bool) -> Self {
        for ads in self.catalog.values_mut() {
            ads.retain(|a| keep(a));
        }
        self
    }

    /// One positive per click and up to `ratio` negatives drawn without
    /// replacement from the click's platform catalogue, excluding every ad
    /// the user clicked. Weights are left at 1.
    pub fn sample(
        &self,
        clicks: &[&EventRecord],
        identity: &IdentityMap,
        ratio: usize,
        seed: u64,
    ) -> Result<Vec<LabeledSample>> {
        if ratio == 0 {
            return Err(Error::Config("negative ratio must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let empty = BTreeSet::new();
        let mut out = Vec::with_capacity(clicks.len() * (ratio + 1));
        for e in clicks {
            let u = identity.unified_of(e).ok_or_else(|| {
                Error::Input(format!("click by unknown raw user {}", e.raw_key()))
            })?;
            let user = identity.unified_id(u).to_string();
            let seen = self.clicked.get(&u).unwrap_or(&empty);
            let pool: Vec<&String> = self
                .catalog
                .get(&e.platform_id)
                .map(|ads| ads.iter().filter(|a| !seen.contains(*a)).collect())
                .unwrap_or_default();
            let sample = |ad: &str, label: u8| LabeledSample {
                user: user.clone(),
                ad: ad.to_string(),
                platform: e.platform_id.clone(),
                label,
                weight: 1.0,
            };
            out.push(sample(&e.ad_id, 1));
            let take = ratio.min(pool.len());
            if take < ratio {
                log::warn!(
                    "user {user} has only {take} unclicked ads on {}; wanted {ratio}",
                    e.platform_id
                );
            }
            for i in index::sample(&mut rng, pool.len(), take) {
                out.push(sample(pool[i], 0));
            }
        }
        Ok(out)
    }
}

/// Positives are the clicks in `events`; negatives come from the ads seen
/// in `events` on the click's platform.
pub fn negative_sample(
    events: &[EventRecord],
    identity: &IdentityMap,
    ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let clicks: Vec<&EventRecord> = events
        .iter()
        .filter(|e| e.action == Action::Click)
        .collect();
    NegativeSampler::from_events(events, identity).sample(&clicks, identity, ratio, seed)
}

/// Splits samples so no user appears on both sides. Users are shuffled by
/// `seed` and the first `val_fraction` of them (at least one, leaving at
/// least one) go to validation. Input order is kept within each side.
pub fn split_by_user(
    samples: Vec<LabeledSample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let users: BTreeSet<&str> = samples.iter().map(|s| s.user.as_str()).collect();
    if users.len() < 2 {
        return Err(Error::Input(format!(
            "a user-disjoint split needs at least two users, got {}",
            users.len()
        )));
    }
    let mut users: Vec<String> = users.into_iter().map(String::from).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((users.len() as f64 * val_fraction).round() as usize).clamp(1, users.len() - 1);
    let val_users: HashSet<String> = users.into_iter().take(n_val).collect();
    Ok(samples
        .into_iter()
        .partition(|s| !val_users.contains(&s.user)))
}

/// Ad click counts in `graph`, one per sample.
pub fn popularity_scores(graph: &HeteroGraph, samples: &[LabeledSample]) -> Vec<f64> {
    let mut counts = vec![0usize; graph.ads.len()];
    for e in graph.edges_of_kind(EdgeKind::ClickAd) {
        counts[e.dst.index] += 1;
    }
    samples
        .iter()
        .map(|s| graph.find_ad(&s.ad).map_or(0.0, |a| counts[a] as f64))
        .collect()
}

/// Everything derived from an event log before training starts.
#[derive(Clone, Debug)]
pub struct Experiment {
    /// Events strictly before this timestamp form the graph.
    pub cutoff: i64,
    pub identity: IdentityMap,
    pub stats: NormalizerStats,
    pub graph: HeteroGraph,
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
}

impl Experiment {
    pub fn all_samples(&self) -> Vec<LabeledSample> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

/// Unifies users, fits the attribute normaliser and builds the graph with
/// its cross-platform edges, all from `events`.
pub fn graph_from_events(
    events: &[EventRecord],
) -> Result<(IdentityMap, NormalizerStats, HeteroGraph)> {
    let identity = unify_users(events, &UnifyConfig::default());
    let stats = fit_normalizer(events, &default_schema())?;
    let mut graph = build_graph(events, &identity, &stats)?;
    derive_cross_platform_edges(
        &mut graph,
        events,
        &identity,
        &stats,
        &CrossPlatformConfig::default(),
    )?;
    Ok((identity, stats, graph))
}

/// Builds the history graph and the class-weighted, user-disjoint samples.
///
/// Clicks after the cutoff become positives, so no target interaction is
/// an edge of the graph the model sees. Clicks by users or on ads absent
/// from the history are dropped, as are repeated (user, ad) positives.
pub fn prepare(events: &[EventRecord], cfg: &TrainConfig) -> Result<Experiment> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(Error::Input("event log is empty".into()));
    }
    let mut ts: Vec<i64> = events.iter().map(|e| e.timestamp).collect();
    ts.sort_unstable();
    let cut_index = ((ts.len() as f64) * (1.0 - cfg.holdout_fraction)).floor() as usize;
    let cutoff = ts[cut_index.min(ts.len() - 1)];
    let history: Vec<EventRecord> = events
        .iter()
        .filter(|e| e.timestamp < cutoff)
        .cloned()
        .collect();
    if history.is_empty() {
        return Err(Error::Input(
            "no events fall before the holdout cutoff".into(),
        ));
    }
    let (identity, stats, graph) = graph_from_events(&history)?;

    let mut seen_pairs = HashSet::new();
    let clicks: Vec<&EventRecord> = events
        .iter()
        .filter(|e| e.timestamp >= cutoff && e.action == Action::Click)
        .filter(|e| graph.find_ad(&e.ad_id).is_some())
        .filter(|e| match identity.unified_of(e) {
            Some(u) => seen_pairs.insert((u, e.ad_id.clone())),
            None => false,
        })
        .collect();
    if clicks.is_empty() {
        return Err(Error::Input(
            "no usable clicks after the holdout cutoff".into(),
        ));
    }
    let sampler =
        NegativeSampler::from_events(events, &identity).restrict(|a| graph.find_ad(a).is_some());
    let samples = sampler.sample(
        &clicks,
        &identity,
        cfg.negative_ratio,
        cfg.seed ^ 0x4e45_4741,
    )?;
    let (mut train, mut validation) =
        split_by_user(samples, cfg.val_fraction, cfg.seed ^ 0x5350_4c54)?;
    apply_class_weights(&mut train)?;
    apply_class_weights(&mut validation)?;
    Ok(Experiment {
        cutoff,
        identity,
        stats,
        graph,
        train,
        validation,
    })
}
