use std::collections::{BTreeMap, BTreeSet};

use super::{
    AdNode, Edge, EdgeKind, HeteroGraph, IdentityMap, NodeRef, PlatformNode, UserNode, AD_FEATURES,
    PLATFORM_FEATURES, USER_FEATURES,
};
use crate::error::{Error, Result};
use crate::ingest::{attr, Action, EventRecord, NormalizerStats, Scheme, NUM_ATTRS};

const DAY: i64 = 86_400;

fn day_of(ts: i64) -> i64 {
    ts.div_euclid(DAY)
}

/// Monday = 0; the epoch fell on a Thursday.
fn weekday_of(ts: i64) -> i64 {
    (day_of(ts) + 3).rem_euclid(7)
}

fn hour_of(ts: i64) -> i64 {
    ts.rem_euclid(DAY) / 3600
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Z-scores every column of a feature table in place.
fn standardize<const N: usize>(rows: &mut [[f64; N]]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let columns: Vec<Vec<f64>> = (0..N)
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect();
    let stats = NormalizerStats::fit_columns(&columns, &[Scheme::ZScore; N])?;
    for r in rows.iter_mut() {
        stats.apply_row(r);
    }
    Ok(())
}

fn user_features(events: &[&EventRecord]) -> [f64; USER_FEATURES] {
    let mut ts: Vec<i64> = events.iter().map(|e| e.timestamp).collect();
    ts.sort_unstable();
    let n = events.len() as f64;
    let days = ts
        .iter()
        .map(|&t| day_of(t))
        .collect::<BTreeSet<_>>()
        .len()
        .max(1) as f64;
    let clicks = events.iter().filter(|e| e.action == Action::Click).count() as f64;
    let browses = events.iter().filter(|e| e.action == Action::Browse).count() as f64;
    let dwell: f64 = events.iter().map(|e| e.attrs[attr::DWELL]).sum();
    let clicked: BTreeSet<&str> = events
        .iter()
        .filter(|e| e.action == Action::Click)
        .map(|e| e.ad_id.as_str())
        .collect();
    let platforms: BTreeSet<&str> = events.iter().map(|e| e.platform_id.as_str()).collect();
    let gap = mean(ts.windows(2).map(|w| (w[1] - w[0]) as f64));
    let weekend = events
        .iter()
        .filter(|e| weekday_of(e.timestamp) >= 5)
        .count() as f64;
    let night = events
        .iter()
        .filter(|e| {
            let h = hour_of(e.timestamp);
            !(6..22).contains(&h)
        })
        .count() as f64;
    let age = (ts[ts.len() - 1] - ts[0]) as f64 / DAY as f64;
    [
        clicks / days,
        dwell / days,
        n,
        clicked.len() as f64,
        platforms.len() as f64,
        gap,
        clicks / n,
        browses / (clicks + 1.0),
        weekend / n,
        night / n,
        age,
    ]
}

/// `raw` supplies timestamps and labels, `norm` the normalised attributes of
/// the same events.
fn ad_features(raw: &[&EventRecord], norm: &[&EventRecord]) -> [f64; AD_FEATURES] {
    let labels: BTreeSet<u32> = raw.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let first = raw.iter().map(|e| e.timestamp).min().unwrap_or(0);
    let last = raw.iter().map(|e| e.timestamp).max().unwrap_or(0);
    let clicks = raw.iter().filter(|e| e.action == Action::Click).count() as f64;
    let col = |i: usize| mean(norm.iter().map(|e| e.attrs[i]));
    [
        col(attr::POSITION),
        labels.first().map_or(0.0, |&l| l as f64),
        labels.len() as f64,
        col(attr::DWELL),
        (last - first) as f64 / DAY as f64,
        col(attr::AD_WEIGHT),
        clicks / raw.len().max(1) as f64,
        col(attr::CONVERSION_GROUP),
    ]
}

fn platform_features(events: &[&EventRecord], region: usize) -> [f64; PLATFORM_FEATURES] {
    let days = events
        .iter()
        .map(|e| day_of(e.timestamp))
        .collect::<BTreeSet<_>>()
        .len()
        .max(1) as f64;
    let users: BTreeSet<&str> = events.iter().map(|e| e.raw_user_id.as_str()).collect();
    let ads: BTreeSet<&str> = events.iter().map(|e| e.ad_id.as_str()).collect();
    let mut hours = [0usize; 24];
    for e in events {
        hours[hour_of(e.timestamp) as usize] += 1;
    }
    let peak = hours
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(h, _)| h);
    [
        mean(events.iter().map(|e| e.attrs[attr::PLATFORM_CODE])),
        ads.len() as f64,
        events.iter().map(|e| e.attrs[attr::DWELL]).sum::<f64>() / days,
        users.len() as f64 / days,
        peak as f64,
        region as f64,
    ]
}

/// Builds the graph from raw events: attributes are normalised with
/// `stats`, node features are aggregated and z-scored per node kind.
pub fn build_graph(
    events: &[EventRecord],
    identity: &IdentityMap,
    stats: &NormalizerStats,
) -> Result<HeteroGraph> {
    let mut unified = Vec::with_capacity(events.len());
    for (i, e) in events.iter().enumerate() {
        let u = identity.unified_of(e).ok_or_else(|| {
            Error::Input(format!(
                "event {i} ({} on {} at {}) references raw user {} absent from the identity map",
                e.action,
                e.ad_id,
                e.timestamp,
                e.raw_key()
            ))
        })?;
        unified.push(u);
    }
    let normalized: Vec<EventRecord> = crate::ingest::apply_normalizer(stats, events);

    let ad_ids: BTreeSet<&str> = events.iter().map(|e| e.ad_id.as_str()).collect();
    let ad_index: BTreeMap<&str, usize> = ad_ids.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let platform_ids: BTreeSet<&str> = events.iter().map(|e| e.platform_id.as_str()).collect();
    let platform_index: BTreeMap<&str, usize> = platform_ids
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();

    let mut per_user: Vec<Vec<&EventRecord>> = vec![Vec::new(); identity.len()];
    let mut per_ad_raw: Vec<Vec<&EventRecord>> = vec![Vec::new(); ad_ids.len()];
    let mut per_ad_norm: Vec<Vec<&EventRecord>> = vec![Vec::new(); ad_ids.len()];
    let mut per_platform: Vec<Vec<&EventRecord>> = vec![Vec::new(); platform_ids.len()];
    for ((e, n), &u) in events.iter().zip(&normalized).zip(&unified) {
        per_user[u].push(e);
        let a = ad_index[e.ad_id.as_str()];
        per_ad_raw[a].push(e);
        per_ad_norm[a].push(n);
        per_platform[platform_index[e.platform_id.as_str()]].push(e);
    }

    // Identity entries without events cannot occur when the map was built
    // from the same log, but a zero row keeps the table total either way.
    let mut user_rows: Vec<[f64; USER_FEATURES]> = per_user
        .iter()
        .map(|evs| {
            if evs.is_empty() {
                [0.0; USER_FEATURES]
            } else {
                user_features(evs)
            }
        })
        .collect();
    let mut ad_rows: Vec<[f64; AD_FEATURES]> = per_ad_raw
        .iter()
        .zip(&per_ad_norm)
        .map(|(r, n)| ad_features(r, n))
        .collect();
    let mut platform_rows: Vec<[f64; PLATFORM_FEATURES]> = per_platform
        .iter()
        .enumerate()
        .map(|(i, evs)| platform_features(evs, i))
        .collect();
    standardize(&mut user_rows)?;
    standardize(&mut ad_rows)?;
    standardize(&mut platform_rows)?;

    let users = user_rows
        .into_iter()
        .enumerate()
        .map(|(i, features)| UserNode {
            unified_user_id: identity.unified_id(i).to_string(),
            features,
        })
        .collect();
    let ads = ad_ids
        .iter()
        .zip(ad_rows)
        .map(|(&id, features)| AdNode {
            ad_id: id.to_string(),
            features,
        })
        .collect();
    let platforms = platform_ids
        .iter()
        .zip(platform_rows)
        .map(|(&id, features)| PlatformNode {
            platform_id: id.to_string(),
            features,
        })
        .collect();

    let edges = normalized
        .iter()
        .zip(&unified)
        .map(|(e, &u)| {
            let user = NodeRef::user(u);
            let (kind, src, dst) = match e.action {
                Action::Click => (
                    EdgeKind::ClickAd,
                    user,
                    NodeRef::ad(ad_index[e.ad_id.as_str()]),
                ),
                Action::View => (
                    EdgeKind::ViewPlatform,
                    user,
                    NodeRef::platform(platform_index[e.platform_id.as_str()]),
                ),
                Action::Browse => (
                    EdgeKind::BrowseUser,
                    NodeRef::ad(ad_index[e.ad_id.as_str()]),
                    user,
                ),
            };
            Edge {
                kind,
                src,
                dst,
                attrs: e.attrs,
                weight: 1.0,
                timestamp: e.timestamp,
            }
        })
        .collect();
    HeteroGraph::new(users, ads, platforms, edges)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossPlatformConfig {
    pub window_secs: i64,
    pub label_jaccard: f64,
}

impl Default for CrossPlatformConfig {
    fn default() -> Self {
        Self {
            window_secs: DAY,
            label_jaccard: 0.5,
        }
    }
}

/// Weight of a cross-platform edge backed by `f` qualifying click pairs.
pub fn cross_platform_weight(f: usize) -> f64 {
    assert!(
        f >= 1,
        "a cross-platform edge needs at least one qualifying pair"
    );
    (0.85 + 0.03 * (f - 1) as f64).min(1.0)
}

fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Adds one `ViewCrossPlatform` edge user→Q for every user and ordered
/// platform pair (P, Q) with at least one pair of similar clicks close in
/// time. Returns the number of edges added.
pub fn derive_cross_platform_edges(
    graph: &mut HeteroGraph,
    events: &[EventRecord],
    identity: &IdentityMap,
    stats: &NormalizerStats,
    cfg: &CrossPlatformConfig,
) -> Result<usize> {
    let mut clicks: BTreeMap<usize, Vec<(usize, &EventRecord)>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.action == Action::Click) {
        let u = identity
            .unified_of(e)
            .ok_or_else(|| Error::Input(format!("click by unknown raw user {}", e.raw_key())))?;
        let p = graph
            .find_platform(&e.platform_id)
            .ok_or_else(|| Error::Input(format!("click on unknown platform {}", e.platform_id)))?;
        clicks.entry(u).or_default().push((p, e));
    }
    let mut platform_codes: Vec<f64> = vec![0.0; graph.platforms.len()];
    for (p, code) in platform_codes.iter_mut().enumerate() {
        let id = &graph.platforms[p].platform_id;
        *code = mean(
            events
                .iter()
                .filter(|e| &e.platform_id == id)
                .map(|e| e.attrs[attr::PLATFORM_CODE]),
        );
    }

    let mut new_edges = Vec::new();
    for (&u, list) in &clicks {
        // (P, Q) -> (count, latest timestamp, jaccard sum)
        let mut pairs: BTreeMap<(usize, usize), (usize, i64, f64)> = BTreeMap::new();
        for (x, &(p, a)) in list.iter().enumerate() {
            for &(q, b) in &list[x + 1..] {
                if p == q || (a.timestamp - b.timestamp).abs() > cfg.window_secs {
                    continue;
                }
                let j = jaccard(&a.labels, &b.labels);
                if j < cfg.label_jaccard {
                    continue;
                }
                let latest = a.timestamp.max(b.timestamp);
                for key in [(p, q), (q, p)] {
                    let slot = pairs.entry(key).or_insert((0, i64::MIN, 0.0));
                    slot.0 += 1;
                    slot.1 = slot.1.max(latest);
                    slot.2 += j;
                }
            }
        }
        for (&(_, q), &(f, latest, jsum)) in &pairs {
            let mut attrs = [0.0; NUM_ATTRS];
            attrs[attr::TIMESTAMP] = stats.columns[attr::TIMESTAMP].apply(latest as f64);
            attrs[attr::PLATFORM_CODE] =
                stats.columns[attr::PLATFORM_CODE].apply(platform_codes[q]);
            attrs[attr::LABEL_MATCH] = stats.columns[attr::LABEL_MATCH].apply(jsum / f as f64);
            new_edges.push(Edge {
                kind: EdgeKind::ViewCrossPlatform,
                src: NodeRef::user(u),
                dst: NodeRef::platform(q),
                attrs,
                weight: cross_platform_weight(f),
                timestamp: latest,
            });
        }
    }
    let before = graph.edges().len();
    graph.append_edges(new_edges)?;
    Ok(graph.edges().len() - before)
}
