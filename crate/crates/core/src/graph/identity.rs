use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::ingest::{EventRecord, RawUserKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    HashMatch,
    ActivityMatch,
}

/// One union performed while unifying identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub a: RawUserKey,
    pub b: RawUserKey,
    pub rule: MergeRule,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnifyConfig {
    pub bucket_secs: i64,
    pub jaccard_threshold: f64,
}

impl Default for UnifyConfig {
    fn default() -> Self {
        Self {
            bucket_secs: 3600,
            jaccard_threshold: 0.6,
        }
    }
}

/// Mapping from per-platform raw ids to unified user indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityMap {
    index: BTreeMap<RawUserKey, usize>,
    unified_ids: Vec<String>,
    merges: Vec<MergeRecord>,
}

impl IdentityMap {
    pub fn len(&self) -> usize {
        self.unified_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unified_ids.is_empty()
    }

    pub fn get(&self, key: &RawUserKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn unified_of(&self, event: &EventRecord) -> Option<usize> {
        self.get(&event.raw_key())
    }

    pub fn unified_id(&self, index: usize) -> &str {
        &self.unified_ids[index]
    }

    pub fn unified_ids(&self) -> &[String] {
        &self.unified_ids
    }

    pub fn merges(&self) -> &[MergeRecord] {
        &self.merges
    }

    pub fn raw_keys(&self) -> impl Iterator<Item = (&RawUserKey, usize)> {
        self.index.iter().map(|(k, &v)| (k, v))
    }

    /// Unified classes as sorted member lists, ordered by unified index.
    pub fn partition(&self) -> Vec<Vec<RawUserKey>> {
        let mut classes = vec![Vec::new(); self.len()];
        for (k, &v) in &self.index {
            classes[v].push(k.clone());
        }
        classes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller root so representatives are order-independent.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Merges raw ids that share a hashed identifier, or whose hourly activity
/// buckets overlap strongly without ever colliding on the same platform.
pub fn unify_users(events: &[EventRecord], cfg: &UnifyConfig) -> IdentityMap {
    let mut buckets: BTreeMap<RawUserKey, BTreeSet<i64>> = BTreeMap::new();
    let mut hashes: BTreeMap<&str, BTreeSet<RawUserKey>> = BTreeMap::new();
    for e in events {
        let key = e.raw_key();
        buckets
            .entry(key.clone())
            .or_default()
            .insert(e.timestamp.div_euclid(cfg.bucket_secs));
        hashes.entry(e.hashed_id.as_str()).or_default().insert(key);
    }
    let keys: Vec<RawUserKey> = buckets.keys().cloned().collect();
    let pos: BTreeMap<&RawUserKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let sets: Vec<&BTreeSet<i64>> = buckets.values().collect();

    let mut dsu = DisjointSet::new(keys.len());
    let mut merges = Vec::new();

    for members in hashes.values() {
        let mut it = members.iter();
        if let Some(first) = it.next() {
            for other in it {
                if dsu.union(pos[first], pos[other]) {
                    merges.push(MergeRecord {
                        a: first.clone(),
                        b: other.clone(),
                        rule: MergeRule::HashMatch,
                    });
                }
            }
        }
    }

    let mut inverted: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, set) in sets.iter().enumerate() {
        for &b in set.iter() {
            inverted.entry(b).or_default().push(i);
        }
    }
    let mut candidates: HashSet<(usize, usize)> = HashSet::new();
    for ids in inverted.values() {
        for (x, &i) in ids.iter().enumerate() {
            for &j in &ids[x + 1..] {
                // A shared bucket on one platform is a co-occurrence veto.
                if keys[i].platform_id != keys[j].platform_id {
                    candidates.insert((i, j));
                }
            }
        }
    }
    let mut candidates: Vec<(usize, usize)> = candidates.into_iter().collect();
    candidates.sort_unstable();
    for (i, j) in candidates {
        let inter = sets[i].intersection(sets[j]).count();
        let union = sets[i].len() + sets[j].len() - inter;
        if inter as f64 / union as f64 >= cfg.jaccard_threshold && dsu.union(i, j) {
            merges.push(MergeRecord {
                a: keys[i].clone(),
                b: keys[j].clone(),
                rule: MergeRule::ActivityMatch,
            });
        }
    }

    // Roots are the smallest member, so ascending root order is the order of
    // each class's smallest raw key.
    let mut root_to_unified: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unified_ids = Vec::new();
    let mut index = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        let root = dsu.find(i);
        let u = *root_to_unified.entry(root).or_insert_with(|| {
            unified_ids.push(keys[root].to_string());
            unified_ids.len() - 1
        });
        index.insert(key.clone(), u);
    }
    IdentityMap {
        index,
        unified_ids,
        merges,
    }
}
