use std::collections::BTreeMap;

use super::EventRecord;
use crate::error::{Error, Result};
use crate::graph::IdentityMap;

pub const HOUR: i64 = 3600;

/// One unified user's events grouped into fixed-width time windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSequence {
    pub user: usize,
    pub unified_id: String,
    pub delta_secs: i64,
    /// `(window index, events)` in ascending window order.
    pub windows: Vec<(i64, Vec<EventRecord>)>,
}

impl WindowedSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Groups events by `floor(timestamp / delta)` per unified user. Users come
/// out in unified-index order; within a window events are sorted by
/// timestamp, then ad id.
pub fn window_sequences(
    events: &[EventRecord],
    identity: &IdentityMap,
    delta_secs: i64,
) -> Result<Vec<WindowedSequence>> {
    if delta_secs <= 0 {
        return Err(Error::Config(format!(
            "window width must be positive, got {delta_secs}"
        )));
    }
    let mut grouped: BTreeMap<usize, BTreeMap<i64, Vec<EventRecord>>> = BTreeMap::new();
    for e in events {
        let u = identity.unified_of(e).ok_or_else(|| {
            Error::Input(format!(
                "raw user {} absent from the identity map",
                e.raw_key()
            ))
        })?;
        grouped
            .entry(u)
            .or_default()
            .entry(e.timestamp.div_euclid(delta_secs))
            .or_default()
            .push(e.clone());
    }
    Ok(grouped
        .into_iter()
        .map(|(user, windows)| WindowedSequence {
            user,
            unified_id: identity.unified_id(user).to_string(),
            delta_secs,
            windows: windows
                .into_iter()
                .map(|(w, mut evs)| {
                    evs.sort_by(|a, b| {
                        a.timestamp
                            .cmp(&b.timestamp)
                            .then_with(|| a.ad_id.cmp(&b.ad_id))
                    });
                    (w, evs)
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{unify_users, UnifyConfig};
    use crate::ingest::{Action, NUM_ATTRS};
    use proptest::prelude::*;

    fn ev(user: &str, ad: &str, ts: i64) -> EventRecord {
        EventRecord {
            platform_id: "A".into(),
            raw_user_id: user.into(),
            hashed_id: format!("h{user}"),
            ad_id: ad.into(),
            action: Action::View,
            timestamp: ts,
            labels: vec![1],
            attrs: [0.0; NUM_ATTRS],
        }
    }

    fn windows_of(events: &[EventRecord], delta: i64) -> Vec<WindowedSequence> {
        let id = unify_users(events, &UnifyConfig::default());
        window_sequences(events, &id, delta).unwrap()
    }

    #[test]
    fn boundary_splits_windows() {
        let seqs = windows_of(&[ev("u", "a", 1), ev("u", "a", 7201)], 2 * HOUR);
        let idx: Vec<i64> = seqs[0].windows.iter().map(|w| w.0).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn one_span_one_window() {
        let events: Vec<_> = (0..5)
            .map(|i| ev("u", "a", 12 * HOUR * 3 + i * 1000))
            .collect();
        let seqs = windows_of(&events, 12 * HOUR);
        assert_eq!(seqs[0].len(), 1);
        assert_eq!(seqs[0].windows[0].1.len(), 5);
    }

    #[test]
    fn twenty_event_fixture() {
        // Two users, 6h windows; hand-grouped below.
        let h = HOUR;
        let times_u = [
            1,
            2 * h,
            5 * h,
            6 * h,
            6 * h,
            11 * h,
            12 * h,
            13 * h,
            30 * h,
            31 * h,
        ];
        let times_v = [
            3 * h,
            3 * h,
            4 * h,
            7 * h,
            18 * h,
            19 * h,
            20 * h,
            23 * h,
            24 * h,
            48 * h,
        ];
        let mut events = Vec::new();
        for (i, &t) in times_u.iter().enumerate() {
            events.push(ev("u", &format!("a{}", 9 - i), t));
        }
        for (i, &t) in times_v.iter().enumerate() {
            events.push(ev("v", &format!("b{i}"), t));
        }
        events.reverse();
        let seqs = windows_of(&events, 6 * h);
        let shape = |s: &WindowedSequence| {
            s.windows
                .iter()
                .map(|(w, e)| (*w, e.len()))
                .collect::<Vec<_>>()
        };
        assert_eq!(shape(&seqs[0]), vec![(0, 3), (1, 3), (2, 2), (5, 2)]);
        assert_eq!(
            shape(&seqs[1]),
            vec![(0, 3), (1, 1), (3, 4), (4, 1), (8, 1)]
        );
        // Equal timestamps tie-break on ad id.
        let w1 = &seqs[0].windows[1].1;
        assert_eq!((w1[0].ad_id.as_str(), w1[1].ad_id.as_str()), ("a5", "a6"));
    }

    proptest! {
        #[test]
        fn windowing_partitions_events(
            raw in prop::collection::vec((0usize..4, 1i64..200_000), 0..60),
            hours in prop::sample::select(vec![2i64, 6, 12]),
        ) {
            let events: Vec<EventRecord> =
                raw.iter().map(|&(u, t)| ev(&format!("u{u}"), &format!("a{t}"), t)).collect();
            let seqs = windows_of(&events, hours * HOUR);
            let mut flat: Vec<(String, i64)> = Vec::new();
            for s in &seqs {
                prop_assert!(s.windows.windows(2).all(|w| w[0].0 < w[1].0));
                for (w, evs) in &s.windows {
                    for e in evs {
                        prop_assert_eq!(e.timestamp.div_euclid(hours * HOUR), *w);
                        flat.push((e.raw_user_id.clone(), e.timestamp));
                    }
                }
            }
            let mut input: Vec<(String, i64)> = events.iter().map(|e| (e.raw_user_id.clone(), e.timestamp)).collect();
            input.sort();
            flat.sort();
            prop_assert_eq!(flat, input);
        }
    }
}
