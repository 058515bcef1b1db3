use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of numeric attributes carried by every event (and every edge).
pub const NUM_ATTRS: usize = 12;

/// Attribute column positions.
pub mod attr {
    pub const TIMESTAMP: usize = 0;
    pub const CONVERSION_GROUP: usize = 1;
    pub const AD_WEIGHT: usize = 2;
    pub const DWELL: usize = 3;
    pub const POSITION: usize = 4;
    pub const SESSION: usize = 5;
    pub const HOUR: usize = 6;
    pub const WEEKDAY: usize = 7;
    pub const REPEAT: usize = 8;
    pub const SCROLL: usize = 9;
    pub const PLATFORM_CODE: usize = 10;
    pub const LABEL_MATCH: usize = 11;

    pub const NAMES: [&str; super::NUM_ATTRS] = [
        "timestamp",
        "click_conversion_group",
        "ad_weight_index",
        "dwell_time",
        "position_index",
        "session_index",
        "hour_of_day",
        "day_of_week",
        "repeat_exposure",
        "scroll_depth",
        "platform_code",
        "label_match",
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    View,
    Click,
    Browse,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::View => "view",
            Action::Click => "click",
            Action::Browse => "browse",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "view" => Ok(Action::View),
            "click" => Ok(Action::Click),
            "browse" => Ok(Action::Browse),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

/// One user–ad interaction on one platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub platform_id: String,
    pub raw_user_id: String,
    pub hashed_id: String,
    pub ad_id: String,
    pub action: Action,
    pub timestamp: i64,
    /// Sorted, de-duplicated label codes.
    pub labels: Vec<u32>,
    pub attrs: [f64; NUM_ATTRS],
}

impl EventRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.timestamp <= 0 {
            return Err(format!(
                "timestamp must be positive, got {}",
                self.timestamp
            ));
        }
        if self.action == Action::Click && self.labels.is_empty() {
            return Err("click event without labels".into());
        }
        if let Some(i) = self.attrs.iter().position(|v| !v.is_finite()) {
            return Err(format!("attr_{i} is not finite"));
        }
        Ok(())
    }

    /// Key of the per-platform raw identity.
    pub fn raw_key(&self) -> RawUserKey {
        RawUserKey {
            platform_id: self.platform_id.clone(),
            raw_user_id: self.raw_user_id.clone(),
        }
    }
}

/// `(platform_id, raw_user_id)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RawUserKey {
    pub platform_id: String,
    pub raw_user_id: String,
}

impl fmt::Display for RawUserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.platform_id, self.raw_user_id)
    }
}

pub fn normalize_labels(labels: impl IntoIterator<Item = u32>) -> Vec<u32> {
    labels
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn parse_labels(s: &str) -> std::result::Result<Vec<u32>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split('|')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad label code {p:?}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(normalize_labels)
}

fn format_labels(labels: &[u32]) -> String {
    labels
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Jsonl,
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "jsonl" => Ok(EventFormat::Jsonl),
            other => Err(Error::Input(format!("unknown event format {other:?}"))),
        }
    }
}

impl EventFormat {
    /// Guesses from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        }
    }
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "platform_id",
        "raw_user_id",
        "hashed_id",
        "ad_id",
        "action",
        "timestamp",
        "labels",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..NUM_ATTRS).map(|i| format!("attr_{i}")));
    h
}

pub fn parse_events<R: Read>(input: R, format: EventFormat) -> Result<Vec<EventRecord>> {
    match format {
        EventFormat::Csv => parse_csv(input),
        EventFormat::Jsonl => parse_jsonl(std::io::BufReader::new(input)),
    }
}

fn parse_csv<R: Read>(input: R) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let expected = csv_header();
    if header != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header; expected {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let fail = |message: String| Error::Parse { line, message };
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let action = field(4).parse::<Action>().map_err(fail)?;
        let timestamp = field(5)
            .parse::<i64>()
            .map_err(|_| fail(format!("timestamp {:?} is not an integer", field(5))))?;
        let labels = parse_labels(field(6)).map_err(fail)?;
        let mut attrs = [0.0; NUM_ATTRS];
        for (i, a) in attrs.iter_mut().enumerate() {
            *a = field(7 + i)
                .parse::<f64>()
                .map_err(|_| fail(format!("attr_{i} {:?} is not a number", field(7 + i))))?;
        }
        let ev = EventRecord {
            platform_id: field(0).to_string(),
            raw_user_id: field(1).to_string(),
            hashed_id: field(2).to_string(),
            ad_id: field(3).to_string(),
            action,
            timestamp,
            labels,
            attrs,
        };
        ev.validate().map_err(fail)?;
        out.push(ev);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonLabels {
    List(Vec<u32>),
    Piped(String),
}

#[derive(Deserialize)]
struct JsonEvent {
    platform_id: String,
    raw_user_id: String,
    hashed_id: String,
    ad_id: String,
    action: String,
    timestamp: i64,
    labels: JsonLabels,
    #[serde(flatten)]
    rest: std::collections::BTreeMap<String, serde_json::Value>,
}

fn parse_jsonl<R: BufRead>(input: R) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let raw: JsonEvent = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let action = raw.action.parse::<Action>().map_err(fail)?;
        let labels = match raw.labels {
            JsonLabels::List(v) => normalize_labels(v),
            JsonLabels::Piped(s) => parse_labels(&s).map_err(fail)?,
        };
        let mut attrs = [0.0; NUM_ATTRS];
        for (k, a) in attrs.iter_mut().enumerate() {
            let key = format!("attr_{k}");
            *a = raw
                .rest
                .get(&key)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| fail(format!("missing or non-numeric {key}")))?;
        }
        let ev = EventRecord {
            platform_id: raw.platform_id,
            raw_user_id: raw.raw_user_id,
            hashed_id: raw.hashed_id,
            ad_id: raw.ad_id,
            action,
            timestamp: raw.timestamp,
            labels,
            attrs,
        };
        ev.validate().map_err(fail)?;
        out.push(ev);
    }
    Ok(out)
}

/// Writes events in the CSV interchange format.
pub fn write_events_csv<W: Write>(out: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for ev in events {
        let mut row = vec![
            ev.platform_id.clone(),
            ev.raw_user_id.clone(),
            ev.hashed_id.clone(),
            ev.ad_id.clone(),
            ev.action.to_string(),
            ev.timestamp.to_string(),
            format_labels(&ev.labels),
        ];
        row.extend(ev.attrs.iter().map(|a| a.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "platform_id,raw_user_id,hashed_id,ad_id,action,timestamp,labels,attr_0,attr_1,attr_2,attr_3,attr_4,attr_5,attr_6,attr_7,attr_8,attr_9,attr_10,attr_11\n";

    #[test]
    fn empty_file_with_header() {
        let evs = parse_events(HEADER.as_bytes(), EventFormat::Csv).unwrap();
        assert!(evs.is_empty());
    }

    #[test]
    fn three_row_fixture() {
        let body = format!(
            "{HEADER}\
A,u1,h1,ad7,click,1700000000,3|1,1700000000,2,0.5,30,1,0,8,2,0,0.4,0,0\n\
B,u9,h1,ad2,view,1700003600,,1700003600,0,1.5,12,0,1,9,2,1,0.9,1,0.25\n\
A,u2,h2,ad7,browse,1700007200,1,1700007200,2,0.5,45.5,2,0,10,2,0,0.1,0,1\n"
        );
        let evs = parse_events(body.as_bytes(), EventFormat::Csv).unwrap();
        assert_eq!(evs.len(), 3);
        assert_eq!(evs[0].platform_id, "A");
        assert_eq!(evs[0].labels, vec![1, 3]);
        assert_eq!(evs[0].action, Action::Click);
        assert_eq!(evs[0].timestamp, 1_700_000_000);
        assert_eq!(evs[1].hashed_id, "h1");
        assert!(evs[1].labels.is_empty());
        assert_eq!(evs[1].attrs[attr::LABEL_MATCH], 0.25);
        assert_eq!(evs[2].action, Action::Browse);
        assert_eq!(evs[2].attrs[attr::DWELL], 45.5);
    }

    #[test]
    fn unknown_action_reports_line() {
        let body = format!(
            "{HEADER}A,u1,h1,ad7,view,5,1,5,0,0,0,0,0,0,0,0,0,0,0\nA,u1,h1,ad7,purchase,6,1,6,0,0,0,0,0,0,0,0,0,0,0\n"
        );
        match parse_events(body.as_bytes(), EventFormat::Csv) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("purchase"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let short = format!("{HEADER}A,u1,h1\n");
        assert!(matches!(
            parse_events(short.as_bytes(), EventFormat::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
        let float_ts = format!("{HEADER}A,u1,h1,ad7,view,5.5,1,5,0,0,0,0,0,0,0,0,0,0,0\n");
        assert!(parse_events(float_ts.as_bytes(), EventFormat::Csv).is_err());
        let unlabeled_click = format!("{HEADER}A,u1,h1,ad7,click,5,,5,0,0,0,0,0,0,0,0,0,0,0\n");
        assert!(parse_events(unlabeled_click.as_bytes(), EventFormat::Csv).is_err());
        assert!(parse_events("a,b\n".as_bytes(), EventFormat::Csv).is_err());
    }

    #[test]
    fn jsonl_matches_csv() {
        let csv_body = format!(
            "{HEADER}A,u1,h1,ad7,click,1700000000,3|1,1700000000,2,0.5,30,1,0,8,2,0,0.4,0,0\n"
        );
        let json = r#"{"platform_id":"A","raw_user_id":"u1","hashed_id":"h1","ad_id":"ad7","action":"click","timestamp":1700000000,"labels":[3,1],"attr_0":1700000000,"attr_1":2,"attr_2":0.5,"attr_3":30,"attr_4":1,"attr_5":0,"attr_6":8,"attr_7":2,"attr_8":0,"attr_9":0.4,"attr_10":0,"attr_11":0}"#;
        let a = parse_events(csv_body.as_bytes(), EventFormat::Csv).unwrap();
        let b = parse_events(json.as_bytes(), EventFormat::Jsonl).unwrap();
        assert_eq!(a, b);
        let bad = r#"{"platform_id":"A","raw_user_id":"u1","hashed_id":"h1","ad_id":"ad7","action":"buy","timestamp":1,"labels":"1","attr_0":1,"attr_1":2,"attr_2":0.5,"attr_3":30,"attr_4":1,"attr_5":0,"attr_6":8,"attr_7":2,"attr_8":0,"attr_9":0.4,"attr_10":0,"attr_11":0}"#;
        let input = format!("{json}\n{bad}\n");
        assert!(matches!(
            parse_events(input.as_bytes(), EventFormat::Jsonl),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let body = format!(
            "{HEADER}A,u1,h1,ad7,click,1700000000,1|3,1700000000,2,0.1,30.25,1,0,8,2,0,0.4,0,0\n"
        );
        let evs = parse_events(body.as_bytes(), EventFormat::Csv).unwrap();
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &evs).unwrap();
        assert_eq!(parse_events(buf.as_slice(), EventFormat::Csv).unwrap(), evs);
        assert_eq!(String::from_utf8(buf).unwrap(), body);
    }
}
