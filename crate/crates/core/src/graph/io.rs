//! Directory-of-CSV graph format. Floats are written in shortest
//! round-trip form so a reload is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use super::{AdNode, Edge, HeteroGraph, NodeKind, NodeRef, PlatformNode, UserNode};
use crate::error::{Error, Result};
use crate::ingest::NUM_ATTRS;

fn node_file(kind: NodeKind) -> String {
    format!("nodes_{}.csv", kind.as_str())
}

fn write_table<const N: usize>(
    path: &Path,
    rows: impl Iterator<Item = (String, [f64; N])>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["id".to_string()];
    header.extend((0..N).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for (id, feats) in rows {
        let mut rec = vec![id];
        rec.extend(feats.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize, file: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line() as usize);
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("{file}: missing column {i}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{file}: cannot parse {raw:?} in column {i}"),
    })
}

fn read_table<const N: usize>(path: &Path) -> Result<Vec<(String, [f64; N])>> {
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or("")
        .to_string();
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    if r.headers()?.len() != N + 1 {
        return Err(Error::Parse {
            line: 1,
            message: format!("{file}: expected {} columns", N + 1),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut feats = [0.0; N];
        for (i, f) in feats.iter_mut().enumerate() {
            *f = parse_field(&rec, i + 1, &file)?;
        }
        out.push((rec[0].to_string(), feats));
    }
    Ok(out)
}

pub fn write_graph(graph: &HeteroGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(
        &dir.join(node_file(NodeKind::User)),
        graph
            .users
            .iter()
            .map(|u| (u.unified_user_id.clone(), u.features)),
    )?;
    write_table(
        &dir.join(node_file(NodeKind::Ad)),
        graph.ads.iter().map(|a| (a.ad_id.clone(), a.features)),
    )?;
    write_table(
        &dir.join(node_file(NodeKind::Platform)),
        graph
            .platforms
            .iter()
            .map(|p| (p.platform_id.clone(), p.features)),
    )?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("edges.csv"))?));
    let mut header: Vec<String> = ["kind", "src_kind", "src", "dst_kind", "dst", "weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..NUM_ATTRS).map(|i| format!("attr_{i}")));
    header.push("timestamp".into());
    w.write_record(&header)?;
    for e in graph.edges() {
        let mut rec = vec![
            e.kind.as_str().to_string(),
            e.src.kind.as_str().to_string(),
            e.src.index.to_string(),
            e.dst.kind.as_str().to_string(),
            e.dst.index.to_string(),
            e.weight.to_string(),
        ];
        rec.extend(e.attrs.iter().map(f64::to_string));
        rec.push(e.timestamp.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph(dir: &Path) -> Result<HeteroGraph> {
    let users = read_table(&dir.join(node_file(NodeKind::User)))?
        .into_iter()
        .map(|(unified_user_id, features)| UserNode {
            unified_user_id,
            features,
        })
        .collect();
    let ads = read_table(&dir.join(node_file(NodeKind::Ad)))?
        .into_iter()
        .map(|(ad_id, features)| AdNode { ad_id, features })
        .collect();
    let platforms = read_table(&dir.join(node_file(NodeKind::Platform)))?
        .into_iter()
        .map(|(platform_id, features)| PlatformNode {
            platform_id,
            features,
        })
        .collect();

    let mut r = csv::Reader::from_reader(BufReader::new(File::open(dir.join("edges.csv"))?));
    let expected = 6 + NUM_ATTRS + 1;
    if r.headers()?.len() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("edges.csv: expected {expected} columns"),
        });
    }
    let mut edges = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = "edges.csv";
        let mut attrs = [0.0; NUM_ATTRS];
        for (i, a) in attrs.iter_mut().enumerate() {
            *a = parse_field(&rec, 6 + i, f)?;
        }
        edges.push(Edge {
            kind: parse_field(&rec, 0, f)?,
            src: NodeRef {
                kind: parse_field(&rec, 1, f)?,
                index: parse_field(&rec, 2, f)?,
            },
            dst: NodeRef {
                kind: parse_field(&rec, 3, f)?,
                index: parse_field(&rec, 4, f)?,
            },
            weight: parse_field(&rec, 5, f)?,
            attrs,
            timestamp: parse_field(&rec, 6 + NUM_ATTRS, f)?,
        });
    }
    HeteroGraph::new(users, ads, platforms, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        build_graph, derive_cross_platform_edges, unify_users, CrossPlatformConfig, UnifyConfig,
    };
    use crate::ingest::{default_schema, fit_normalizer, generate_synthetic, SyntheticSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = SyntheticSpec::small(3, 40);
        let data = generate_synthetic(&spec).unwrap();
        let events = data.events;
        let id = unify_users(&events, &UnifyConfig::default());
        let stats = fit_normalizer(&events, &default_schema()).unwrap();
        let mut g = build_graph(&events, &id, &stats).unwrap();
        derive_cross_platform_edges(
            &mut g,
            &events,
            &id,
            &stats,
            &CrossPlatformConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_graph(&g, dir.path()).unwrap();
        let back = read_graph(dir.path()).unwrap();
        assert_eq!(back, g);
        let bits = |g: &HeteroGraph| -> Vec<u64> {
            g.edges()
                .iter()
                .flat_map(|e| e.attrs.iter().map(|a| a.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&g));
    }
}
