use adrec_core::graph::{read_graph, write_graph};
use adrec_core::inference::{recommend, EmbedCache, InferOptions};
use adrec_core::ingest::{
    generate_synthetic, parse_events, write_events_csv, EventFormat, SyntheticSpec,
};
use adrec_core::model::Encoder;
use adrec_core::scorer::score;
use adrec_core::training::{
    evaluate, graph_from_events, prepare, train, SavedModel, TrainConfig, MERGED,
};

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        dim: 8,
        heads: 2,
        time_dim: 4,
        batch: 64,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn events_and_graph_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let events = generate_synthetic(&SyntheticSpec::small(3, 25))
        .unwrap()
        .events;
    let mut csv = Vec::new();
    write_events_csv(&mut csv, &events).unwrap();
    let parsed = parse_events(csv.as_slice(), EventFormat::Csv).unwrap();
    assert_eq!(parsed, events);

    let (identity, _, graph) = graph_from_events(&parsed).unwrap();
    assert_eq!(graph.users.len(), identity.len());
    assert_eq!(graph.platforms.len(), 3);
    write_graph(&graph, dir.path()).unwrap();
    assert_eq!(read_graph(dir.path()).unwrap(), graph);
}

#[test]
fn trained_model_reloads_and_recommends() {
    let dir = tempfile::tempdir().unwrap();
    let events = generate_synthetic(&SyntheticSpec::small(2, 30))
        .unwrap()
        .events;
    let cfg = small_config();
    let exp = prepare(&events, &cfg).unwrap();
    let run = train(&exp.graph, &exp.train, &exp.validation, &cfg).unwrap();
    assert_eq!(run.trace.len(), cfg.epochs);

    let path = dir.path().join("model.json");
    SavedModel {
        config: cfg.clone(),
        snapshot: run.snapshot.clone(),
    }
    .save(&path)
    .unwrap();
    let loaded = SavedModel::load(&path).unwrap();
    assert_eq!(loaded.snapshot, run.snapshot);

    let model = cfg.model_config();
    let report = evaluate(
        &loaded.snapshot.params,
        &exp.graph,
        &model,
        &exp.validation,
        0.5,
    )
    .unwrap();
    let merged = report.merged();
    assert_eq!(merged.split, MERGED);
    assert_eq!(merged.positives + merged.negatives, exp.validation.len());

    let enc = Encoder::new(&exp.graph, &model).unwrap();
    let opts = InferOptions {
        k: model.depth(),
        rate: 1.0,
        ..InferOptions::new(exp.cutoff)
    };
    let cache = EmbedCache::new(1000, model.window_secs).unwrap();
    let users = [0, 3, 5];
    let (ranked, _) = recommend(&enc, &loaded.snapshot.params, &users, 5, &opts, &cache).unwrap();
    let (seqs, ads) = enc
        .embed(
            &loaded.snapshot.params,
            &users,
            &(0..exp.graph.ads.len()).collect::<Vec<_>>(),
        )
        .unwrap();
    for (list, seq) in ranked.iter().zip(&seqs) {
        assert_eq!(list.len(), 5);
        for r in list {
            let a = exp.graph.find_ad(&r.ad).unwrap();
            assert_eq!(
                r.score,
                score(&loaded.snapshot.params, seq, ads.row(a)).unwrap()
            );
        }
        assert!(list.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
