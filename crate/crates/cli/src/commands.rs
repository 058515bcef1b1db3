use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adrec_core::graph::{read_graph, write_graph, HeteroGraph};
use adrec_core::hpo::{self, Evaluator, Point, SearchSpace};
use adrec_core::inference::{recommend, EmbedCache, InferOptions, MemoryBudget};
use adrec_core::ingest::{
    generate_synthetic, parse_events, platform_stats, write_events_csv, EventFormat, EventRecord,
    SyntheticSpec,
};
use adrec_core::model::Encoder;
use adrec_core::scorer::predict_prob;
use adrec_core::training::{
    evaluate, graph_from_events, prepare, trace_csv, train, LabeledSample, MetricsReport,
    SavedModel, TrainConfig,
};
use adrec_core::{Error, Result};
use serde::Serialize;

use crate::{Command, Mode, Split};

pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRAPH_DIR: &str = "graph";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const BEST_FILE: &str = "best.json";
const DEFAULT_SEARCH_BUDGET: usize = 25;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            spec,
            users,
            out,
            seed,
        } => gen_data(spec.as_deref(), users, &out, seed),
        Command::BuildGraph { events, out } => build_graph_cmd(&events, &out),
        Command::Train {
            events,
            config,
            out,
            seed,
            epochs,
        } => train_cmd(&events, config.as_deref(), &out, seed, epochs),
        Command::Eval {
            model,
            events,
            predictions,
            split,
            threshold,
            report,
        } => match predictions {
            Some(p) => eval_predictions(&p, threshold, &report),
            None => eval_model(
                model.as_deref().expect("clap requires --model"),
                events.as_deref().expect("clap requires --events"),
                split,
                threshold,
                &report,
            ),
        },
        Command::Infer {
            model,
            graph,
            users,
            topk,
            rate,
            khop,
            budget,
            cache_capacity,
            cache_window,
            now,
            seed,
            out,
        } => {
            let opts = InferArgs {
                topk,
                rate,
                khop,
                budget,
                cache_capacity,
                cache_window,
                now,
                seed,
            };
            infer_cmd(&model, graph.as_deref(), &users, &opts, out.as_deref())
        }
        Command::Hpo {
            events,
            space,
            mode,
            budget,
            seed,
            config,
            epochs,
            out,
        } => hpo_cmd(
            &events,
            &space,
            mode,
            budget,
            seed,
            config.as_deref(),
            epochs,
            &out,
        ),
    }
}

fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open events {}: {e}", path.display())))?;
    let events = parse_events(file, EventFormat::from_path(path))?;
    log::info!("read {} events from {}", events.len(), path.display());
    Ok(events)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(file)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(spec_path: Option<&Path>, users: usize, out: &Path, seed: u64) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec::table3(users, seed),
    };
    spec.seed = seed;
    let data = generate_synthetic(&spec)?;
    ensure_parent(out)?;
    let file = BufWriter::new(File::create(out)?);
    write_events_csv(file, &data.events)?;
    log::info!("wrote {} events to {}", data.events.len(), out.display());

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "platform,users,events,mean_seq_len,target_seq_len,ad_types,target_ad_types,label_density,target_label_density,click_rate")?;
    for s in platform_stats(&data.events) {
        let target = spec.platforms.iter().find(|p| p.id == s.platform_id);
        let (seq, types, density) = target.map_or((f64::NAN, 0, f64::NAN), |p| {
            (p.mean_seq_len, p.ad_types, p.label_density)
        });
        writeln!(
            w,
            "{},{},{},{:.3},{},{},{},{:.3},{},{:.3}",
            s.platform_id,
            s.users,
            s.events,
            s.mean_seq_len,
            seq,
            s.ad_types,
            types,
            s.label_density,
            density,
            s.click_rate
        )?;
    }
    Ok(())
}

fn build_graph_cmd(events: &Path, out: &Path) -> Result<()> {
    let events = read_events(events)?;
    if events.is_empty() {
        return Err(Error::Input("event log is empty".into()));
    }
    let (_, _, graph) = graph_from_events(&events)?;
    write_graph(&graph, out)?;
    log::info!(
        "graph: {} users, {} ads, {} platforms, {} edges",
        graph.users.len(),
        graph.ads.len(),
        graph.platforms.len(),
        graph.edges().len()
    );
    Ok(())
}

fn warn_outside_grid(cfg: &TrainConfig) {
    let space = SearchSpace::table1();
    if !space.lr.contains(&cfg.lr)
        || !space.batch.contains(&cfg.batch)
        || !space.dim.contains(&cfg.dim)
        || !space.heads.contains(&cfg.heads)
    {
        log::warn!(
            "lr {}, batch {}, dim {}, heads {} is not a point of the default search grid",
            cfg.lr,
            cfg.batch,
            cfg.dim,
            cfg.heads
        );
    }
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::desk(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn report_json(report: &MetricsReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

fn train_cmd(
    events: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    warn_outside_grid(&cfg);
    let events = read_events(events)?;
    let exp = prepare(&events, &cfg)?;
    log::info!(
        "{} train and {} validation samples over {} nodes",
        exp.train.len(),
        exp.validation.len(),
        exp.graph.num_nodes()
    );
    let run = train(&exp.graph, &exp.train, &exp.validation, &cfg)?;
    fs::create_dir_all(out)?;
    let saved = SavedModel {
        config: cfg.clone(),
        snapshot: run.snapshot,
    };
    saved.save(&out.join(MODEL_FILE))?;
    fs::write(out.join(TRACE_FILE), trace_csv(&run.trace))?;
    write_graph(&exp.graph, &out.join(GRAPH_DIR))?;
    let report = evaluate(
        &saved.snapshot.params,
        &exp.graph,
        &cfg.model_config(),
        &exp.validation,
        0.5,
    )?;
    fs::write(out.join(METRICS_FILE), report_json(&report)?)?;
    match (saved.snapshot.epoch, saved.snapshot.val_loss) {
        (Some(e), Some(v)) => log::info!("best snapshot at epoch {e} with validation loss {v:.6}"),
        _ => log::info!("no epochs run; saved the initialisation"),
    }
    Ok(())
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, report_json(report)?)?;
    fs::write(path.with_extension("csv"), report.to_table_csv())?;
    Ok(())
}

fn eval_model(
    model_dir: &Path,
    events: &Path,
    split: Split,
    threshold: f64,
    report: &Path,
) -> Result<()> {
    let saved = SavedModel::load(&model_dir.join(MODEL_FILE))?;
    let events = read_events(events)?;
    let exp = prepare(&events, &saved.config)?;
    let samples: Vec<LabeledSample> = match split {
        Split::Validation => exp.validation.clone(),
        Split::Train => exp.train.clone(),
        Split::All => exp.all_samples(),
    };
    let r = evaluate(
        &saved.snapshot.params,
        &exp.graph,
        &saved.config.model_config(),
        &samples,
        threshold,
    )?;
    for s in &r.splits {
        let auc = s.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        log::info!(
            "{}: accuracy {:.4}, f1 {:.4}, auc {auc}",
            s.split,
            s.accuracy,
            s.f1
        );
    }
    write_report(&r, report)
}

#[derive(serde::Deserialize)]
struct PredictionRow {
    platform: String,
    label: u8,
    prob: f64,
}

fn eval_predictions(path: &Path, threshold: f64, report: &Path) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut platforms = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if row.label > 1 || !(0.0..=1.0).contains(&row.prob) {
            return Err(Error::Parse {
                line: i + 2,
                message: "label must be 0 or 1 and prob within [0, 1]".into(),
            });
        }
        probs.push(row.prob);
        labels.push(row.label);
        platforms.push(row.platform);
    }
    let r = MetricsReport::from_predictions(&probs, &labels, &platforms, threshold)?;
    write_report(&r, report)
}

pub struct InferArgs {
    pub topk: usize,
    pub rate: f64,
    pub khop: usize,
    pub budget: Option<u64>,
    pub cache_capacity: usize,
    pub cache_window: i64,
    pub now: Option<i64>,
    pub seed: u64,
}

#[derive(Serialize)]
struct RankedLine<'a> {
    user: &'a str,
    rank: usize,
    ad: &'a str,
    score: f64,
    prob: f64,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    user: &'a str,
    error: String,
}

fn latest_timestamp(graph: &HeteroGraph) -> i64 {
    graph.edges().iter().map(|e| e.timestamp).max().unwrap_or(0)
}

fn infer_cmd(
    model_dir: &Path,
    graph_dir: Option<&Path>,
    users: &Path,
    args: &InferArgs,
    out: Option<&Path>,
) -> Result<()> {
    let saved = SavedModel::load(&model_dir.join(MODEL_FILE))?;
    let graph_dir: PathBuf = graph_dir.map_or_else(|| model_dir.join(GRAPH_DIR), Path::to_path_buf);
    let graph = read_graph(&graph_dir)?;
    let ids: Vec<String> = fs::read_to_string(users)
        .map_err(|e| Error::Input(format!("cannot read users {}: {e}", users.display())))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let model_cfg = saved.config.model_config();
    let encoder = Encoder::new(&graph, &model_cfg)?;
    let budget = args
        .budget
        .map_or(MemoryBudget::unlimited(), |bytes| MemoryBudget { bytes });
    let opts = InferOptions {
        k: args.khop,
        rate: args.rate,
        seed: args.seed,
        budget,
        now: args.now.unwrap_or_else(|| latest_timestamp(&graph)),
    };
    eprintln!(
        "infer: rate={} khop={} topk={} budget={} cache_capacity={} cache_window={} users={}",
        opts.rate,
        opts.k,
        args.topk,
        args.budget
            .map_or("unlimited".to_string(), |b| b.to_string()),
        args.cache_capacity,
        args.cache_window,
        ids.len()
    );
    if args.topk == 0 {
        return Err(Error::Config("--topk must be at least 1".into()));
    }
    let cache = EmbedCache::new(args.cache_capacity, args.cache_window)?;
    let known: Vec<usize> = ids.iter().filter_map(|id| encoder.user_index(id)).collect();
    let ranked = if known.is_empty() {
        Vec::new()
    } else {
        let (ranked, stats) = recommend(
            &encoder,
            &saved.snapshot.params,
            &known,
            args.topk,
            &opts,
            &cache,
        )?;
        log::info!(
            "inference ran {} sub-batches, rows per layer {:?}",
            stats.batches,
            stats.computed
        );
        ranked
    };

    let mut sink: Box<dyn Write> = match out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut next = ranked.iter();
    for id in &ids {
        if encoder.user_index(id).is_none() {
            let line = ErrorLine {
                user: id,
                error: "unknown user".into(),
            };
            writeln!(sink, "{}", serde_json::to_string(&line)?)?;
            continue;
        }
        for (i, r) in next
            .next()
            .expect("one ranking per known user")
            .iter()
            .enumerate()
        {
            let line = RankedLine {
                user: id,
                rank: i + 1,
                ad: &r.ad,
                score: r.score,
                prob: predict_prob(r.score),
            };
            writeln!(sink, "{}", serde_json::to_string(&line)?)?;
        }
    }
    sink.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BestConfig {
    trial: usize,
    val_loss: f64,
    point: Point,
    config: TrainConfig,
}

#[allow(clippy::too_many_arguments)]
fn hpo_cmd(
    events: &Path,
    space: &str,
    mode: Mode,
    budget: Option<usize>,
    seed: u64,
    config: Option<&Path>,
    epochs: usize,
    out: &Path,
) -> Result<()> {
    let space = SearchSpace::from_arg(space)?;
    if budget == Some(0) {
        return Err(Error::Config("--budget must be at least 1".into()));
    }
    let base = load_config(config, seed)?;
    let events = read_events(events)?;
    let exp = prepare(&events, &base)?;
    fs::create_dir_all(out)?;
    let ledger = out.join(LEDGER_FILE);
    if ledger.exists() {
        fs::remove_file(&ledger)?;
    }
    let objective = hpo::training_objective(&exp.graph, &exp.train, &exp.validation, &base, epochs);
    let mut eval = Evaluator::new(objective).with_ledger(&ledger)?;
    match mode {
        Mode::Grid => hpo::grid_search(&space, budget, &mut eval)?,
        Mode::Bayes => {
            let total = budget.unwrap_or(DEFAULT_SEARCH_BUDGET);
            let init = hpo::DEFAULT_INIT.min(total);
            hpo::bayes_opt(&space, init, total - init, seed, &mut eval)?
        }
        Mode::Combined => hpo::combined(
            &space,
            budget.unwrap_or(DEFAULT_SEARCH_BUDGET),
            seed,
            &mut eval,
        )?,
    }
    let trials = eval.into_trials();
    let best = hpo::select_best(&trials)?;
    log::info!(
        "{} trials; best is trial {} at {:?}",
        trials.len(),
        best.trial,
        best.point
    );
    write_json(
        &out.join(BEST_FILE),
        &BestConfig {
            trial: best.trial,
            val_loss: best.val_loss.expect("best trial is done"),
            point: best.point,
            config: best.point.apply(&base),
        },
    )
}
