use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use knnfuse::ann::{bench_query, recall_at_k, AnnIndex, AnnParams, ExactIndex, Retriever};
use knnfuse::embedders::{
    build_memory_from_catalog, ingest_precomputed, ImportedVectors, KeyEmbedderConfig, OneHotTable, ValueEmbedderMode,
    VectorTable,
};
use knnfuse::encoder::{
    evaluate, layer_ablation, overlap_sweep, spearman, standard_site_sets, swap_catalog_eval, train, EncoderModel,
    EvalReport, SyntheticTask,
};
use knnfuse::fusion::{gradcheck, GradGroup, GradcheckShape};
use knnfuse::memory::{merge_memories, read_catalog, ExternalMemory};
use knnfuse::Error;
use rand::SeedableRng;

use crate::settings::{sha256_file, Report, Run};
use crate::{
    AblateArgs, CatalogBuildArgs, CatalogCmd, CatalogIngestArgs, CatalogMergeArgs, CatalogStatsArgs, Command, DataArgs,
    EvalArgs, Flags, Global, GradcheckArgs, IndexBenchArgs, IndexBuildArgs, IndexCmd, IndexQueryArgs, SwapArgs,
    SweepArgs, TrainArgs,
};

pub fn dispatch(global: &Global, cmd: Command) -> Result<ExitCode> {
    let mut flags = Flags::new(global);
    match cmd {
        Command::Catalog(CatalogCmd::Build(a)) => catalog_build(global, &mut flags, a),
        Command::Catalog(CatalogCmd::Ingest(a)) => catalog_ingest(global, &mut flags, a),
        Command::Catalog(CatalogCmd::Merge(a)) => catalog_merge(global, &mut flags, a),
        Command::Catalog(CatalogCmd::Stats(a)) => catalog_stats(a),
        Command::Index(IndexCmd::Build(a)) => index_build(global, &mut flags, a),
        Command::Index(IndexCmd::Query(a)) => index_query(global, &mut flags, a),
        Command::Index(IndexCmd::Bench(a)) => index_bench(global, &mut flags, a),
        Command::Data(a) => data(global, &mut flags, a),
        Command::Train(a) => cmd_train(global, &mut flags, a),
        Command::Eval(a) => cmd_eval(global, &mut flags, a),
        Command::Sweep(a) => cmd_sweep(global, &mut flags, a),
        Command::Ablate(a) => cmd_ablate(global, &mut flags, a),
        Command::Swap(a) => cmd_swap(global, &mut flags, a),
        Command::Gradcheck(a) => cmd_gradcheck(global, &mut flags, a),
    }
    .map(|code| code.unwrap_or(ExitCode::SUCCESS))
}

fn run(global: &Global, flags: &Flags) -> Result<Run> {
    Run::new(global.config.as_deref(), global.out_dir.as_deref(), &flags.0)
}

fn print_stats(mem: &ExternalMemory) {
    let s = mem.stats();
    println!(
        "records {}  d_key {}  d_value {}  key norm mean {:.6}  stddev {:.6}",
        s.count, s.d_key, s.d_value, s.key_norm_mean, s.key_norm_stddev
    );
}

fn save_memory(run: &Run, mem: &ExternalMemory, out: &Path) -> Result<()> {
    let path = run.output(out)?;
    mem.save(&path)?;
    run.snapshot(&path)?;
    print_stats(mem);
    println!("wrote {}", path.display());
    Ok(())
}

type Outcome = Result<Option<ExitCode>>;

fn catalog_build(global: &Global, flags: &mut Flags, a: CatalogBuildArgs) -> Outcome {
    flags
        .set("embed.d_key", a.d_key)
        .set("embed.n_voices", a.voices)
        .set("embed.voices_per_entry", a.voices_per_entry)
        .set("embed.frames_per_char", a.frames_per_char)
        .set("embed.values", a.values)
        .set("embed.table_size", a.table_size)
        .set("embed.d_value", a.d_value);
    let mut run = run(global, flags)?;
    let catalog = read_catalog(&a.catalog)?;
    let base = KeyEmbedderConfig::default();
    let kcfg = KeyEmbedderConfig {
        d_key: run.param("embed.d_key", base.d_key)?,
        n_voices: run.param("embed.n_voices", base.n_voices)?,
        seed: run.param("embed.seed", base.seed)?,
        frames_per_char: run.param("embed.frames_per_char", base.frames_per_char)?,
    };
    let voices = run.param("embed.voices_per_entry", kcfg.n_voices)?;
    let mode = match run.str_param("embed.values", "onehot").as_str() {
        "onehot" => {
            let size = run.param("embed.table_size", catalog.len())?;
            let d_value = run.param("embed.d_value", 32usize)?;
            ValueEmbedderMode::OneHot(OneHotTable::for_catalog(&catalog, size, d_value, kcfg.seed)?)
        }
        "pretrained" => ValueEmbedderMode::PretrainedLookup(VectorTable::load(need_vectors(&a.vectors)?)?),
        "imported" => ValueEmbedderMode::ImportedFile(ImportedVectors::load(need_vectors(&a.vectors)?)?),
        other => {
            return Err(Error::InvalidArgument(format!(
                "--values must be onehot, pretrained or imported, got {other:?}"
            ))
            .into())
        }
    };
    let mem = build_memory_from_catalog(&catalog, &kcfg, &mode, voices)?;
    save_memory(&run, &mem, &a.out)?;
    Ok(None)
}

fn need_vectors(p: &Option<std::path::PathBuf>) -> Result<&Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidArgument("this value mode needs --vectors".into()).into())
}

fn catalog_ingest(global: &Global, flags: &mut Flags, a: CatalogIngestArgs) -> Outcome {
    let run = run(global, flags)?;
    let catalog = read_catalog(&a.catalog)?;
    let keys = ImportedVectors::load(&a.keys)?;
    let values = ImportedVectors::load(&a.values)?;
    let mem = ingest_precomputed(&keys, &values, &catalog)?;
    save_memory(&run, &mem, &a.out)?;
    Ok(None)
}

fn catalog_merge(global: &Global, flags: &mut Flags, a: CatalogMergeArgs) -> Outcome {
    let run = run(global, flags)?;
    let left = ExternalMemory::load(&a.left)?;
    let right = ExternalMemory::load(&a.right)?;
    let merged = merge_memories(&left, &right)?;
    for (old, new) in &merged.remap {
        println!("remapped {old} -> {new}");
    }
    save_memory(&run, &merged.memory, &a.out)?;
    Ok(None)
}

fn catalog_stats(a: CatalogStatsArgs) -> Outcome {
    let mem = ExternalMemory::load(&a.memory)?;
    print_stats(&mem);
    println!("provenance {}", mem.provenance());
    Ok(None)
}

fn index_build(global: &Global, flags: &mut Flags, a: IndexBuildArgs) -> Outcome {
    flags
        .set("ann.n_subspaces", a.n_subspaces)
        .set("ann.m", a.hnsw_m)
        .set("ann.ef_construction", a.ef_construction)
        .set("ann.n_centroids", a.centroids)
        .set("ann.opq_iters", a.opq_iters);
    let mut run = run(global, flags)?;
    let mem = ExternalMemory::load(&a.memory)?;
    let params = run.ann("ann.", AnnParams::for_dim(mem.d_key()))?;
    let index = AnnIndex::build(&mem, &params)?;
    let path = run.output(&a.out)?;
    index.save(&path)?;
    run.snapshot(&path)?;
    println!("indexed {} records ({} coarse centroids) into {}", index.len(), index.n_coarse(), path.display());
    Ok(None)
}

fn load_queries(path: &Path, d_key: usize) -> Result<Vec<(u64, Vec<f32>)>> {
    let q = ImportedVectors::load(path)?;
    if q.dim() != d_key {
        return Err(Error::Shape(format!("queries have {} components, index expects {d_key}", q.dim())).into());
    }
    Ok(q.ids().map(|id| (id, q.get(id).unwrap().to_vec())).collect())
}

fn index_query(global: &Global, flags: &mut Flags, a: IndexQueryArgs) -> Outcome {
    flags.set("query.m", a.m).set("query.ef", a.ef);
    let mut run = run(global, flags)?;
    let m = run.param("query.m", 8usize)?;
    let ef = run.param("query.ef", 64usize)?;
    let index = AnnIndex::load(&a.index)?;
    let queries = load_queries(&a.queries, index.d_key())?;
    let path = run.output(&a.out)?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(&path)?;
    w.write_record(["query_id", "rank", "record_id", "distance"])?;
    for (qid, q) in &queries {
        for (rank, n) in index.knn(q, m, ef)?.iter().enumerate() {
            w.write_record([qid.to_string(), rank.to_string(), n.record_id.to_string(), n.distance.to_string()])?;
        }
    }
    w.flush()?;
    run.snapshot(&path)?;
    Ok(None)
}

fn index_bench(global: &Global, flags: &mut Flags, a: IndexBenchArgs) -> Outcome {
    flags.set("query.m", a.m).set("query.ef", a.ef);
    let mut run = run(global, flags)?;
    let m = run.param("query.m", 8usize)?;
    let ef = run.param("query.ef", 64usize)?;
    let index = AnnIndex::load(&a.index)?;
    let queries: Vec<Vec<f32>> = load_queries(&a.queries, index.d_key())?.into_iter().map(|q| q.1).collect();
    let memory = match (&a.memory, a.with_oracle) {
        (Some(p), _) => Some(ExternalMemory::load(p)?),
        (None, true) => return Err(Error::InvalidArgument("--with-oracle needs --memory".into()).into()),
        (None, false) => None,
    };
    if let Some(mem) = &memory {
        // reject a memory the index was not built over before timing anything
        knnfuse::ann::AnnSearcher::new(&index, mem, ef)?;
    }
    let oracle = memory.as_ref().filter(|_| a.with_oracle);
    let recall = oracle.map(|mem| recall_at_k(&index, mem, &queries, m, ef)).transpose()?;
    let r = bench_query(&index, &queries, m, ef, oracle)?;

    let path = run.output(&a.out)?;
    let mut report = Report::create(
        &path,
        &[
            "n_records",
            "n_queries",
            "m",
            "ef_search",
            "distance_computations_per_query",
            "recall_at_m",
            "config_fingerprint",
            "p50_latency_us",
            "p95_latency_us",
            "exact_p50_latency_us",
            "exact_p95_latency_us",
        ],
    )?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    report.row(&[
        index.len().to_string(),
        r.n_queries.to_string(),
        m.to_string(),
        ef.to_string(),
        r.distance_computations_per_query.to_string(),
        opt(recall),
        run.fingerprint(),
        r.p50_latency_us.to_string(),
        r.p95_latency_us.to_string(),
        opt(r.exact_p50_latency_us),
        opt(r.exact_p95_latency_us),
    ])?;
    report.finish()?;
    run.snapshot(&path)?;
    if let Some(rec) = recall {
        println!("recall@{m} {rec:.4}");
    }
    println!(
        "p50 {:.1} µs  p95 {:.1} µs  {:.1} distance computations/query",
        r.p50_latency_us, r.p95_latency_us, r.distance_computations_per_query
    );
    Ok(None)
}

fn data(global: &Global, flags: &mut Flags, a: DataArgs) -> Outcome {
    flags
        .set("task.n_train_utts", a.train_utts)
        .set("task.n_test_utts", a.test_utts)
        .set("task.noise", a.noise);
    let mut run = run(global, flags)?;
    let task = SyntheticTask::generate(&run.task()?)?;
    let path = run.output(&a.out)?;
    task.save(&path)?;
    run.snapshot(&path)?;
    println!(
        "vocab {}  train {} utterances  test {} utterances -> {}",
        task.vocab_size(),
        task.train.len(),
        task.test.len(),
        path.display()
    );
    Ok(None)
}

fn model_flags(flags: &mut Flags, layers: Option<usize>, sites: Option<String>, epochs: Option<usize>) {
    flags
        .set("model.n_layers", layers)
        .set("model.fusion_at", sites)
        .set("train.epochs", epochs);
}

fn cmd_train(global: &Global, flags: &mut Flags, a: TrainArgs) -> Outcome {
    model_flags(flags, a.layers, a.sites, a.epochs);
    flags.set("train.lr", a.lr).set("train.batch", a.batch);
    let mut run = run(global, flags)?;
    let task = SyntheticTask::load(&a.data)?;
    let mcfg = run.model(task.cfg.d_key)?;
    let tcfg = run.train()?;
    let memory = match &a.memory {
        Some(p) => ExternalMemory::load(p)?,
        None => task.build_memory(&task.train_catalog()?)?,
    };
    let mut model = EncoderModel::new(mcfg, task.label_table.clone())?;
    if model.has_fusion() {
        model.check_memory(memory.d_key(), memory.d_value())?;
    }
    let r = train(&mut model, &task, Some(&memory), &tcfg)?;

    let ckpt = run.output(&a.out)?;
    model.save(&ckpt)?;
    run.snapshot(&ckpt)?;
    let report_path = match &a.report {
        Some(p) => run.output(p)?,
        None => {
            let mut s = ckpt.as_os_str().to_owned();
            s.push(".csv");
            s.into()
        }
    };
    let mut report = Report::create(&report_path, &["epoch", "loss", "train_loss", "model_fingerprint", "config_fingerprint"])?;
    let fp = run.fingerprint();
    for (epoch, loss) in r.heldout_loss.iter().enumerate() {
        let train_loss = epoch.checked_sub(1).map_or_else(String::new, |e| r.train_loss[e].to_string());
        report.row(&[epoch.to_string(), loss.to_string(), train_loss, model.fingerprint(), fp.clone()])?;
    }
    report.finish()?;
    println!(
        "held-out loss {:.6} -> {:.6} over {} steps; checkpoint {}",
        r.heldout_loss[0],
        r.heldout_loss.last().unwrap(),
        r.steps,
        ckpt.display()
    );
    Ok(None)
}

/// Dataset and checkpoint, checked against each other.
fn load_pair(data: &Path, model: &Path) -> Result<(SyntheticTask, EncoderModel)> {
    let task = SyntheticTask::load(data)?;
    let model = EncoderModel::load(model)?;
    if model.vocab_size() != task.vocab_size() || model.config().d_model != task.cfg.d_key {
        return Err(Error::Shape(format!(
            "model ({} labels, d_model {}) does not fit the dataset ({} labels, d_key {})",
            model.vocab_size(),
            model.config().d_model,
            task.vocab_size(),
            task.cfg.d_key
        ))
        .into());
    }
    Ok((task, model))
}

const EVAL_COLUMNS: [&str; 12] = [
    "memory",
    "overlap",
    "n_records",
    "n_utterances",
    "n_frames",
    "token_error_rate",
    "n_rare_frames",
    "rare_token_accuracy",
    "model_fingerprint",
    "config_fingerprint",
    "fused_latency_us",
    "plain_latency_us",
];

fn eval_row(label: &str, overlap: Option<f64>, n_records: usize, r: &EvalReport, fp: &str) -> Vec<String> {
    vec![
        label.to_string(),
        overlap.map_or_else(String::new, |o| o.to_string()),
        n_records.to_string(),
        r.n_utterances.to_string(),
        r.n_frames.to_string(),
        r.token_error_rate.to_string(),
        r.n_rare_frames.to_string(),
        r.rare_token_accuracy.to_string(),
        r.model_fingerprint.clone(),
        fp.to_string(),
        r.fused_latency_us.to_string(),
        r.plain_latency_us.to_string(),
    ]
}

fn eval_header() -> Vec<&'static str> {
    EVAL_COLUMNS.to_vec()
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_eval(global: &Global, flags: &mut Flags, a: EvalArgs) -> Outcome {
    flags.set("eval.overlap", a.overlap).set("eval.exact", a.exact.then_some(true));
    let mut run = run(global, flags)?;
    let (task, model) = load_pair(&a.data, &a.model)?;
    let (label, overlap, memory) = match &a.memory {
        Some(p) => (file_label(p), None, ExternalMemory::load(p)?),
        None => {
            let o = run.param("eval.overlap", 1.0f64)?;
            (format!("test_catalog({o})"), Some(o), task.build_memory(&task.test_catalog(o)?)?)
        }
    };
    model.check_memory(memory.d_key(), memory.d_value())?;
    let report = if run.param("eval.exact", false)? {
        let exact = ExactIndex::new(&memory);
        evaluate(&model, &task.kinds, &task.test, Some(&exact as &dyn Retriever))?
    } else {
        let retrieval = run.eval_retrieval(memory.d_key())?;
        knnfuse::encoder::evaluate_with_memory(&model, &task, &memory, &retrieval)?
    };
    let path = run.output(&a.out)?;
    let mut out = Report::create(&path, &eval_header())?;
    out.row(&eval_row(&label, overlap, memory.len(), &report, &run.fingerprint()))?;
    out.finish()?;
    run.snapshot(&path)?;
    println!(
        "token error rate {:.4}  rare-token accuracy {:.4} ({} rare frames)",
        report.token_error_rate, report.rare_token_accuracy, report.n_rare_frames
    );
    Ok(None)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad overlap value {v:?}")).into())
        })
        .collect()
}

fn cmd_sweep(global: &Global, flags: &mut Flags, a: SweepArgs) -> Outcome {
    flags.set("sweep.grid", a.grid);
    let mut run = run(global, flags)?;
    let (task, model) = load_pair(&a.data, &a.model)?;
    let default_grid = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
    let grid = parse_grid(&run.str_param("sweep.grid", default_grid))?;
    if grid.is_empty() {
        bail!(Error::InvalidArgument("empty overlap grid".into()));
    }
    let retrieval = run.eval_retrieval(task.cfg.d_key)?;
    let points = overlap_sweep(&model, &task, &grid, &retrieval)?;
    let path = run.output(&a.out)?;
    let mut out = Report::create(&path, &eval_header())?;
    let fp = run.fingerprint();
    for p in &points {
        let n_records = task.test_catalog(p.overlap)?.len() * task.cfg.voices_per_entry;
        out.row(&eval_row("test_catalog", Some(p.overlap), n_records, &p.report, &fp))?;
    }
    out.finish()?;
    run.snapshot(&path)?;
    for p in &points {
        println!("overlap {:.2}  ter {:.4}  rare acc {:.4}", p.overlap, p.report.token_error_rate, p.report.rare_token_accuracy);
    }
    if points.len() >= 2 {
        let xs: Vec<f64> = points.iter().map(|p| p.overlap).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.report.token_error_rate).collect();
        if let Ok(rho) = spearman(&xs, &ys) {
            println!("spearman(overlap, ter) {rho:.4}");
        }
    }
    Ok(None)
}

fn parse_site_sets(s: &str, n_layers: usize) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|set| match set {
            "none" => Ok(vec![]),
            "all" => Ok((1..=n_layers).collect()),
            _ => set
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad site {x:?} in {set:?}")).into())
                })
                .collect(),
        })
        .collect()
}

fn sites_label(sites: &[usize]) -> String {
    if sites.is_empty() {
        "none".into()
    } else {
        sites.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
}

fn cmd_ablate(global: &Global, flags: &mut Flags, a: AblateArgs) -> Outcome {
    flags
        .set("ablate.site_sets", a.site_sets)
        .set("eval.overlap", a.overlap)
        .set("model.n_layers", a.layers)
        .set("train.epochs", a.epochs);
    let mut run = run(global, flags)?;
    let task = SyntheticTask::load(&a.data)?;
    let base = run.model(task.cfg.d_key)?;
    let tcfg = run.train()?;
    let default_sets: Vec<String> = standard_site_sets(base.n_layers).iter().map(|s| sites_label(s).replace(' ', ",")).collect();
    let mut sets = parse_site_sets(&run.str_param("ablate.site_sets", &default_sets.join(";")), base.n_layers)?;
    // shallow stacks map several standard positions onto the same block
    let mut seen = std::collections::HashSet::new();
    sets.retain(|s| seen.insert(s.clone()));
    if sets.is_empty() {
        bail!(Error::InvalidArgument("no site sets given".into()));
    }
    let overlap = run.param("eval.overlap", 1.0f64)?;
    let reps = run.param("ablate.latency_reps", 3usize)?;
    let retrieval = run.eval_retrieval(task.cfg.d_key)?;
    let train_mem = task.build_memory(&task.train_catalog()?)?;
    let eval_mem = task.build_memory(&task.test_catalog(overlap)?)?;
    let rows = layer_ablation(&task, &base, &sets, &tcfg, &train_mem, &eval_mem, &retrieval, reps)?;

    let path = run.output(&a.out)?;
    let mut out = Report::create(
        &path,
        &[
            "sites",
            "n_sites",
            "final_heldout_loss",
            "token_error_rate",
            "rare_token_accuracy",
            "model_fingerprint",
            "config_fingerprint",
            "latency_ratio",
        ],
    )?;
    let fp = run.fingerprint();
    for r in &rows {
        out.row(&[
            sites_label(&r.sites),
            r.sites.len().to_string(),
            r.train.heldout_loss.last().unwrap().to_string(),
            r.report.token_error_rate.to_string(),
            r.report.rare_token_accuracy.to_string(),
            r.report.model_fingerprint.clone(),
            fp.clone(),
            r.latency_ratio.to_string(),
        ])?;
        println!(
            "sites [{}]  ter {:.4}  rare acc {:.4}  latency x{:.2}",
            sites_label(&r.sites),
            r.report.token_error_rate,
            r.report.rare_token_accuracy,
            r.latency_ratio
        );
    }
    out.finish()?;
    run.snapshot(&path)?;
    Ok(None)
}

fn cmd_swap(global: &Global, flags: &mut Flags, a: SwapArgs) -> Outcome {
    flags
        .set("swap.stale_overlap", a.stale_overlap)
        .set("swap.new_overlap", a.new_overlap);
    let mut run = run(global, flags)?;
    let before_sum = sha256_file(&a.model)?;
    let before_mtime = std::fs::metadata(&a.model).and_then(|m| m.modified()).ok();
    let (task, model) = load_pair(&a.data, &a.model)?;
    let mut side = |file: &Option<std::path::PathBuf>, key: &str, default: f64| -> Result<(String, Option<f64>, ExternalMemory)> {
        Ok(match file {
            Some(p) => (file_label(p), None, ExternalMemory::load(p)?),
            None => {
                let o = run.param(key, default)?;
                (format!("test_catalog({o})"), Some(o), task.build_memory(&task.test_catalog(o)?)?)
            }
        })
    };
    let stale = side(&a.stale, "swap.stale_overlap", 0.0)?;
    let new = side(&a.new, "swap.new_overlap", 1.0)?;
    let retrieval = run.eval_retrieval(task.cfg.d_key)?;
    let mut results = Vec::new();
    for (role, (label, overlap, mem)) in [("stale", &stale), ("new", &new)] {
        model.check_memory(mem.d_key(), mem.d_value()).with_context(|| format!("{role} memory"))?;
        results.push((role, label, *overlap, mem, swap_catalog_eval(&model, &task, mem, &retrieval)?));
    }
    let after_sum = sha256_file(&a.model)?;
    let after_mtime = std::fs::metadata(&a.model).and_then(|m| m.modified()).ok();
    if before_sum != after_sum || before_mtime != after_mtime {
        bail!(Error::Consistency("checkpoint file changed during the swap".into()));
    }

    let path = run.output(&a.out)?;
    let mut header = vec!["role"];
    header.extend(eval_header());
    header.insert(header.len() - 2, "checkpoint_sha256");
    let mut out = Report::create(&path, &header)?;
    let fp = run.fingerprint();
    for (role, label, overlap, mem, r) in &results {
        let mut row = vec![role.to_string()];
        row.extend(eval_row(label, *overlap, mem.len(), r, &fp));
        row.insert(row.len() - 2, after_sum.clone());
        out.row(&row)?;
        println!("{role:<5} {label}: ter {:.4}  rare acc {:.4}", r.token_error_rate, r.rare_token_accuracy);
    }
    out.finish()?;
    run.snapshot(&path)?;
    println!("checkpoint unchanged (sha256 {after_sum})");
    Ok(None)
}

fn cmd_gradcheck(global: &Global, flags: &mut Flags, a: GradcheckArgs) -> Outcome {
    flags
        .set("gradcheck.frames", a.frames)
        .set("gradcheck.n_ctx", a.n_ctx)
        .set("gradcheck.d_model", a.d_model)
        .set("gradcheck.d_key", a.d_key)
        .set("gradcheck.d_value", a.d_value)
        .set("gradcheck.random_shape", a.random_shape.then_some(true));
    let mut run = run(global, flags)?;
    let seed = run.param("gradcheck.seed", 0u64)?;
    let shape = if run.param("gradcheck.random_shape", false)? {
        GradcheckShape::random(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    } else {
        GradcheckShape {
            frames: run.param("gradcheck.frames", 3usize)?,
            n_ctx: run.param("gradcheck.n_ctx", 5usize)?,
            d_model: run.param("gradcheck.d_model", 6usize)?,
            d_key: run.param("gradcheck.d_key", 4usize)?,
            d_value: run.param("gradcheck.d_value", 5usize)?,
        }
    };
    let corrupt = match &a.corrupt {
        Some(name) => Some(
            GradGroup::parse(name).ok_or_else(|| Error::InvalidArgument(format!("unknown gradient group {name:?}")))?,
        ),
        None => None,
    };
    let r = gradcheck(shape, seed, corrupt)?;
    println!(
        "shape frames={} n_ctx={} d_model={} d_key={} d_value={} seed={seed}",
        shape.frames, shape.n_ctx, shape.d_model, shape.d_key, shape.d_value
    );
    for (g, err) in &r.errors {
        let verdict = if *err < knnfuse::fusion::GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<11} max relative error {err:.3e}  {verdict}", g.name());
    }
    if let Some(out) = &a.out {
        let path = run.output(out)?;
        let mut rep = Report::create(&path, &["group", "max_relative_error", "passed", "config_fingerprint"])?;
        for (g, err) in &r.errors {
            rep.row(&[
                g.name().to_string(),
                err.to_string(),
                (*err < knnfuse::fusion::GRADCHECK_TOLERANCE).to_string(),
                run.fingerprint(),
            ])?;
        }
        rep.finish()?;
        run.snapshot(&path)?;
    }
    if r.passed() {
        println!("PASS");
        Ok(None)
    } else {
        let names: Vec<&str> = r.failing().iter().map(|g| g.name()).collect();
        println!("FAIL: {}", names.join(", "));
        Ok(Some(ExitCode::from(1)))
    }
}
