use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::{debug, info};
use serde::Serialize;
use serde_json::json;

use d2moe::analysis::{activation_stats, run_ablation, stratify_by_entropy, AblationResult, AblationVariant};
use d2moe::graph::{generate_sbm, load_graph, split_nodes, write_graph, GraphPaths, Split};
use d2moe::moe::routing::RoutingState;
use d2moe::moe::{load_checkpoint, save_checkpoint, RoutingTrace};
use d2moe::theory::{log_grid, scaling_table, ScalingParams};
use d2moe::training::{
    evaluate, fit, rng_stream, write_jsonl, EpochReport, Evaluation, RoutingPolicy, Stream, TrainObserver,
};
use d2moe::{Graph32, ModelParams32};

use crate::args::{
    parse_fractions, parse_sbm, AblateArgs, EvalArgs, GenArgs, GraphSource, StratifyArgs, TheoryArgs, TrainArgs,
};
use crate::manifest::{hash_bytes, hash_files, unix_now, Manifest};

struct Input {
    graph: Graph32,
    description: String,
    sha256: String,
}

fn load_input(src: &GraphSource, seed: u64) -> Result<Input> {
    let graph_seed = src.graph_seed.unwrap_or(seed);
    let fractions = parse_fractions(&src.split)?;
    let (graph, description, sha256) = match (&src.graph_dir, &src.sbm) {
        (Some(dir), None) => {
            let paths = GraphPaths::in_dir(dir);
            let graph: Graph32 = load_graph(&paths).with_context(|| format!("loading graph from {}", dir.display()))?;
            let mut files = vec![paths.edges.as_path(), paths.features.as_path(), paths.labels.as_path()];
            files.extend(paths.masks.as_deref());
            (graph, dir.display().to_string(), hash_files(&files)?)
        }
        (None, Some(text)) => {
            let spec = parse_sbm(text, graph_seed)?;
            let graph: Graph32 = generate_sbm(&spec)?;
            let canonical = serde_json::to_string(&spec)?;
            let sha = hash_bytes(canonical.as_bytes());
            (graph, format!("sbm {canonical}"), sha)
        }
        _ => bail!("give exactly one of --graph-dir or --sbm"),
    };
    let graph = if graph.masks().count(Split::Train) == 0 {
        split_nodes(graph, fractions, graph_seed)?
    } else {
        graph
    };
    info!(
        "graph: {} nodes, {} edges, {} features, {} classes",
        graph.num_nodes(),
        graph.edges().len(),
        graph.num_features(),
        graph.num_classes()
    );
    Ok(Input {
        graph,
        description,
        sha256,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen(args: GenArgs) -> Result<()> {
    let spec = parse_sbm(&args.sbm, args.seed)?;
    let graph: Graph32 = generate_sbm(&spec)?;
    let graph = split_nodes(graph, parse_fractions(&args.split)?, args.seed)?;
    create_dir(&args.out_dir)?;
    let paths = write_graph(&graph, &args.out_dir)?;
    info!(
        "wrote {} nodes and {} edges to {}",
        graph.num_nodes(),
        graph.edges().len(),
        args.out_dir.display()
    );
    let mut outputs = vec![paths.edges, paths.features, paths.labels];
    outputs.extend(paths.masks);
    let started = unix_now();
    Manifest {
        command: "gen",
        version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        input_sha256: hash_bytes(serde_json::to_string(&spec)?.as_bytes()),
        input: args.sbm,
        settings: json!({ "sbm": spec, "split": args.split }),
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&args.out_dir)?;
    Ok(())
}

/// Logs progress every `every` epochs.
struct Progress {
    every: usize,
}

impl TrainObserver<f32> for Progress {
    fn on_epoch_start(&mut self, _epoch: usize, _state: &RoutingState, _applied: Option<&[f64]>) {}

    fn on_forward(&mut self, _epoch: usize, _trace: &RoutingTrace<f32>) {}

    fn on_epoch_end(&mut self, r: &EpochReport) {
        let line = format!(
            "epoch {:>4} loss {:.4} train {:.3} val {:.3} active {:.2}",
            r.epoch,
            r.loss_total,
            r.acc_train.unwrap_or(f64::NAN),
            r.acc_val.unwrap_or(f64::NAN),
            r.mean_active_experts
        );
        if r.epoch % self.every == 0 {
            info!("{line}");
        } else {
            debug!("{line}");
        }
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let started = unix_now();
    let overrides = args.overrides.with_file(args.config.as_deref())?;
    let seed = overrides.seed.unwrap_or_default();
    let input = load_input(&args.graph, seed)?;
    let g = &input.graph;
    let settings = overrides.resolve(g.num_features(), g.num_classes())?;
    create_dir(&args.out_dir)?;

    let state = fit(g, &settings.model, &settings.train, &mut Progress { every: 50 })?;
    let mut eval_rng = rng_stream(settings.train.seed, Stream::Routing);
    let best = evaluate(&state.best, g, settings.train.policy, &mut eval_rng)?;
    info!(
        "best epoch {} of {}: train {:.4} val {:.4} test {:.4}",
        state.best_epoch,
        state.epoch,
        best.accuracy.train.unwrap_or(f64::NAN),
        best.accuracy.val.unwrap_or(f64::NAN),
        best.accuracy.test.unwrap_or(f64::NAN)
    );

    let out = &args.out_dir;
    let metrics = out.join("metrics.jsonl");
    let file = fs::File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    write_jsonl(std::io::BufWriter::new(file), &state.history)?;
    let best_ckpt = out.join("best.ckpt");
    let final_ckpt = out.join("final.ckpt");
    save_checkpoint(&state.best, &best_ckpt)?;
    save_checkpoint(&state.params, &final_ckpt)?;
    let nodes = out.join("eval_nodes.csv");
    write_eval_nodes(&nodes, g, &best)?;

    Manifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        input_sha256: input.sha256,
        input: input.description,
        settings: json!({
            "config": settings,
            "best_epoch": state.best_epoch,
            "epochs": state.epoch,
            "stopped_early": state.stopped_early,
            "best_accuracy": best.accuracy,
            "mean_active_experts": best.trace.mean_active_experts(),
        }),
        outputs: vec![metrics, best_ckpt, final_ckpt, nodes],
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(out)?;
    Ok(())
}

fn split_name(g: &Graph32, node: usize) -> &'static str {
    g.masks().get(node).map_or("none", Split::name)
}

/// One row per node with its routing decisions.
fn write_eval_nodes(path: &Path, g: &Graph32, e: &Evaluation<f32>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let layers = e.trace.layers.len();
    let mut header: Vec<String> = ["node", "split", "label", "prediction", "correct", "entropy", "threshold"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..layers).map(|l| format!("active_layer{l}")));
    header.extend((0..layers).map(|l| format!("experts_layer{l}")));
    w.write_record(&header)?;
    let counts: Vec<Vec<usize>> = e.trace.layers.iter().map(|l| l.active_counts()).collect();
    for v in 0..g.num_nodes() {
        let label = g.labels()[v];
        let pred = e.predictions[v];
        let mut row = vec![
            v.to_string(),
            split_name(g, v).to_string(),
            label.to_string(),
            pred.to_string(),
            u8::from(label == pred).to_string(),
            e.entropy[v].to_string(),
            e.thresholds.as_ref().map_or(String::new(), |t| t[v].to_string()),
        ];
        row.extend(counts.iter().map(|c| c[v].to_string()));
        row.extend(e.trace.layers.iter().map(|l| {
            l.selected[v].iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_params(path: &Path, g: &Graph32) -> Result<ModelParams32> {
    let params: ModelParams32 = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let c = params.config();
    ensure!(
        c.in_dim == g.num_features() && c.classes == g.num_classes(),
        "{} expects {} features and {} classes, graph has {} and {}",
        path.display(),
        c.in_dim,
        c.classes,
        g.num_features(),
        g.num_classes()
    );
    Ok(params)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let started = unix_now();
    let input = load_input(&args.graph, args.seed)?;
    let g = &input.graph;
    let params = load_params(&args.checkpoint, g)?;
    args.variant.validate(params.config().experts)?;
    let e = evaluate(&params, g, args.variant.policy(), &mut rng_stream(args.seed, Stream::Routing))?;
    create_dir(&args.out_dir)?;
    let nodes = args.out_dir.join("eval_nodes.csv");
    write_eval_nodes(&nodes, g, &e)?;
    let summary = json!({
        "checkpoint": args.checkpoint,
        "variant": args.variant.to_string(),
        "accuracy": e.accuracy,
        "mean_active_experts": e.trace.mean_active_experts(),
        "per_expert_load": e.trace.per_expert_load(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Manifest {
        command: "eval",
        version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        input_sha256: input.sha256,
        input: input.description,
        settings: summary,
        outputs: vec![nodes],
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&args.out_dir)?;
    Ok(())
}

pub fn stratify(args: StratifyArgs) -> Result<()> {
    let started = unix_now();
    let input = load_input(&args.graph, args.seed)?;
    let g = &input.graph;
    let params = load_params(&args.checkpoint, g)?;
    let proxy = load_params(&args.proxy_checkpoint, g)?;
    let proxy_eval = evaluate(&proxy, g, RoutingPolicy::StaticTopK { k: 1 }, &mut rng_stream(args.seed, Stream::Routing))?;
    let e = evaluate(&params, g, RoutingPolicy::Adaptive, &mut rng_stream(args.seed, Stream::Routing))?;
    let nodes: Vec<usize> = match args.nodes.as_str() {
        "all" => (0..g.num_nodes()).collect(),
        "train" => g.masks().nodes(Split::Train),
        "val" => g.masks().nodes(Split::Val),
        "test" => g.masks().nodes(Split::Test),
        other => bail!("--nodes must be train, val, test or all, got {other:?}"),
    };
    let report = stratify_by_entropy(&proxy_eval.entropy, &nodes, &e.predictions, g.labels(), &e.trace)?;
    let stats = activation_stats(&e.trace, &proxy_eval.entropy, &nodes)?;
    create_dir(&args.out_dir)?;

    let deciles = args.out_dir.join("deciles.csv");
    let mut w = csv::Writer::from_path(&deciles)?;
    let layers = e.trace.layers.len();
    let mut header: Vec<String> = ["decile", "entropy_min", "entropy_max", "count", "accuracy", "mean_active"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..layers).map(|l| format!("mean_active_layer{l}")));
    w.write_record(&header)?;
    for b in &report.buckets {
        let mut row = vec![
            b.decile.to_string(),
            b.entropy_min.to_string(),
            b.entropy_max.to_string(),
            b.count.to_string(),
            b.accuracy.to_string(),
            b.mean_active_overall().to_string(),
        ];
        row.extend(b.mean_active.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let heat = args.out_dir.join("heat.csv");
    let mut w = csv::Writer::from_path(&heat)?;
    w.write_record(["expert", "q1", "q2", "q3", "q4", "overall"])?;
    for (i, row) in stats.heat.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push(stats.global_weight[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let trend = report.activation_trend();
    println!("activation trend (rank correlation over deciles): {trend:.4}");
    for b in &report.buckets {
        println!(
            "decile {:>2}  n {:>4}  acc {:.3}  active {:.3}",
            b.decile,
            b.count,
            b.accuracy,
            b.mean_active_overall()
        );
    }
    Manifest {
        command: "stratify",
        version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        input_sha256: input.sha256,
        input: input.description,
        settings: json!({
            "checkpoint": args.checkpoint,
            "proxy_checkpoint": args.proxy_checkpoint,
            "nodes": args.nodes,
            "activation_trend": trend,
        }),
        outputs: vec![deciles, heat],
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&args.out_dir)?;
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    list.split(',')
        .map(|t| t.trim().parse::<AblationVariant>().map_err(anyhow::Error::from))
        .collect()
}

#[derive(Serialize)]
struct SeedRow<'a> {
    variant: &'a str,
    seed: u64,
    test_accuracy: f64,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let started = unix_now();
    let overrides = args.overrides.with_file(args.config.as_deref())?;
    let seed = overrides.seed.unwrap_or_default();
    let input = load_input(&args.graph, seed)?;
    let g = &input.graph;
    let settings = overrides.resolve(g.num_features(), g.num_classes())?;
    let variants = match &args.variants {
        Some(list) => parse_variants(list)?,
        None => vec![
            AblationVariant::Full,
            AblationVariant::StaticTopK { k: args.k },
            AblationVariant::FixedTopP { p: args.p },
            AblationVariant::RandomTopP,
            AblationVariant::NoRoutingEntropy,
            AblationVariant::NoLoadBalance,
        ],
    };
    ensure!(args.seeds > 0, "--seeds must be positive");
    let seeds: Vec<u64> = (seed..).take(args.seeds).collect();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build()?;

    let mut results: Vec<AblationResult> = Vec::new();
    for v in &variants {
        let r = pool.install(|| run_ablation(g, &settings.model, &settings.train, *v, &seeds))?;
        info!("{:<22} {:.4} ± {:.4}", r.variant, r.mean, r.std);
        results.push(r);
    }
    create_dir(&args.out_dir)?;
    let summary = args.out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["variant", "mean", "std", "seeds"])?;
    for r in &results {
        w.write_record([r.variant.clone(), r.mean.to_string(), r.std.to_string(), r.per_seed.len().to_string()])?;
    }
    w.flush()?;
    let per_seed = args.out_dir.join("ablation_seeds.csv");
    let mut w = csv::Writer::from_path(&per_seed)?;
    for r in &results {
        for (s, acc) in seeds.iter().zip(&r.per_seed) {
            w.serialize(SeedRow {
                variant: &r.variant,
                seed: *s,
                test_accuracy: *acc,
            })?;
        }
    }
    w.flush()?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<22} {:>8} {:>8}", "variant", "mean", "std")?;
    for r in &results {
        writeln!(out, "{:<22} {:>8.4} {:>8.4}", r.variant, r.mean, r.std)?;
    }
    Manifest {
        command: "ablate",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        input_sha256: input.sha256,
        input: input.description,
        settings: json!({ "config": settings, "seeds": seeds, "results": results }),
        outputs: vec![summary, per_seed],
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&args.out_dir)?;
    Ok(())
}

pub fn theory(args: TheoryArgs) -> Result<()> {
    let sp = ScalingParams {
        beta: args.beta,
        mu: args.mu,
        alpha: args.alpha,
        phi: args.phi,
        rho: args.rho,
        eps: args.eps,
    };
    sp.validate()?;
    let grid = log_grid(args.u_min, args.u_max, args.points);
    let rows = scaling_table(&sp, &grid, args.k_max)?;
    if let Some(row) = rows.first() {
        info!("fitted slope {:.4}, predicted {:.4}", row.fitted_slope, sp.exponent());
    }
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
