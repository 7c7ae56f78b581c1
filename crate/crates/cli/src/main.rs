//! `df-accel` — train, pack, inspect, and simulate deep forest models.
//!
//! Verbs: `train` (CSV -> interchange model JSON), `pack` (model JSON +
//! calibration CSV -> .dfpack), `infer` (reference float engine), `sim`
//! (cycle-accurate accelerator model over a .dfpack), `bench` (host
//! reference vs modeled accelerator), `inspect` (decoded node tables),
//! `synth` (deterministic synthetic datasets). Log level comes from the
//! `DF_ACCEL_LOG` environment variable.

mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use df_accel::codec::{
    pack_model, quantize_model, read_dfpack, write_dfpack, DecodedNode, PackedModel,
    MAX_TREE_NODES,
};
use df_accel::model::CascadeModel;
use df_accel::sim::{pipeline_run, SimConfig, SimRun};
use df_accel::synth;
use df_accel::train::scan::GridShape;
use df_accel::train::{self, Dataset, TrainConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "df-accel", version, about = "Deep forest inference engine and accelerator model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a cascade model on a CSV dataset and write interchange JSON.
    Train(TrainArgs),
    /// Quantize and pack a model into a .dfpack RAM-image container.
    Pack(PackArgs),
    /// Run the float-domain reference engine over a dataset.
    Infer(InferArgs),
    /// Simulate the accelerator over a packed model and dataset.
    Sim(SimArgs),
    /// Compare host reference throughput with the modeled accelerator.
    Bench(BenchArgs),
    /// Dump decoded node tables and metadata from a .dfpack file.
    Inspect(InspectArgs),
    /// Generate a deterministic synthetic dataset CSV.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    dataset: PathBuf,
    /// Name of the label column.
    #[arg(long = "label-col")]
    label_col: String,
    /// Output model file (interchange JSON).
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum tree depth.
    #[arg(long, default_value_t = 8)]
    depth: usize,
    /// Maximum cascade layers.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Trees per forest.
    #[arg(long, default_value_t = 32)]
    trees: usize,
    /// Cross-fitting folds for augmented features.
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Non-improving layers tolerated before growth stops.
    #[arg(long, default_value_t = 1)]
    patience: usize,
    #[arg(long = "min-samples-split", default_value_t = 2)]
    min_samples_split: usize,
    /// Fraction of rows held out for layer-growth validation.
    #[arg(long = "valid-frac", default_value_t = 0.2)]
    valid_frac: f64,
}

#[derive(Args, Serialize)]
struct PackArgs {
    /// Model file (interchange JSON).
    #[arg(long)]
    model: PathBuf,
    /// Calibration CSV (same schema as the training CSV).
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long = "label-col")]
    label_col: String,
    /// Output .dfpack file.
    #[arg(long, short)]
    output: PathBuf,
    /// RAM image depth budget d; defaults to the model's measured depth.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "label-col")]
    label_col: String,
    /// Output predictions JSON.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct SimArgs {
    /// Packed model (.dfpack).
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "label-col")]
    label_col: String,
    /// Output report JSON.
    #[arg(long, short)]
    output: PathBuf,
    /// Also write per-sample predictions JSON here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long = "clock-hz", default_value_t = 4.0e8)]
    clock_hz: f64,
    /// Disable the per-layer pipeline (throughput = 1/latency).
    #[arg(long = "no-pipeline")]
    no_pipeline: bool,
    /// Fixed extra cycles charged per layer.
    #[arg(long = "layer-overhead", default_value_t = 0)]
    layer_overhead: u64,
    /// Cross-check every prediction against the quantized reference engine.
    #[arg(long = "oracle-check")]
    oracle_check: bool,
    /// Write a line-oriented trace dump to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "label-col")]
    label_col: String,
    /// Modeled clock; repeat for one table row per clock.
    #[arg(long = "clock-hz")]
    clock_hz: Vec<f64>,
    /// Output comparison JSON.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    pack: PathBuf,
    /// Layer to dump (default 0).
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Forest within the layer (0 or 1).
    #[arg(long, default_value_t = 0)]
    forest: usize,
    /// Group within the forest (0..3).
    #[arg(long, default_value_t = 0)]
    group: usize,
    /// Maximum words to print.
    #[arg(long, default_value_t = 64)]
    limit: usize,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Dataset family: "adult" (tabular) or "grids" (two-pattern images).
    #[arg(long, default_value = "adult")]
    kind: String,
    #[arg(long, default_value_t = 6000)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid shape for --kind grids, e.g. 8x8.
    #[arg(long, default_value = "8x8")]
    grid: String,
    #[arg(long, short)]
    output: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DF_ACCEL_LOG")).init();
    if let Err(e) = run() {
        eprintln!("df-accel error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Sim(args) => cmd_sim(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn load_dataset(path: &Path, label_col: &str) -> Result<Dataset> {
    Dataset::from_csv_path(path, label_col)
        .with_context(|| format!("loading {} (--label-col {label_col})", path.display()))
}

fn load_model(path: &Path) -> Result<CascadeModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading model {}", path.display()))?;
    CascadeModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn load_pack(path: &Path) -> Result<PackedModel> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening pack {}", path.display()))?;
    read_dfpack(std::io::BufReader::new(file))
        .with_context(|| format!("parsing pack {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.dataset, &args.label_col)?;
    let config = TrainConfig {
        trees_per_forest: args.trees,
        max_depth: args.depth,
        min_samples_split: args.min_samples_split,
        rf_feature_subsample: None,
        folds: args.folds,
        patience: args.patience,
        max_layers: args.layers,
        seed: args.seed,
    };
    let (train_ds, valid_ds) = ds.split(args.valid_frac, args.seed);
    let growth = train::grow_cascade(
        &train_ds.rows,
        &train_ds.labels,
        &valid_ds.rows,
        &valid_ds.labels,
        &config,
        args.seed,
    )?;
    growth.model.validate()?;
    std::fs::write(&args.output, growth.model.to_json())
        .with_context(|| format!("writing model {}", args.output.display()))?;
    let manifest = manifest::write_manifest(
        "train",
        &args,
        Some(args.seed),
        &[args.dataset.as_path()],
        &args.output,
        &[],
        started,
    )?;
    println!(
        "trained {} layers (grew {}) on {} rows x {} features",
        growth.model.layers.len(),
        growth.grown_layers,
        train_ds.len(),
        train_ds.width()
    );
    if !growth.val_accuracy.is_empty() {
        let accs: Vec<String> = growth.val_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        println!("validation accuracy by layer: [{}]", accs.join(", "));
    }
    println!("model -> {}", args.output.display());
    println!("manifest -> {}", manifest.display());
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let calib = load_dataset(&args.calibration, &args.label_col)?;
    if calib.width() != model.base_feature_width {
        bail!(
            "calibration width {} does not match model base feature width {}",
            calib.width(),
            model.base_feature_width
        );
    }
    let qm = quantize_model(&model, &calib.rows)?;
    let depth = args.depth.unwrap_or_else(|| qm.max_depth());
    if depth > u8::MAX as usize {
        bail!("depth {depth} exceeds the 8-bit header field");
    }
    // Capacity pre-scan so violations carry tree coordinates.
    let cap = MAX_TREE_NODES.min((1usize << depth.min(31)) - 1);
    for (l, layer) in qm.layers.iter().enumerate() {
        for (f, forest) in layer.iter().enumerate() {
            for (t, tree) in forest.trees.iter().enumerate() {
                if tree.node_count() > cap {
                    bail!(
                        "layer {l} forest {f} tree {t}: {} nodes exceed capacity {cap} at depth {depth} (right_idx is 9-bit)",
                        tree.node_count()
                    );
                }
                if tree.max_depth() > depth {
                    bail!(
                        "layer {l} forest {f} tree {t}: depth {} exceeds requested image depth {depth}",
                        tree.max_depth()
                    );
                }
            }
        }
    }
    let mut packed = pack_model(&qm)?;
    packed.max_depth = depth as u8;
    for layer in &mut packed.layers {
        for forest in &mut layer.forests {
            for group in &mut forest.groups {
                group.max_depth = depth as u8;
            }
        }
    }
    let file = std::fs::File::create(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    write_dfpack(std::io::BufWriter::new(file), &packed)?;
    // Reload to prove the container validates.
    let reloaded = load_pack(&args.output)?;
    let footprint = reloaded.footprint();
    let manifest = manifest::write_manifest(
        "pack",
        &args,
        None,
        &[args.model.as_path(), args.calibration.as_path()],
        &args.output,
        &[],
        started,
    )?;
    println!(
        "packed {} layers, {} nodes, image depth {}",
        reloaded.num_layers(),
        footprint.node_count,
        reloaded.max_depth
    );
    println!(
        "footprint: packed {} bits vs 40-bit baseline {} bits, savings_fraction {:.2}",
        footprint.packed_bits, footprint.baseline_bits, footprint.savings_fraction
    );
    println!("pack -> {}", args.output.display());
    println!("manifest -> {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct InferPrediction {
    index: usize,
    probs: [f64; 2],
    class: u8,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let ds = load_dataset(&args.dataset, &args.label_col)?;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut correct = 0usize;
    for (i, row) in ds.rows.iter().enumerate() {
        let out = model.infer(row)?;
        let class = out.prediction.class();
        if class == ds.labels[i] {
            correct += 1;
        }
        predictions.push(InferPrediction {
            index: i,
            probs: out.prediction.0,
            class,
        });
    }
    std::fs::write(&args.output, serde_json::to_string_pretty(&predictions)?)?;
    let manifest = manifest::write_manifest(
        "infer",
        &args,
        None,
        &[args.model.as_path(), args.dataset.as_path()],
        &args.output,
        &[],
        started,
    )?;
    println!(
        "inferred {} rows, accuracy {:.4}",
        ds.len(),
        correct as f64 / ds.len() as f64
    );
    println!("predictions -> {}", args.output.display());
    println!("manifest -> {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct SimPredictionOut {
    index: usize,
    final_q: u16,
    class: u8,
}

fn run_sim(
    packed: &PackedModel,
    ds: &Dataset,
    config: &SimConfig,
    collect_trace: bool,
) -> Result<(SimRun, Vec<Vec<u16>>)> {
    let qm = packed.to_quantized()?;
    if ds.width() != qm.base_feature_width {
        bail!(
            "dataset width {} does not match packed base feature width {}",
            ds.width(),
            qm.base_feature_width
        );
    }
    let samples: Vec<Vec<u16>> = ds
        .rows
        .iter()
        .map(|r| qm.quantize_base(r))
        .collect::<Result<_, _>>()?;
    let run = pipeline_run(packed, &samples, config, collect_trace)?;
    Ok((run, samples))
}

fn cmd_sim(args: SimArgs) -> Result<()> {
    let started = Instant::now();
    let packed = load_pack(&args.pack)?;
    let ds = load_dataset(&args.dataset, &args.label_col)?;
    let config = SimConfig {
        clock_hz: args.clock_hz,
        pipeline_enabled: !args.no_pipeline,
        layer_overhead_cycles: args.layer_overhead,
        ..SimConfig::default()
    };
    let (run, samples) = run_sim(&packed, &ds, &config, args.trace.is_some())?;

    if args.oracle_check {
        let qm = packed.to_quantized()?;
        for (i, (sample, pred)) in samples.iter().zip(&run.predictions).enumerate() {
            let want = qm.infer(sample)?;
            if (pred.final_q, pred.class) != (want.final_q, want.class)
                || pred.per_layer_q != want.per_layer_q
            {
                bail!(
                    "oracle mismatch at sample {i}: simulator q={} reference q={}",
                    pred.final_q,
                    want.final_q
                );
            }
        }
        println!("oracle-check: {} samples bit-identical", samples.len());
    }

    let correct = run
        .predictions
        .iter()
        .zip(&ds.labels)
        .filter(|(p, &l)| p.class == l)
        .count();
    println!("{}", run.report.render_table());
    println!("accuracy on labels: {:.4}", correct as f64 / ds.len() as f64);

    std::fs::write(&args.output, serde_json::to_string_pretty(&run.report)?)?;
    let mut extra: Vec<PathBuf> = Vec::new();
    if let Some(pred_path) = &args.predictions {
        let out: Vec<SimPredictionOut> = run
            .predictions
            .iter()
            .enumerate()
            .map(|(index, p)| SimPredictionOut {
                index,
                final_q: p.final_q,
                class: p.class,
            })
            .collect();
        std::fs::write(pred_path, serde_json::to_string_pretty(&out)?)?;
        extra.push(pred_path.clone());
    }
    if let Some(trace_path) = &args.trace {
        let file = std::fs::File::create(trace_path)
            .with_context(|| format!("creating {}", trace_path.display()))?;
        run.trace
            .as_ref()
            .expect("trace collected when requested")
            .write_lines(std::io::BufWriter::new(file))?;
        extra.push(trace_path.clone());
    }
    let extra_refs: Vec<&Path> = extra.iter().map(PathBuf::as_path).collect();
    let manifest = manifest::write_manifest(
        "sim",
        &args,
        None,
        &[args.pack.as_path(), args.dataset.as_path()],
        &args.output,
        &extra_refs,
        started,
    )?;
    println!("report -> {}", args.output.display());
    println!("manifest -> {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    clock_mhz: f64,
    host_ksamples_per_s: f64,
    modeled_ksamples_per_s: f64,
    speedup_model_vs_host: f64,
    host_latency_us: f64,
    modeled_latency_us: f64,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let packed = load_pack(&args.pack)?;
    let ds = load_dataset(&args.dataset, &args.label_col)?;
    let clocks = if args.clock_hz.is_empty() {
        vec![4.0e8]
    } else {
        args.clock_hz.clone()
    };

    // Host reference engine, single pass, wall clock.
    let t0 = Instant::now();
    for row in &ds.rows {
        std::hint::black_box(model.infer(row)?);
    }
    let host_secs = t0.elapsed().as_secs_f64();
    let host_sps = ds.len() as f64 / host_secs;
    let host_latency_us = host_secs / ds.len() as f64 * 1e6;

    let mut rows = Vec::new();
    for clock in clocks {
        let config = SimConfig {
            clock_hz: clock,
            ..SimConfig::default()
        };
        let (run, _) = run_sim(&packed, &ds, &config, false)?;
        rows.push(BenchRow {
            clock_mhz: clock / 1e6,
            host_ksamples_per_s: host_sps / 1e3,
            modeled_ksamples_per_s: run.report.throughput_ksamples_per_s,
            speedup_model_vs_host: run.report.throughput_samples_per_s / host_sps,
            host_latency_us,
            modeled_latency_us: run.report.latency_us_mean,
        });
    }

    println!(
        "{:<12}{:>22}{:>22}{:>12}{:>16}{:>16}",
        "clock (MHz)",
        "host (Ksamples/s)",
        "modeled (Ksamples/s)",
        "speedup",
        "host lat (us)",
        "modeled lat (us)"
    );
    for r in &rows {
        println!(
            "{:<12.1}{:>22.2}{:>22.2}{:>11.2}x{:>16.3}{:>16.3}",
            r.clock_mhz,
            r.host_ksamples_per_s,
            r.modeled_ksamples_per_s,
            r.speedup_model_vs_host,
            r.host_latency_us,
            r.modeled_latency_us
        );
    }
    println!("speedup is model-vs-host: simulated accelerator throughput over this machine's reference engine");

    if let Some(out) = &args.output {
        std::fs::write(out, serde_json::to_string_pretty(&rows)?)?;
        println!("comparison -> {}", out.display());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let packed = load_pack(&args.pack)?;
    let footprint = packed.footprint();
    println!(
        "pack: {} layers, image depth {}, base feature width {}, {} nodes",
        packed.num_layers(),
        packed.max_depth,
        packed.base_feature_width(),
        footprint.node_count
    );
    println!(
        "footprint: {} packed bits, {} baseline bits, savings_fraction {:.2}",
        footprint.packed_bits, footprint.baseline_bits, footprint.savings_fraction
    );
    for (k, map) in packed.maps.iter().enumerate() {
        println!("layer {k}: input width {}", map.width());
    }
    let layer = packed
        .layers
        .get(args.layer)
        .with_context(|| format!("layer {} out of range", args.layer))?;
    let forest = layer
        .forests
        .get(args.forest)
        .with_context(|| format!("forest {} out of range", args.forest))?;
    let group = forest
        .groups
        .get(args.group)
        .with_context(|| format!("group {} out of range", args.group))?;
    println!(
        "layer {} forest {} group {}: {} words, tree offsets {:?}",
        args.layer, args.forest, args.group, group.words.len(), group.tree_offsets
    );
    println!("{:<8}{:<8}{:<10}{:<10}{:<10}", "addr", "kind", "feature", "value_q", "right_idx");
    for (addr, word) in group.words.iter().take(args.limit).enumerate() {
        match word.decode() {
            DecodedNode::Leaf { value_q } => {
                println!("{addr:<8}{:<8}{:<10}{value_q:<10}{:<10}", "leaf", "-", "-");
            }
            DecodedNode::Split {
                feature_idx,
                threshold_q,
                right_idx,
            } => {
                println!("{addr:<8}{:<8}{feature_idx:<10}{threshold_q:<10}{right_idx:<10}", "split");
            }
        }
    }
    if group.words.len() > args.limit {
        println!("... {} more words", group.words.len() - args.limit);
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let csv = match args.kind.as_str() {
        "adult" => synth::adult_like_csv(args.rows, args.seed),
        "grids" => {
            let (r, c) = args
                .grid
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .with_context(|| format!("bad --grid {} (expected RxC)", args.grid))?;
            synth::grid_csv(args.rows, GridShape { rows: r, cols: c }, args.seed)
        }
        other => bail!("unknown --kind {other} (expected adult or grids)"),
    };
    std::fs::write(&args.output, csv)
        .with_context(|| format!("writing {}", args.output.display()))?;
    let manifest = manifest::write_manifest(
        "synth",
        &args,
        Some(args.seed),
        &[],
        &args.output,
        &[],
        started,
    )?;
    println!("{} rows -> {}", args.rows, args.output.display());
    println!("manifest -> {}", manifest.display());
    Ok(())
}
