//! `hgct`: train, evaluate and inspect skeleton action models.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 usage error, 3 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgct_core::config::{load_config, RunManifest, DEFAULT_CONFIG};
use hgct_core::model::{count_flops, dump_feature_responses, load_checkpoint, Batch};
use hgct_core::skeleton::{load_jsonl, synth_dataset, write_jsonl, Modality, SynthSpec};
use hgct_core::train::{
    evaluate, fuse_scores, preprocess, read_scores_csv, resample_split, run_ablation, train, write_scores_csv,
    AblationAxis, TrainOutputs,
};
use hgct_core::verify::{check_blocks, parse_blocks, GRADCHECK_SEEDS, GRADCHECK_TOLERANCE};
use hgct_core::{DType, DatasetSplit, Error, Hgct, ModelConfig, Result, Scalar, SkeletonGraph, SkeletonSequence, TopologyMode, TrainConfig};

const GRAPH_FILE: &str = "graph.json";
const CHECKPOINT_FILE: &str = "model.json";

#[derive(Parser, Debug)]
#[command(name = "hgct", version, about = "Skeleton action recognition with graph-conv and transformer stages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on `<data>/train.jsonl`, evaluating on `<data>/test.jsonl` after each epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on `<data>/test.jsonl`.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Late-fuse score CSVs that share sample order.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// Comma-separated, one per score file; uniform when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter and MAC counts for a configuration.
    Count {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compare autodiff against finite differences, block by block.
    Gradcheck {
        /// `all` or a comma-separated list of block names.
        #[arg(long, default_value = "all")]
        blocks: String,
        #[arg(long, default_value = "f64")]
        dtype: DType,
        #[arg(long, default_value_t = GRADCHECK_SEEDS)]
        seeds: u64,
    },
    /// Train every setting of one design axis and tabulate the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// topology, alpha, gamma, positional or all.
        #[arg(long, default_value = "all")]
        axis: String,
    },
    /// Write a deterministic synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthSpec::default().per_class)]
        per_class: usize,
        #[arg(long, default_value_t = SynthSpec::default().test_per_class)]
        test_per_class: usize,
        #[arg(long, default_value_t = SynthSpec::default().frames)]
        frames: usize,
        #[arg(long, default_value_t = SynthSpec::default().noise_sigma)]
        noise: f64,
    },
    /// Write per-joint and per-frame response profiles of a checkpoint.
    DumpFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test samples to average over.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
}

/// Configuration flags shared by the model-building subcommands. Flags are
/// applied as overrides after the config file.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// `default`, a key=value file or a previous run's run_manifest.json.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    topology: Option<TopologyMode>,
    /// Decimal or fraction, e.g. `1/4`.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    no_joint_type: bool,
    #[arg(long)]
    no_frame_order: bool,
    #[arg(long)]
    modality: Option<Modality>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(s) = self.seed {
            put("train.seed", s.to_string());
        }
        if let Some(d) = self.dtype {
            put("train.dtype", d.name().to_string());
        }
        if let Some(e) = self.epochs {
            put("train.epochs", e.to_string());
        }
        if let Some(t) = self.topology {
            put("model.topology", t.name().to_string());
        }
        if let Some(a) = &self.alpha {
            put("model.alpha", a.clone());
        }
        if let Some(g) = self.gamma {
            put("model.gamma", g.to_string());
        }
        if self.no_joint_type {
            put("model.joint_type", "false".into());
        }
        if self.no_frame_order {
            put("model.frame_order", "false".into());
        }
        if let Some(m) = self.modality {
            put("train.modality", m.name().to_string());
        }
        Ok(o)
    }

    fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        load_config(&self.config, &self.overrides()?)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("--out is required".into()))
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::Usage("--data is required".into()))
    }
}

/// `<data>/graph.json` when present, otherwise the 25-joint body.
fn data_graph(dir: &Path) -> Result<SkeletonGraph> {
    let path = dir.join(GRAPH_FILE);
    if path.exists() {
        SkeletonGraph::from_json_file(&path)
    } else {
        Ok(SkeletonGraph::ntu25())
    }
}

fn load_split(dir: &Path, name: &str, graph: &SkeletonGraph) -> Result<DatasetSplit> {
    load_jsonl(&dir.join(format!("{name}.jsonl")), graph)
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Resolved configs with the head and joint count taken from the data.
fn fit_to_data(model: &mut ModelConfig, graph: &SkeletonGraph, split: &DatasetSplit) {
    model.v = graph.joints();
    model.num_classes = split.class_count;
    if let Some(first) = split.samples().first() {
        model.c_in = first.channels();
    }
}

fn cmd_train<F: Scalar>(run: &RunArgs) -> Result<()> {
    let (mut model_cfg, train_cfg) = run.resolve()?;
    let (data, out) = (run.data_dir()?, run.out_dir()?);
    let graph = data_graph(data)?;
    let train_split = load_split(data, "train", &graph)?;
    let test_split = load_split(data, "test", &graph)?;
    fit_to_data(&mut model_cfg, &graph, &train_split);
    RunManifest::new("train", &model_cfg, &train_cfg, vec![data.to_path_buf()], out).write(out)?;
    let mut model = Hgct::<F>::new(model_cfg, graph, train_cfg.seed)?;
    log::info!("{} parameters", model.param_count());
    let outputs = TrainOutputs {
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
    };
    let report = train(&mut model, &train_cfg, &train_split, &test_split, &outputs)?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("epochs.csv"))?;
    let test = resample_split(&preprocess(&test_split, &model.graph, train_cfg.modality)?, train_cfg.frames)?;
    let eval = evaluate(&model, &test, train_cfg.batch_size)?;
    write_scores_csv(&eval.scores, &out.join("scores.csv"))?;
    println!(
        "final test accuracy {:.4} (best {:.4}) after {} epochs in {:.1} s",
        report.final_test_accuracy(),
        report.best_test_accuracy(),
        report.epochs.len(),
        report.wall_seconds
    );
    Ok(())
}

fn cmd_eval<F: Scalar>(run: &RunArgs, checkpoint: &Path) -> Result<()> {
    let (_, train_cfg) = run.resolve()?;
    let (data, out) = (run.data_dir()?, run.out_dir()?);
    // the architecture comes from the checkpoint, not the config
    let (model, _) = load_checkpoint::<F>(checkpoint)?;
    let test_split = load_split(data, "test", &model.graph)?;
    RunManifest::new("eval", &model.config, &train_cfg, vec![data.to_path_buf(), checkpoint.to_path_buf()], out).write(out)?;
    let test = resample_split(&preprocess(&test_split, &model.graph, train_cfg.modality)?, train_cfg.frames)?;
    let report = evaluate(&model, &test, train_cfg.batch_size)?;
    write_scores_csv(&report.scores, &out.join("scores.csv"))?;
    write_json(&out.join("eval.json"), serde_json::json!({
        "accuracy": report.accuracy,
        "per_class": report.per_class,
        "samples": report.scores.len(),
    }))?;
    println!("test accuracy {:.4} over {} samples", report.accuracy, report.scores.len());
    Ok(())
}

fn cmd_fuse(scores: &[PathBuf], weights: Option<&[f64]>, out: &Path) -> Result<()> {
    let sets = scores.iter().map(|p| read_scores_csv(p)).collect::<Result<Vec<_>>>()?;
    let fused = fuse_scores(&sets, weights)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_scores_csv(&fused.fused, &out.join("fused.csv"))?;
    let streams: Vec<f64> = sets.iter().map(|s| s.accuracy()).collect();
    write_json(&out.join("fusion.json"), serde_json::json!({
        "inputs": scores,
        "weights": weights,
        "stream_accuracy": streams,
        "accuracy": fused.accuracy,
    }))?;
    println!("fused accuracy {:.4} (streams {streams:?})", fused.accuracy);
    Ok(())
}

fn cmd_count(run: &RunArgs, frames: usize, json: bool) -> Result<()> {
    let (model_cfg, train_cfg) = run.resolve()?;
    let report = count_flops(&model_cfg, frames, model_cfg.v)?;
    if let Some(out) = &run.out {
        RunManifest::new("count", &model_cfg, &train_cfg, vec![], out).write(out)?;
        write_json(&out.join("count.json"), serde_json::to_value(&report)?)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    for b in &report.blocks {
        println!("{:<16} {:>10} params {:>14} MACs", b.name, b.params, b.macs);
    }
    println!("parameters {}", report.params);
    println!("MACs {} ({:.3} G), FLOPs at 2 per MAC {} ({:.3} G), T={frames} V={}", report.macs, report.macs as f64 / 1e9, report.flops_2x, report.flops_2x as f64 / 1e9, model_cfg.v);
    Ok(())
}

/// Whether every selected block passed.
fn cmd_gradcheck(blocks: &str, dtype: DType, seeds: u64) -> Result<bool> {
    if dtype != DType::F64 {
        return Err(Error::Usage("the gradient oracle runs in f64 only".into()));
    }
    let kinds = parse_blocks(blocks)?;
    let checks = check_blocks(&kinds, seeds)?;
    for c in &checks {
        println!(
            "{} {:<18} max relative error {:.3e} over {} coordinates ({} skipped at kinks)",
            if c.passed { "ok  " } else { "FAIL" },
            c.block.to_string(),
            c.max_relative_error,
            c.coordinates,
            c.skipped
        );
    }
    let ok = checks.iter().all(|c| c.passed);
    println!("{} (tolerance {GRADCHECK_TOLERANCE:e}, {seeds} seeds)", if ok { "all blocks pass" } else { "gradient check failed" });
    Ok(ok)
}

fn cmd_ablate(run: &RunArgs, axis: &str) -> Result<()> {
    let (mut model_cfg, train_cfg) = run.resolve()?;
    let axes: Vec<AblationAxis> = if axis == "all" {
        AblationAxis::ALL.to_vec()
    } else {
        vec![axis.parse()?]
    };
    let (data, out) = (run.data_dir()?, run.out_dir()?);
    let graph = data_graph(data)?;
    let train_split = load_split(data, "train", &graph)?;
    let test_split = load_split(data, "test", &graph)?;
    fit_to_data(&mut model_cfg, &graph, &train_split);
    RunManifest::new("ablate", &model_cfg, &train_cfg, vec![data.to_path_buf()], out).write(out)?;
    for axis in axes {
        let table = run_ablation(axis, &model_cfg, &graph, &train_cfg, &train_split, &test_split)?;
        table.write_json(&out.join(format!("ablation_{axis}.json")))?;
        table.write_csv(&out.join(format!("ablation_{axis}.csv")))?;
        println!("{axis}:");
        for r in &table.rows {
            println!("  {:<32} {:>9} params  final {:.4}  best {:.4}", r.setting, r.params, r.final_accuracy, r.best_accuracy);
        }
    }
    Ok(())
}

fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let (train_split, test_split) = synth_dataset(spec)?;
    write_jsonl(&train_split, &out.join("train.jsonl"))?;
    write_jsonl(&test_split, &out.join("test.jsonl"))?;
    let graph = out.join(GRAPH_FILE);
    fs::write(&graph, SkeletonGraph::ntu25().to_json() + "\n").map_err(|source| Error::Io { path: graph, source })?;
    write_json(&out.join("synth.json"), serde_json::to_value(spec)?)?;
    println!("wrote {} train and {} test samples to {}", train_split.len(), test_split.len(), out.display());
    Ok(())
}

fn cmd_dump_features<F: Scalar>(run: &RunArgs, checkpoint: &Path, samples: usize) -> Result<()> {
    let (_, train_cfg) = run.resolve()?;
    let (data, out) = (run.data_dir()?, run.out_dir()?);
    let (model, _) = load_checkpoint::<F>(checkpoint)?;
    let test_split = load_split(data, "test", &model.graph)?;
    RunManifest::new("dump-features", &model.config, &train_cfg, vec![data.to_path_buf(), checkpoint.to_path_buf()], out).write(out)?;
    let test = resample_split(&preprocess(&test_split, &model.graph, train_cfg.modality)?, train_cfg.frames)?;
    let n = samples.clamp(1, test.len().max(1));
    let step = (test.len() / n).max(1);
    let refs: Vec<&SkeletonSequence> = test.samples().iter().step_by(step).take(n).collect();
    let batch = Batch::<F>::from_sequences(&refs)?;
    let path = out.join("features.csv");
    let records = dump_feature_responses(&model, &batch, &path)?;
    println!("wrote {} feature records to {}", records.len(), path.display());
    Ok(())
}

/// Runs `f` at the resolved element type.
fn with_dtype(run: &RunArgs, f32_run: impl FnOnce() -> Result<()>, f64_run: impl FnOnce() -> Result<()>) -> Result<()> {
    match run.resolve()?.1.dtype {
        DType::F32 => f32_run(),
        DType::F64 => f64_run(),
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { run } => with_dtype(&run, || cmd_train::<f32>(&run), || cmd_train::<f64>(&run))?,
        Command::Eval { run, checkpoint } => {
            with_dtype(&run, || cmd_eval::<f32>(&run, &checkpoint), || cmd_eval::<f64>(&run, &checkpoint))?
        }
        Command::Fuse { scores, weights, out } => cmd_fuse(&scores, weights.as_deref(), &out)?,
        Command::Count { run, frames, json } => cmd_count(&run, frames, json)?,
        Command::Gradcheck { blocks, dtype, seeds } => return cmd_gradcheck(&blocks, dtype, seeds),
        Command::Ablate { run, axis } => cmd_ablate(&run, &axis)?,
        Command::Synth {
            seed,
            out,
            per_class,
            test_per_class,
            frames,
            noise,
        } => {
            let spec = SynthSpec {
                per_class,
                test_per_class,
                frames,
                noise_sigma: noise,
                seed,
                ..SynthSpec::default()
            };
            cmd_synth(&spec, &out)?
        }
        Command::DumpFeatures { run, checkpoint, samples } => with_dtype(
            &run,
            || cmd_dump_features::<f32>(&run, &checkpoint, samples),
            || cmd_dump_features::<f64>(&run, &checkpoint, samples),
        )?,
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
