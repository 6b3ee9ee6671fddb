//! Command-line front end.
//!
//! ```text
//! embedhead gen           --classes 16 --per-class 20 --dim 64 --noise 0.05 --seed 1 --out d.mefs
//! embedhead split         --data d.mefs --query-fraction 0.2 --seed 1 --index-out i.mefs --queries-out q.mefs
//! embedhead train-stage1  --data i.mefs --out-dir s1 [--config c.txt] [--set key=value]...
//! embedhead train-stage2  --data i.mefs --from-checkpoint s1/checkpoint.meck --out-dir s2
//! embedhead eval          --checkpoint s2/checkpoint.meck --index i.mefs --queries q.mefs --out eval.json
//! embedhead export        --checkpoint s2/checkpoint.meck --out weights.json
//! embedhead inspect       --checkpoint s2/checkpoint.meck
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dataio::{
    generate_synthetic, read_feature_set, split, write_feature_set, write_manifest, FeatureSet,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::model::embed;
use crate::retrieval::{build_index, mean_precision_at_k, EvalSpec, PrecisionVariant};
use crate::trainer::{
    init_model, inspect_checkpoint, load_checkpoint, run_stage, save_checkpoint, StageStart,
    TrainConfig,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.meck";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Parser, Debug)]
#[command(
    name = "embedhead",
    version,
    about = "Multi-branch ArcFace embedding head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Training feature file (.mefs).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Flat `key = value` config file; applied over the stage defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets init, data and dropout seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Any config key, e.g. `--set num_branches=10`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Capped,
    Plain,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled Gaussian-cluster feature set.
    Gen {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified index/query split.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query_fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        index_out: PathBuf,
        #[arg(long)]
        queries_out: PathBuf,
        /// Split report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Head-only training on frozen features.
    #[command(name = "train-stage1")]
    TrainStage1(TrainArgs),
    /// Whole-model fine-tuning from a stage-1 checkpoint.
    #[command(name = "train-stage2")]
    TrainStage2 {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Mean precision@k of query embeddings against index embeddings.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "capped")]
        variant: VariantArg,
        /// Score queries whose label is absent from the index as 0.
        #[arg(long)]
        score_unanswerable: bool,
        /// Evaluate the freshly initialized model from the checkpoint's config.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every tensor (and the collapsed eval head) as JSON.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the checkpoint's tensor table without loading the payload.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = json!({ "error": e.to_string(), "kind": error_kind(&e) });
            eprintln!("{msg}");
            1
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::BadMagic { .. } => "bad_magic",
        Error::UnsupportedVersion { .. } => "unsupported_version",
        Error::CrcMismatch { .. } => "crc_mismatch",
        Error::Truncated { .. } => "truncated",
        Error::Malformed(_) => "malformed",
        Error::MissingTensor(_) => "missing_tensor",
        Error::TensorShape { .. } => "tensor_shape",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::DegenerateRow { .. } => "degenerate_row",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Config(_) => "config",
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &text)
}

fn resolve_config(stage: u8, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_stage(stage)?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = args.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.peak_lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = args.margin {
        cfg.arcface_margin = v;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config sets stage = {} for a stage-{stage} command",
            cfg.stage
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(stage: u8, args: &TrainArgs, from: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(stage, args)?;
    let data = read_feature_set(&args.data)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    write_text(&args.out_dir.join(RESOLVED_CONFIG_FILE), &cfg.to_text())?;
    let start = match from {
        Some(p) => StageStart::CheckpointPath(p.to_path_buf()),
        None => StageStart::Fresh,
    };
    let out = run_stage(&cfg, &data, start)?;
    save_checkpoint(args.out_dir.join(CHECKPOINT_FILE), &out.checkpoint())?;
    write_json(&args.out_dir.join(REPORT_FILE), &out.report)?;
    write_json(
        &args.out_dir.join(TIMING_FILE),
        &json!({ "wall_clock_secs": out.wall_clock_secs }),
    )?;
    println!(
        "stage {stage}: {} steps, eval loss {:.6} -> {:.6}",
        out.report.plan.total_steps, out.report.initial_eval_loss, out.report.final_eval_loss
    );
    Ok(())
}

fn embedded(model: &crate::model::Model, fs: &FeatureSet) -> Result<FeatureSet> {
    FeatureSet::new(
        embed(model, fs.features())?,
        fs.labels().to_vec(),
        fs.num_classes(),
    )
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            classes,
            per_class,
            dim,
            noise,
            seed,
            out,
        } => {
            let fs = generate_synthetic(classes, per_class, dim, noise, seed)?;
            write_feature_set(&fs, &out)?;
            write_manifest(
                &fs,
                &out,
                Some(seed),
                json!({
                    "generator": "synthetic",
                    "classes": classes,
                    "per_class": per_class,
                    "dim": dim,
                    "noise": noise,
                }),
            )?;
            println!(
                "wrote {} rows x {} dims to {}",
                fs.len(),
                fs.dim(),
                out.display()
            );
            Ok(())
        }
        Command::Split {
            data,
            query_fraction,
            seed,
            index_out,
            queries_out,
            report,
        } => {
            let fs = read_feature_set(&data)?;
            let spec = SplitSpec {
                query_fraction,
                seed,
            };
            let (index, queries, rep) = split(&fs, &spec)?;
            let provenance = |part: &str| {
                json!({
                    "generator": "split",
                    "source": data.display().to_string(),
                    "part": part,
                    "query_fraction": query_fraction,
                })
            };
            write_feature_set(&index, &index_out)?;
            write_manifest(&index, &index_out, Some(seed), provenance("index"))?;
            write_feature_set(&queries, &queries_out)?;
            write_manifest(&queries, &queries_out, Some(seed), provenance("queries"))?;
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
            if !rep.singleton_classes.is_empty() {
                log::warn!(
                    "singleton classes kept in index: {:?}",
                    rep.singleton_classes
                );
            }
            println!("{} index rows, {} queries", index.len(), queries.len());
            Ok(())
        }
        Command::TrainStage1(args) => train(1, &args, None),
        Command::TrainStage2 {
            train: args,
            from_checkpoint,
        } => {
            let from = from_checkpoint.ok_or_else(|| {
                Error::invalid("train-stage2 requires --from-checkpoint <stage-1 checkpoint>")
            })?;
            train(2, &args, Some(&from))
        }
        Command::Eval {
            checkpoint,
            index,
            queries,
            k,
            variant,
            score_unanswerable,
            untrained,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let model = if untrained {
                let cfg = &ck.meta.config;
                let mut m = init_model(cfg, ck.model.head.in_dim(), ck.meta.num_classes)?;
                m.backbone =
                    crate::model::TinyBackbone::identity(ck.model.backbone.raw_dim(), true);
                m
            } else {
                ck.model
            };
            let index_fs = embedded(&model, &read_feature_set(&index)?)?;
            let query_fs = embedded(&model, &read_feature_set(&queries)?)?;
            let idx = build_index(index_fs.features(), index_fs.labels())?;
            let spec = EvalSpec {
                k,
                precision_variant: match variant {
                    VariantArg::Capped => PrecisionVariant::Capped,
                    VariantArg::Plain => PrecisionVariant::Plain,
                },
                skip_unanswerable: !score_unanswerable,
            };
            let report = mean_precision_at_k(&idx, &query_fs, &spec)?;
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            println!(
                "mP@{k}: capped {:.6} plain {:.6} ({} queries, {} skipped)",
                report.capped_score, report.plain_score, report.query_size, report.skipped_queries
            );
            Ok(())
        }
        Command::Export { checkpoint, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let m = &ck.model;
            let mut tensors = Vec::new();
            for ((name, data), (_, shape)) in m.named_params().into_iter().zip(m.param_shapes()) {
                tensors.push(json!({ "name": name, "shape": shape, "data": data }));
            }
            let (w, c) = m.head.collapsed();
            let doc = json!({
                "format": "embedhead-weights",
                "layout": "row-major; weight [in, out] maps row vector x to x W + b",
                "stage": ck.meta.stage,
                "arcface": ck.meta.margin,
                "dropout_rates": m.head.dropout_rates(),
                "tensors": tensors,
                "collapsed_head": {
                    "weight": { "shape": [w.rows(), w.cols()], "data": w.data() },
                    "bias": { "shape": [c.len()], "data": c },
                },
            });
            write_json(&out, &doc)?;
            println!(
                "exported {} tensors to {}",
                m.named_params().len(),
                out.display()
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let s = inspect_checkpoint(&checkpoint)?;
            println!(
                "version {} stage {} crc32 {:#010x} ({} bytes)",
                s.version, s.meta.stage, s.stored_crc, s.file_len
            );
            for t in &s.tensors {
                println!("  {:<28} {:?} {:?}", t.name, t.dtype, t.shape);
            }
            Ok(())
        }
    }
}
