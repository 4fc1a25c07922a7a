//! Command-line workbench for the depth-cue fusion crate: synthesize scene
//! triplets, train and evaluate fusion variants, run single-scene inference,
//! verify gradients, and export cue volumes.
//!
//! Exit codes: 0 on success, 1 on any runtime failure, 2 on usage errors.
//! Runtime failures print exactly one line to stderr of the form
//! `error[<code>]: <message>` where `<code>` is the error category.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cuefuse_core::error::{CueError, Result};
use cuefuse_core::eval::{average_reports, error_reduction_report, format_reduction_table, Metrics, MetricReport};
use cuefuse_core::fusion::Variant;
use cuefuse_core::gradcheck::check_full_pipeline;
use cuefuse_core::pipeline::{build_sample_volumes, evaluate_scene, predict_depth, SOURCE_FRAMES};
use cuefuse_core::store::save_tensor;
use cuefuse_core::synthdata::{
    eval_seed, generate_dataset, load_dataset, split_dirs, DatasetParams, LoadedScene,
    MANIFEST_NAME,
};
use cuefuse_core::tensor::Scalar;
use cuefuse_core::train::{
    load_checkpoint, save_checkpoint, train_loop, write_loss_log, Precision, RunConfig,
    StepRecord, CHECKPOINT_CONFIG, LOSS_LOG,
};
use cuefuse_core::viz::{depth_image, eval_triptych, save_png};

/// Pass bar for the gradient check, in max relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "cuefuse",
    version,
    about = "Depth-cue fusion workbench: synthetic scene triplets, cue volumes, \
             cross-cue fusion training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with train/ and eval/ splits
    Synth {
        /// Output directory; receives train/ and eval/ subdirectories
        #[arg(long)]
        out: PathBuf,
        /// Number of training scenes
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        /// Number of evaluation scenes
        #[arg(long, default_value_t = 20)]
        eval_scenes: usize,
        /// Base seed; the eval split derives its own stream from it
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a fusion model and write a checkpoint plus a CSV loss log
    Train {
        /// Dataset root (containing train/) or a split directory itself
        #[arg(long)]
        data: PathBuf,
        /// Run configuration JSON; defaults to the desk-scale configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output directory
        #[arg(long)]
        out: PathBuf,
        /// Pin data loading and volume construction to one worker. This
        /// build always uses one worker; the flag makes that choice explicit
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint: metrics JSON/CSV, comparison table, scene PNGs
    Eval {
        /// Dataset root (containing eval/) or a split directory itself
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by train
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for metrics and images
        #[arg(long)]
        out: PathBuf,
        /// Evaluate under a different fusion variant than the checkpoint's
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Pin data loading and volume construction to one worker. This
        /// build always uses one worker; the flag makes that choice explicit
        #[arg(long)]
        deterministic: bool,
    },
    /// Predict depth for one scene and write a DFT1 raster plus a PNG
    Infer {
        /// Dataset root (containing eval/) or a split directory itself
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by train
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene id to run; defaults to the first scene of the split
        #[arg(long)]
        scene: Option<String>,
        /// Output path stem; writes <stem>.dft1 and <stem>.png
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients of every fusion variant against finite
    /// differences on a small probe scene, at 64-bit precision
    Gradcheck {
        /// Run configuration JSON; only the seed is consumed
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scalar probes per parameter tensor
        #[arg(long, default_value_t = 4)]
        cap: usize,
    },
    /// Build matching and one-hot cue volumes for every scene of a split
    Volumes {
        /// Dataset root (containing eval/) or a split directory itself
        #[arg(long)]
        data: PathBuf,
        /// Output directory for <scene>_multi and <scene>_mono volume files
        #[arg(long)]
        out: PathBuf,
        /// Run configuration JSON for the hypothesis grid; defaults to the
        /// desk-scale configuration
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {}", e.code(), msg);
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            scenes,
            eval_scenes,
            seed,
        } => cmd_synth(&out, scenes, eval_scenes, seed),
        Cmd::Train {
            data,
            config,
            out,
            deterministic,
        } => cmd_train(&data, config.as_deref(), &out, deterministic),
        Cmd::Eval {
            data,
            ckpt,
            out,
            variant,
            deterministic,
        } => cmd_eval(&data, &ckpt, &out, variant, deterministic),
        Cmd::Infer {
            data,
            ckpt,
            scene,
            out,
        } => cmd_infer(&data, &ckpt, scene.as_deref(), &out),
        Cmd::Gradcheck { config, cap } => cmd_gradcheck(config.as_deref(), cap),
        Cmd::Volumes { data, out, config } => cmd_volumes(&data, &out, config.as_deref()),
    }
}

/// A path holding a manifest is a split; otherwise descend into `split`.
fn resolve_split(data: &Path, split: &str) -> PathBuf {
    if data.join(MANIFEST_NAME).exists() {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CueError::io(p, e))?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::desk_default()),
    }
}

/// CUEFUSE_PRECISION=f32|f64 overrides the configured precision.
fn apply_env_precision(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(s) = std::env::var("CUEFUSE_PRECISION") {
        cfg.precision = s.parse()?;
    }
    Ok(())
}

/// Reads the config half of a checkpoint without loading parameters.
fn peek_config(ckpt: &Path) -> Result<RunConfig> {
    let p = ckpt.join(CHECKPOINT_CONFIG);
    let text = std::fs::read_to_string(&p).map_err(|e| CueError::io(&p, e))?;
    RunConfig::from_json(&text)
}

fn check_resolution(cfg: &RunConfig, scene: &LoadedScene) -> Result<()> {
    let shape = scene.sample.gt_depth.shape();
    if shape != [cfg.resolution.0, cfg.resolution.1] {
        return Err(CueError::Shape(format!(
            "scene {} is {}x{} but the configuration expects {}x{}",
            scene.id, shape[0], shape[1], cfg.resolution.0, cfg.resolution.1
        )));
    }
    Ok(())
}

fn cmd_synth(out: &Path, scenes: usize, eval_scenes: usize, seed: u64) -> Result<()> {
    let (train_dir, eval_dir) = split_dirs(out);
    let train_params = DatasetParams::desk(scenes, seed);
    let eval_params = DatasetParams::desk(eval_scenes, eval_seed(seed));
    generate_dataset(&train_dir, &train_params)?;
    println!("wrote {} train scenes to {}", scenes, train_dir.display());
    generate_dataset(&eval_dir, &eval_params)?;
    println!("wrote {} eval scenes to {}", eval_scenes, eval_dir.display());
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, _deterministic: bool) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    apply_env_precision(&mut cfg)?;
    let split = resolve_split(data, "train");
    let scenes = load_dataset(&split)?;
    for s in &scenes {
        check_resolution(&cfg, s)?;
    }
    println!(
        "training {} ({:?}) on {} scenes at {}x{} for {} epochs",
        cfg.fusion.variant,
        cfg.precision,
        scenes.len(),
        cfg.resolution.0,
        cfg.resolution.1,
        cfg.epochs
    );
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&scenes, &cfg, out),
        Precision::F64 => run_train::<f64>(&scenes, &cfg, out),
    }
}

/// Accumulates step records and prints one line per finished epoch.
struct EpochPrinter {
    epochs: usize,
    epoch: Option<usize>,
    lr: f64,
    sums: [f64; 4],
    steps: usize,
}

impl EpochPrinter {
    fn new(epochs: usize) -> Self {
        EpochPrinter {
            epochs,
            epoch: None,
            lr: 0.0,
            sums: [0.0; 4],
            steps: 0,
        }
    }

    fn push(&mut self, r: &StepRecord) {
        if self.epoch != Some(r.epoch) {
            self.flush();
            self.epoch = Some(r.epoch);
        }
        self.lr = r.lr;
        self.sums[0] += r.loss;
        self.sums[1] += r.si;
        self.sums[2] += r.vnl;
        self.sums[3] += r.mono;
        self.steps += 1;
    }

    fn flush(&mut self) {
        if let Some(e) = self.epoch {
            let n = self.steps.max(1) as f64;
            println!(
                "epoch {:>3}/{} lr {:<7} loss {:.4} si {:.4} vnl {:.4} mono {:.4}",
                e + 1,
                self.epochs,
                self.lr,
                self.sums[0] / n,
                self.sums[1] / n,
                self.sums[2] / n,
                self.sums[3] / n
            );
        }
        self.sums = [0.0; 4];
        self.steps = 0;
        self.epoch = None;
    }
}

fn run_train<E: Scalar>(scenes: &[LoadedScene], cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut printer = EpochPrinter::new(cfg.epochs);
    let mut cb = |r: &StepRecord| printer.push(r);
    let outcome = train_loop::<E>(scenes, cfg, Some(&mut cb))?;
    printer.flush();
    save_checkpoint(out, &outcome.store, cfg)?;
    write_loss_log(out.join(LOSS_LOG), &outcome.log)?;
    println!(
        "wrote checkpoint to {} ({} steps logged)",
        out.display(),
        outcome.log.len()
    );
    Ok(())
}

fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    out: &Path,
    variant: Option<Variant>,
    _deterministic: bool,
) -> Result<()> {
    let mut cfg = peek_config(ckpt)?;
    if let Some(v) = variant {
        cfg.fusion.variant = v;
    }
    apply_env_precision(&mut cfg)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(data, ckpt, out, &cfg),
        Precision::F64 => run_eval::<f64>(data, ckpt, out, &cfg),
    }
}

fn run_eval<E: Scalar>(data: &Path, ckpt: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let (store, _) = load_checkpoint::<E>(ckpt)?;
    let split = resolve_split(data, "eval");
    let scenes = load_dataset(&split)?;
    if scenes.is_empty() {
        return Err(CueError::Data(format!(
            "no scenes found under {}",
            split.display()
        )));
    }
    let hyp = cfg.hypotheses()?;
    std::fs::create_dir_all(out).map_err(|e| CueError::io(out, e))?;

    let mut rows = Vec::new();
    for scene in &scenes {
        check_resolution(cfg, scene)?;
        let ev = evaluate_scene::<E>(&store, &cfg.fusion, &hyp, scene)?;
        let img = eval_triptych(
            &ev.fused_depth,
            &scene.sample.gt_depth,
            &scene.sample.dynamic_mask,
            cfg.d_min,
            cfg.d_max,
        )?;
        save_png(out.join(format!("{}.png", scene.id)), &img)?;
        rows.push(ev);
    }

    let fused = average_reports(&rows.iter().map(|r| r.fused).collect::<Vec<_>>())?;
    let mono = average_reports(&rows.iter().map(|r| r.mono).collect::<Vec<_>>())?;
    let multi = average_reports(&rows.iter().map(|r| r.multi).collect::<Vec<_>>())?;

    let json = serde_json::json!({
        "scenes": rows
            .iter()
            .map(|r| {
                Ok(serde_json::json!({
                    "id": r.id,
                    "fused": serde_json::to_value(r.fused)?,
                    "mono": serde_json::to_value(r.mono)?,
                    "multi": serde_json::to_value(r.multi)?,
                }))
            })
            .collect::<std::result::Result<Vec<_>, serde_json::Error>>()?,
        "summary": {
            "fused": serde_json::to_value(fused)?,
            "mono": serde_json::to_value(mono)?,
            "multi": serde_json::to_value(multi)?,
        },
    });
    let json_path = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&json)? + "\n";
    std::fs::write(&json_path, text).map_err(|e| CueError::io(&json_path, e))?;

    let csv_path = out.join("metrics.csv");
    std::fs::write(&csv_path, metrics_csv(&rows, &fused, &mono, &multi))
        .map_err(|e| CueError::io(&csv_path, e))?;

    let table = summary_table(&fused, &mono, &multi);
    let table_path = out.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| CueError::io(&table_path, e))?;
    print!("{table}");
    println!(
        "wrote {} scene images, metrics.json, metrics.csv, table.txt to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn csv_row(scene: &str, predictor: &str, split: &str, m: &Metrics) -> String {
    format!(
        "{scene},{predictor},{split},{},{},{},{},{},{},{},{}\n",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1, m.d2, m.d3, m.n_valid
    )
}

fn csv_report(out: &mut String, scene: &str, predictor: &str, r: &MetricReport) {
    out.push_str(&csv_row(scene, predictor, "overall", &r.overall));
    if let Some(d) = &r.dynamic {
        out.push_str(&csv_row(scene, predictor, "dynamic", d));
    }
}

fn metrics_csv(
    rows: &[cuefuse_core::pipeline::SceneEvaluation],
    fused: &MetricReport,
    mono: &MetricReport,
    multi: &MetricReport,
) -> String {
    let mut out =
        String::from("scene,predictor,split,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_valid\n");
    for r in rows {
        csv_report(&mut out, &r.id, "mono", &r.mono);
        csv_report(&mut out, &r.id, "pure_multi", &r.multi);
        csv_report(&mut out, &r.id, "fused", &r.fused);
    }
    csv_report(&mut out, "mean", "mono", mono);
    csv_report(&mut out, "mean", "pure_multi", multi);
    csv_report(&mut out, "mean", "fused", fused);
    out
}

fn table_row(out: &mut String, predictor: &str, split: &str, m: &Metrics) {
    out.push_str(&format!(
        "{:<11} {:<8} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<7.4} {:<7.4} {:<7.4} {}\n",
        predictor, split, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1, m.d2, m.d3, m.n_valid
    ));
}

fn summary_table(fused: &MetricReport, mono: &MetricReport, multi: &MetricReport) -> String {
    let mut out = String::from(
        "predictor   split    abs_rel  sq_rel   rmse     rmse_log d1      d2      d3      pixels\n",
    );
    for (name, r) in [("mono", mono), ("pure_multi", multi), ("fused", fused)] {
        table_row(&mut out, name, "overall", &r.overall);
        if let Some(d) = &r.dynamic {
            table_row(&mut out, name, "dynamic", d);
        }
    }
    out.push_str("\nerror reduction, fused vs mono (overall)\n");
    out.push_str(&format_reduction_table(&error_reduction_report(
        &mono.overall,
        &fused.overall,
    )));
    if let (Some(md), Some(fd)) = (&mono.dynamic, &fused.dynamic) {
        out.push_str("\nerror reduction, fused vs mono (dynamic)\n");
        out.push_str(&format_reduction_table(&error_reduction_report(md, fd)));
    }
    out
}

fn cmd_infer(data: &Path, ckpt: &Path, scene: Option<&str>, out: &Path) -> Result<()> {
    let mut cfg = peek_config(ckpt)?;
    apply_env_precision(&mut cfg)?;
    match cfg.precision {
        Precision::F32 => run_infer::<f32>(data, ckpt, scene, out, &cfg),
        Precision::F64 => run_infer::<f64>(data, ckpt, scene, out, &cfg),
    }
}

fn run_infer<E: Scalar>(
    data: &Path,
    ckpt: &Path,
    scene: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let (store, _) = load_checkpoint::<E>(ckpt)?;
    let split = resolve_split(data, "eval");
    let scenes = load_dataset(&split)?;
    let target = match scene {
        Some(id) => scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CueError::Data(format!("scene {id} not found in {}", split.display())))?,
        None => scenes
            .first()
            .ok_or_else(|| CueError::Data(format!("no scenes under {}", split.display())))?,
    };
    check_resolution(cfg, target)?;
    let hyp = cfg.hypotheses()?;
    let depth = predict_depth::<E>(&store, &target.sample, &cfg.fusion, &hyp)?.cast::<f32>();
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CueError::io(dir, e))?;
        }
    }
    let raster = out.with_extension("dft1");
    save_tensor(&raster, &depth)?;
    save_png(
        out.with_extension("png"),
        &depth_image(&depth, cfg.d_min, cfg.d_max)?,
    )?;
    println!(
        "wrote {} and {} for {} ({}x{})",
        raster.display(),
        out.with_extension("png").display(),
        target.id,
        depth.shape()[0],
        depth.shape()[1]
    );
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, cap: usize) -> Result<()> {
    let cfg = load_run_config(config)?;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for v in Variant::ALL {
        let report = check_full_pipeline(v, cap, cfg.seed)?;
        println!("{}: {}", v.name(), report);
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_at = format!("{} {}", v.name(), report.worst);
        }
    }
    println!("max rel err {worst:.3e}, tolerance {GRADCHECK_TOL:.0e}");
    if worst >= GRADCHECK_TOL {
        return Err(CueError::Numeric(format!(
            "gradient check failed: max rel err {worst:.3e} at {worst_at} exceeds {GRADCHECK_TOL:.0e}"
        )));
    }
    Ok(())
}

fn cmd_volumes(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(config)?;
    let split = resolve_split(data, "eval");
    let scenes = load_dataset(&split)?;
    if scenes.is_empty() {
        return Err(CueError::Data(format!(
            "no scenes found under {}",
            split.display()
        )));
    }
    let hyp = cfg.hypotheses()?;
    std::fs::create_dir_all(out).map_err(|e| CueError::io(out, e))?;
    let sources: Vec<String> = SOURCE_FRAMES.iter().map(|f| f.to_string()).collect();
    for scene in &scenes {
        check_resolution(&cfg, scene)?;
        let vols = build_sample_volumes(&scene.sample, &hyp)?;
        cuefuse_core::volumes::save_volume(
            &out.join(format!("{}_multi", scene.id)),
            &vols.multi,
            &sources,
        )?;
        cuefuse_core::volumes::save_volume(
            &out.join(format!("{}_mono", scene.id)),
            &vols.mono,
            &["1".to_string()],
        )?;
    }
    println!(
        "wrote {} volume pairs to {}",
        scenes.len(),
        out.display()
    );
    Ok(())
}
