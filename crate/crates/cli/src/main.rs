use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use voxvote::error::ErrorClass;
use voxvote::feat2d::Extractor;
use voxvote::harness::bench::{bench_counts_csv, bench_csv, bench_sparse};
use voxvote::harness::dataset::write_cloud;
use voxvote::harness::pipeline::{ablation_csv, render_views, PipelineOutput};
use voxvote::harness::train::trace_csv;
use voxvote::harness::{
    generate_suite, load_dataset, run_ablation, run_pipeline, train_proxy, write_dataset,
    AblationAxis, Format, RunConfig, Sample, TrainTask,
};
use voxvote::io::write_vgf1;
use voxvote::multiview::DepthImage;
use voxvote::preprocess::remove_background;

#[derive(Parser, Debug)]
#[command(
    name = "voxvote",
    version,
    about = "Point-cloud anomaly detection toolkit"
)]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the pipeline, synthetic suite and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 picks the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct DataArgs {
    /// Dataset root; the configured synthetic suite is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Point cloud file format of the dataset.
    #[arg(long, default_value = "xyz-grid")]
    format: Format,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Axis {
    NViews,
    FeatureMode,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic suite as a dataset directory.
    Synth {
        #[arg(long, default_value = "xyz-grid")]
        format: Format,
    },
    /// Remove the background and write foreground clouds with a summary.
    Preprocess(DataArgs),
    /// Write rendered depth images and per-view feature fields.
    Features(DataArgs),
    /// Score test samples and write per-sample results.
    Detect(DataArgs),
    /// Score test samples and write the metric report.
    Evaluate(DataArgs),
    /// Sweep one configuration axis and write a metric table.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Time voting convolution against the dense oracle.
    Bench,
    /// Train a proxy network and write its loss trace and parameters.
    TrainProxy {
        /// Overrides `train.task`.
        #[arg(long)]
        task: Option<TrainTask>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err
        .chain()
        .find_map(|e| e.downcast_ref::<voxvote::Error>())
        .map(|e| e.class());
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Numeric) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = seed;
        cfg.suite.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    create_dir(out)?;
    match &cli.command {
        Command::Synth { format } => {
            let samples = generate_suite(&cfg.suite)?;
            write_dataset(out, &samples, *format)?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Preprocess(d) => preprocess(cfg, &load_samples(cfg, d)?, out)?,
        Command::Features(d) => features(cfg, &load_samples(cfg, d)?, out)?,
        Command::Detect(d) => {
            let output = run_pipeline(&cfg.pipeline, &load_samples(cfg, d)?)?;
            write_results(&output, out)?;
        }
        Command::Evaluate(d) => {
            let output = run_pipeline(&cfg.pipeline, &load_samples(cfg, d)?)?;
            write_results(&output, out)?;
            write_text(&out.join("report.json"), &output.report.to_json())?;
        }
        Command::Ablate { data, axis } => {
            let axis = match axis {
                Axis::NViews => AblationAxis::NViews,
                Axis::FeatureMode => AblationAxis::FeatureMode,
            };
            let rows = run_ablation(&cfg.pipeline, &load_samples(cfg, data)?, axis)?;
            write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
        }
        Command::Bench => {
            let rows = bench_sparse(&cfg.bench, cfg.pipeline.seed)?;
            write_text(&out.join("bench.csv"), &bench_counts_csv(&rows))?;
            write_text(&out.join("bench_timing.csv"), &bench_csv(&rows))?;
        }
        Command::TrainProxy { task } => {
            let mut train = cfg.train.clone();
            if let Some(t) = task {
                train.task = *t;
            }
            train_proxy_cmd(&train, cfg, out)?;
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| voxvote::Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| voxvote::Error::io(path, e).into())
}

fn load_samples(cfg: &RunConfig, d: &DataArgs) -> Result<Vec<Sample>> {
    match &d.data {
        Some(root) => {
            let ds = load_dataset(root, d.format)?;
            Ok(ds.samples)
        }
        None => Ok(generate_suite(&cfg.suite)?),
    }
}

fn write_results(output: &PipelineOutput, out: &Path) -> Result<()> {
    for r in &output.results {
        write_text(
            &out.join("results").join(format!("{}.json", r.sample_id)),
            &r.to_json(),
        )?;
    }
    Ok(())
}

fn preprocess(cfg: &RunConfig, samples: &[Sample], out: &Path) -> Result<()> {
    let summaries = samples
        .par_iter()
        .map(|s| -> Result<_> {
            let id = s.id();
            let r = remove_background(&s.cloud, &cfg.pipeline.preprocess)
                .map_err(|e| e.in_stage("preprocess", &id))?;
            let path = out.join("foreground").join(format!("{id}.ply"));
            create_dir(path.parent().expect("joined path has a parent"))?;
            write_cloud(&path, &r.cloud, Format::PlyAscii)?;
            Ok(json!({
                "sample_id": id,
                "entries": s.cloud.len(),
                "foreground": r.cloud.len(),
                "background": r.background.len(),
                "noise": r.noise.len(),
                "plane_normal": r.plane.normal.as_slice(),
                "plane_offset": r.plane.offset,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    write_text(
        &out.join("preprocess.json"),
        &serde_json::to_string_pretty(&summaries)?,
    )
}

fn features(cfg: &RunConfig, samples: &[Sample], out: &Path) -> Result<()> {
    let p = &cfg.pipeline;
    p.validate()?;
    let extractor = Extractor::from_config(&p.extractor)?;
    let summaries = samples
        .par_iter()
        .map(|s| -> Result<_> {
            let id = s.id();
            let r = remove_background(&s.cloud, &p.preprocess)
                .map_err(|e| e.in_stage("preprocess", &id))?;
            let views = render_views(&r.cloud, p).map_err(|e| e.in_stage("multiview", &id))?;
            let images: Vec<DepthImage> = views.into_iter().map(|(_, im)| im).collect();
            let fields = extractor
                .extract_views(&id, &images)
                .map_err(|e| e.in_stage("features", &id))?;
            let base = out.join("features").join(&id);
            create_dir(&base)?;
            for (k, im) in images.iter().enumerate() {
                im.to_pgm().write(&base.join(format!("view_{k:02}.pgm")))?;
            }
            write_vgf1(&base.with_extension("vgf"), &fields)?;
            let f = &fields[0];
            Ok(json!({
                "sample_id": id,
                "foreground": r.cloud.len(),
                "views": images.len(),
                "filled_pixels": images.iter().map(DepthImage::filled).collect::<Vec<_>>(),
                "field_shape": [f.h(), f.w(), f.d()],
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    write_text(
        &out.join("features.json"),
        &serde_json::to_string_pretty(&summaries)?,
    )
}

fn train_proxy_cmd(
    train: &voxvote::harness::TrainConfig,
    cfg: &RunConfig,
    out: &Path,
) -> Result<()> {
    let runs = train_proxy(train, &cfg.pipeline.graph)?;
    write_text(&out.join("trace.csv"), &trace_csv(&runs))?;
    let mut summary = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let path = out.join(format!("params_{i}.vgk"));
        voxvote::io::write_vgk1(&path, &r.params)?;
        let f = r.final_stats();
        summary.push(json!({
            "lambda": r.lambda,
            "params": path.file_name().and_then(|n| n.to_str()),
            "loss": f.loss,
            "task_loss": f.task_loss,
            "penalty": f.penalty,
            "zero_fractions": f.zero_fractions,
            "mean_zero_fraction": r.final_zero_fraction(),
        }));
    }
    write_text(
        &out.join("train.json"),
        &serde_json::to_string_pretty(&json!({
            "task": train.task.name(),
            "iters": train.iters,
            "learning_rate": train.learning_rate,
            "runs": summary,
        }))?,
    )
}
