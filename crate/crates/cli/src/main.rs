//! `ngf`: train, evaluate and visualize neural gauge fields, and run the
//! experiment presets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ngf_core::render::{Image, Ray, Vec3};
use ngf_core::scene::{write_ppm, VoxelScene};
use ngf_core::train::{
    evaluate, init_model, render_views, run_preset, train_on, Checkpoint, Dataset, GaugeKind, Model, Preset, TrainConfig,
    DEFAULT_SEEDS, SURFACE_WEIGHT,
};

const CHECKPOINT: &str = "checkpoint.ngf";
const CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "ngf", version, about = "Neural gauge fields on procedural scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Output {
    /// Output root; defaults to $NGF_OUT_DIR, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a UTC timestamp to the run directory name.
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `regularizer.kind=inforeg`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, metrics and previews.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Held-out PSNR of a checkpoint, per view and mean.
    Eval {
        /// Checkpoint file written by `train`.
        checkpoint: Option<PathBuf>,
        /// Config of the checkpoint; defaults to config.json beside it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Evaluate the analytic scene itself instead of a checkpoint.
        #[arg(long)]
        ground_truth: bool,
        /// Directory for eval.csv; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gauge image and occupancy map (continuous) or entry histogram (discrete).
    VizGauge {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Side length of the gauge image in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset's config matrix and print the summary table.
    Experiment {
        /// Preset name; `list` prints the available presets.
        preset: String,
        /// Seeds to run; repeatable. Defaults to 0, 1 and 2.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run configs one after another in this process (the only mode).
        #[arg(long)]
        serial: bool,
        #[command(flatten)]
        output: Output,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, output } => cmd_train(&config, &output),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            ground_truth,
            out,
        } => cmd_eval(checkpoint.as_deref(), config.as_deref(), &overrides, ground_truth, out.as_deref()),
        Command::VizGauge {
            checkpoint,
            config,
            size,
            out,
        } => cmd_viz_gauge(&checkpoint, config.as_deref(), size, out.as_deref()),
        Command::Experiment {
            preset,
            seeds,
            overrides,
            serial: _,
            output,
        } => cmd_experiment(&preset, &seeds, &overrides, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    Ok(base.with_overrides(&all)?)
}

fn out_root(out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("NGF_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir(output: &Output, name: &str) -> Result<PathBuf> {
    let mut name = name.to_string();
    if output.timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        name.push_str(&format!("-{secs}"));
    }
    let dir = out_root(output.out.as_deref()).join(name);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(args: &ConfigArgs, output: &Output) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed, &args.overrides)?;
    let dir = run_dir(output, &cfg.hash_hex())?;
    write(&dir.join(CONFIG), cfg.to_json())?;
    if cfg.steps == 0 {
        let model = init_model(&cfg)?;
        Checkpoint::from_store(&model.store, 0, cfg.hash()).save(&dir.join(CHECKPOINT))?;
        println!("wrote initial checkpoint to {}", dir.display());
        return Ok(());
    }
    let data = Dataset::build(&cfg)?;
    let out = train_on(&cfg, &data)?;
    out.checkpoint.save(&dir.join(CHECKPOINT))?;
    write(&dir.join("metrics.csv"), out.log.to_csv())?;
    let previews = render_views(&out.model, &data.test_rig, cfg.eval_samples, cfg.background)?;
    for (i, img) in previews.iter().enumerate() {
        write_ppm(&dir.join(format!("preview_{i:02}.ppm")), img)?;
    }
    let report = evaluate(&out.model, &data.test_rig, &data.test_images, cfg.eval_samples, cfg.background)?;
    write(&dir.join("eval.csv"), report.to_csv())?;
    if let Some(row) = out.log.last() {
        println!("step {} loss {:.6} train psnr {:.3}", row.step, row.loss, row.psnr);
    }
    println!("held-out psnr {:.3} dB", report.mean);
    println!("run directory {}", dir.display());
    Ok(())
}

/// Rebuilds the model a checkpoint was written from.
fn restore(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> Result<(TrainConfig, Model)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let default_cfg = checkpoint.parent().map(|d| d.join(CONFIG));
    let cfg_path = config.map(Path::to_path_buf).or(default_cfg);
    let cfg = load_config(cfg_path.as_deref(), None, overrides)?;
    let mut model = init_model(&cfg)?;
    ckpt.restore(&mut model.store)
        .with_context(|| format!("checkpoint {} does not match its config", checkpoint.display()))?;
    Ok((cfg, model))
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    overrides: &[String],
    ground_truth: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (report, dir) = if ground_truth {
        let cfg = load_config(config, None, overrides)?;
        let data = Dataset::build(&cfg)?;
        let Some(scene) = &data.scene else {
            bail!("--ground-truth needs a procedural scene");
        };
        let scene: &VoxelScene = scene;
        let report = evaluate(scene, &data.test_rig, &data.test_images, cfg.scene.gt_samples, cfg.background)?;
        (report, out.map(Path::to_path_buf))
    } else {
        let Some(path) = checkpoint else {
            bail!("a checkpoint path is required unless --ground-truth is given");
        };
        let (cfg, model) = restore(path, config, overrides)?;
        let data = Dataset::build(&cfg)?;
        let report = evaluate(&model, &data.test_rig, &data.test_images, cfg.eval_samples, cfg.background)?;
        let dir = out.map(Path::to_path_buf).or_else(|| path.parent().map(Path::to_path_buf));
        (report, dir)
    };
    println!("{:>6}  {:>8}", "view", "psnr");
    for (i, v) in report.per_view.iter().enumerate() {
        println!("{i:>6}  {v:>8.3}");
    }
    println!("{:>6}  {:>8.3}", "mean", report.mean);
    if let Some(dir) = dir {
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join("eval.csv"), report.to_csv())?;
    }
    Ok(())
}

fn cmd_viz_gauge(checkpoint: &Path, config: Option<&Path>, size: usize, out: Option<&Path>) -> Result<()> {
    if size == 0 {
        bail!("--size must be positive");
    }
    let (cfg, model) = restore(checkpoint, config, &[])?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    if let Some((gauge, _)) = model.discrete_gauge() {
        let selection = gauge.argmax_all(&model.store)?;
        let counts = selection_counts(&selection, gauge.entries());
        let path = dir.join("gauge_histogram.ppm");
        write_ppm(&path, &histogram_image(&counts))?;
        let used = counts.iter().filter(|&&c| c > 0).count();
        println!("{used} of {} entries selected; wrote {}", counts.len(), path.display());
        return Ok(());
    }
    let is_texture = matches!(cfg.gauge, GaugeKind::Continuous | GaugeKind::Orthogonal);
    let data = Dataset::build(&cfg)?;
    let (points, weights) = match &data.surface {
        Some(s) => s.clone(),
        None => {
            let rays: Vec<&Ray> = data.rays.iter().collect();
            model.sample_weights(&rays, cfg.eval_samples, cfg.background)?
        }
    };
    let coords = match model.gauge_coords(&points)? {
        Some(c) if is_texture => c,
        _ => bail!("gauge kind {:?} has no visualization", cfg.gauge),
    };
    let colors: Vec<Vec3> = match &data.scene {
        Some(scene) => points.data().chunks(3).map(|p| scene.color([p[0], p[1], p[2]])).collect(),
        None => vec![[1.0; 3]; points.outer_len()],
    };
    let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= SURFACE_WEIGHT).collect();
    let uv: Vec<[f64; 2]> = keep.iter().map(|&i| [coords.row(i)[0], coords.row(i)[1]]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
    let c: Vec<Vec3> = keep.iter().map(|&i| colors[i]).collect();
    let gauge_path = dir.join("gauge.ppm");
    write_ppm(&gauge_path, &splat_image(&uv, &w, &c, size))?;
    let (heat, occupancy) = occupancy_image(&uv, cfg.occupancy_grid, size);
    let heat_path = dir.join("occupancy.ppm");
    write_ppm(&heat_path, &heat)?;
    println!(
        "occupancy {occupancy:.4} over {} points; wrote {} and {}",
        uv.len(),
        gauge_path.display(),
        heat_path.display()
    );
    Ok(())
}

fn cell(v: f64, n: usize) -> usize {
    ((v * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize
}

/// Radiance-weighted mean color of the points landing in each pixel.
fn splat_image(uv: &[[f64; 2]], weights: &[f64], colors: &[Vec3], size: usize) -> Image {
    let mut acc = vec![[0.0f64; 4]; size * size];
    for ((p, &w), c) in uv.iter().zip(weights).zip(colors) {
        let a = &mut acc[cell(p[1], size) * size + cell(p[0], size)];
        for k in 0..3 {
            a[k] += w * c[k];
        }
        a[3] += w;
    }
    let mut img = Image::new(size, size);
    for (i, a) in acc.iter().enumerate() {
        if a[3] > 0.0 {
            img.set_pixel(i % size, i / size, [a[0] / a[3], a[1] / a[3], a[2] / a[3]]);
        }
    }
    img
}

/// Per-cell point counts on a `g × g` grid as a heat map, plus the
/// fraction of occupied cells.
fn occupancy_image(uv: &[[f64; 2]], g: usize, size: usize) -> (Image, f64) {
    let mut counts = vec![0usize; g * g];
    for p in uv {
        counts[cell(p[1], g) * g + cell(p[0], g)] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let n = counts[cell((y as f64 + 0.5) / size as f64, g) * g + cell((x as f64 + 0.5) / size as f64, g)];
            if n > 0 {
                let t = (n as f64).ln_1p() / max.ln_1p();
                img.set_pixel(x, y, [t, 0.25 + 0.5 * t * (1.0 - t), 1.0 - t]);
            }
        }
    }
    let occupied = counts.iter().filter(|&&n| n > 0).count() as f64 / (g * g) as f64;
    (img, occupied)
}

fn selection_counts(selection: &[Vec<usize>], entries: usize) -> Vec<usize> {
    let mut counts = vec![0usize; entries];
    for level in selection {
        for &e in level {
            counts[e] += 1;
        }
    }
    counts
}

const BAR_WIDTH: usize = 4;
const BAR_HEIGHT: usize = 128;

/// One bar per codebook entry, `BAR_WIDTH` pixels wide, separated by a
/// one-pixel gap.
fn histogram_image(counts: &[usize]) -> Image {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = Image::filled(counts.len() * (BAR_WIDTH + 1), BAR_HEIGHT, [1.0; 3]);
    for (e, &n) in counts.iter().enumerate() {
        let h = ((n as f64 / max) * BAR_HEIGHT as f64).round() as usize;
        let h = if n > 0 { h.max(1) } else { 0 };
        for x in 0..BAR_WIDTH {
            for y in BAR_HEIGHT - h..BAR_HEIGHT {
                img.set_pixel(e * (BAR_WIDTH + 1) + x, y, [0.2, 0.3, 0.7]);
            }
        }
    }
    img
}

fn cmd_experiment(name: &str, seeds: &[u64], overrides: &[String], output: &Output) -> Result<()> {
    if name == "list" {
        for p in Preset::ALL {
            println!("{}", p.name());
        }
        return Ok(());
    }
    let preset: Preset = name.parse()?;
    let seeds = if seeds.is_empty() { DEFAULT_SEEDS.to_vec() } else { seeds.to_vec() };
    // Fail on bad overrides before any run starts.
    for (_, cfg) in preset.variants(seeds[0]) {
        cfg.with_overrides(overrides)?;
    }
    let result = run_preset(preset, &seeds, overrides)?;
    let key = result.runs.iter().map(|r| r.config_hash.as_str()).collect::<Vec<_>>().join("");
    let dir = run_dir(output, &format!("{}-{}", preset.name(), short_hash(&key)))?;
    println!("{}", result.table());
    write(&dir.join("summary.csv"), result.to_csv())?;
    for r in &result.runs {
        let label: String = r.label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        write(&dir.join(format!("metrics_{label}_seed{}.csv", r.seed)), &r.metrics_csv)?;
    }
    println!("wrote {}", dir.join("summary.csv").display());
    Ok(())
}

/// FNV-1a over the concatenated run hashes.
fn short_hash(s: &str) -> String {
    let h = s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    format!("{h:016x}")
}
