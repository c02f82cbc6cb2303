//! `bevlift`: run the fusion pipeline on scene dumps, evaluate detections,
//! generate synthetic data, and benchmark the lifting kernels.

use std::path::{Path, PathBuf};
use std::process::exit;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use bevlift_core::config::{load_config, PipelineConfig, Strategy};
use bevlift_core::eval::{mean_ap, pr_curve_svg, report_csv, EvalRegion, MeanApResult};
use bevlift_core::geometry::{voxel_centers, GridSpec};
use bevlift_core::head::GtBox;
use bevlift_core::io;
use bevlift_core::lifting::{sample_lift, splat_lift, trilinear_sample_depth};
use bevlift_core::nets::DepthBinSpec;
use bevlift_core::pipeline::{read_frame_input, run_pipeline, PipelineWeights};
use bevlift_core::synth::{generate_scene, list_frames, seeded_features, write_frame_dir, SplitRng};
use bevlift_core::{Error, Result};

#[derive(Parser)]
#[command(name = "bevlift", version, about = "Camera + 4D-radar BEV fusion pipeline")]
struct Cli {
    /// Worker threads for frame processing (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lift one frame's image features to a BEV tensor.
    Lift {
        /// Preset name (vod, tj4d) or config file path.
        #[arg(long)]
        config: String,
        /// Frame directory of a scene dump.
        #[arg(long)]
        frame: PathBuf,
        /// Override the configured lifting strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Output BEV tensor (.lxt).
        #[arg(long)]
        out: PathBuf,
        /// Also write the voxel coverage mask (splatting only).
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run detection over every frame of a scene dump.
    Detect {
        #[arg(long)]
        config: String,
        /// Dump root holding frame_NNNN directories.
        #[arg(long)]
        frames: PathBuf,
        /// Weight archive (.lxta); defaults to the config's archive or seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Output detections CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: String,
        /// Comma list of regions: eaa, roi, bands, tag:<t>.
        #[arg(long, default_value = "eaa,roi,bands")]
        regions: String,
        /// Output report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-class precision-recall SVGs.
        #[arg(long)]
        pr_svg: Option<PathBuf>,
    },
    /// Generate a synthetic scene dump with ground truth and seeded weights.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Preset name or config file path.
        #[arg(long)]
        preset: String,
        /// Output dump root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the lifting kernels and write a throughput report.
    Bench {
        /// Comma list of kernels: sample, trilinear, splat.
        #[arg(long, default_value = "sample,trilinear,splat")]
        kernels: String,
        /// Comma list of grid sizes, e.g. 160x160x10.
        #[arg(long, default_value = "160x160x10")]
        sizes: String,
        /// Output benchmark CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {}", e);
            exit(2);
        }
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {}", e);
        exit(e.exit_code());
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Lift { config, frame, strategy, out, mask } => lift(&config, &frame, strategy.as_deref(), &out, mask.as_deref()),
        Cmd::Detect { config, frames, weights, out } => detect(&config, &frames, weights.as_deref(), &out),
        Cmd::Eval { dets, gt, config, regions, out, pr_svg } => eval(&dets, &gt, &config, &regions, &out, pr_svg.as_deref()),
        Cmd::Synth { seed, preset, out } => synth(seed, &preset, &out),
        Cmd::Bench { kernels, sizes, out } => bench(&kernels, &sizes, &out),
    }
}

// ---------------------------------------------------------------- lift

/// Frame number encoded in a dump directory name, 0 when absent.
fn frame_number(dir: &Path) -> u32 {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("frame_"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn lift(
    config: &str,
    frame: &Path,
    strategy: Option<&str>,
    out: &Path,
    mask: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = strategy {
        cfg.strategy = Strategy::parse(s)?;
    }
    if mask.is_some() && cfg.strategy != Strategy::Splatting {
        return Err(Error::Config(format!(
            "--mask requires the splatting strategy, config uses {}",
            cfg.strategy.name()
        )));
    }
    let weights = PipelineWeights::load(&cfg, None)?;
    let input = read_frame_input(frame, &cfg, frame_number(frame))?;
    let result = run_pipeline(&cfg, &weights, &input)?;
    io::write_tensor(out, &result.image_bev)?;
    if let Some(path) = mask {
        let m = result
            .splat_mask
            .as_ref()
            .expect("splatting always produces a mask");
        io::write_tensor(path, m)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- detect

fn detect(config: &str, frames: &Path, weights: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let weights = PipelineWeights::load(&cfg, weights)?;
    let frames = list_frames(frames)?;
    // one frame per task; collect preserves frame order
    let per_frame: Result<Vec<_>> = frames
        .par_iter()
        .map(|(num, dir)| {
            let input = read_frame_input(dir, &cfg, *num)?;
            Ok(run_pipeline(&cfg, &weights, &input)?.detections)
        })
        .collect();
    let dets: Vec<_> = per_frame?.into_iter().flatten().collect();
    io::write_dets_csv(out, &dets)
}

// ---------------------------------------------------------------- eval

fn parse_regions(tokens: &str, cfg: &PipelineConfig) -> Result<Vec<EvalRegion>> {
    let mut out = Vec::new();
    for tok in tokens.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok {
            "eaa" => out.push(EvalRegion::EntireArea),
            "roi" => out.push(cfg.corridor.clone()),
            "bands" => out.extend(cfg.band_regions()),
            _ => match tok.strip_prefix("tag:") {
                Some(tag) if !tag.is_empty() => out.push(EvalRegion::SubsetTag(tag.to_string())),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown region '{}', expected eaa, roi, bands, or tag:<t>",
                        tok
                    )))
                }
            },
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no evaluation regions selected".into()));
    }
    Ok(out)
}

fn eval(
    dets: &Path,
    gt: &Path,
    config: &str,
    regions: &str,
    out: &Path,
    pr_svg: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let dets = io::read_dets_csv(dets)?;
    let gts = io::read_gt_csv(gt)?;
    let classes = cfg.class_names();
    let matching = cfg.match_config()?;

    let mut results: Vec<(String, MeanApResult)> = Vec::new();
    for region in parse_regions(regions, &cfg)? {
        let r = mean_ap(&dets, &gts, &classes, &matching, &region, &cfg.calib)?;
        results.push((region.label(), r));
    }
    std::fs::write(out, report_csv(&results))?;

    if let Some(dir) = pr_svg {
        std::fs::create_dir_all(dir)?;
        for (label, r) in &results {
            for (class, ap) in &r.per_class {
                let svg = pr_curve_svg(class, label, &ap.curve);
                std::fs::write(dir.join(format!("{}_{}.svg", label, class)), svg)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

fn synth(seed: u64, preset: &str, out: &Path) -> Result<()> {
    let cfg = load_config(preset)?;
    std::fs::create_dir_all(out)?;
    io::write_calibration(&out.join("calib.txt"), &cfg.calib.to_file())?;
    let weights = PipelineWeights::seeded(&cfg);
    io::write_archive(&out.join("weights.lxta"), &weights.to_entries())?;

    let feature_root = SplitRng::new(seed ^ 0xF00D);
    let mut all_gt: Vec<GtBox> = Vec::new();
    for frame in 0..cfg.synth.frames as u32 {
        let scene = generate_scene(&cfg.scene_spec(seed.wrapping_add(frame as u64)))?;
        let mut levels = Vec::with_capacity(cfg.strides.len());
        for li in 0..cfg.strides.len() {
            let (h, w) = cfg.level_shape(li);
            let mut rng = feature_root.split(frame as u64).split(li as u64);
            levels.push(seeded_features(&mut rng, &[h, w, cfg.image_channels]));
        }
        write_frame_dir(out, frame, &scene, &levels)?;
        all_gt.extend(scene.boxes.iter().map(|b| GtBox { frame, ..b.clone() }));
    }
    io::write_gt_csv(&out.join("gt.csv"), &all_gt)
}

// ---------------------------------------------------------------- bench

fn parse_size(tok: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<_> = tok.split('x').collect();
    let parse = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("bad grid size '{}', expected XxYxZ", tok)))
    };
    match parts.as_slice() {
        [x, y, z] => Ok((parse(x)?, parse(y)?, parse(z)?)),
        _ => Err(Error::Config(format!("bad grid size '{}', expected XxYxZ", tok))),
    }
}

/// Fixed benchmark rig: one stride-8 level of a 640x480 camera and a
/// metric grid sized to the requested voxel counts.
fn bench_one(kernel: &str, nx: usize, ny: usize, nz: usize) -> Result<(usize, usize, f64)> {
    let grid = GridSpec::new(
        (0.0, nx as f64 * 0.32),
        (-(ny as f64) * 0.16, ny as f64 * 0.16),
        (-3.0, -3.0 + nz as f64 * 0.5),
        (0.32, 0.32, 0.5),
    )?;
    let calib = bevlift_core::synth::canonical_calibration(640, 480, 320.0);
    let bins = DepthBinSpec::new(1.0, 51.2, 24)?;
    let strides = [8.0];
    let (h, w, c) = (60, 80, 8);
    let mut rng = SplitRng::new(0xBE7C);
    let feat = seeded_features(&mut rng, &[h, w, c]);
    let dist = seeded_features(&mut rng, &[h, w, bins.bins]);
    let centers = voxel_centers(&grid);

    let reps = 5;
    let queries = match kernel {
        "sample" | "trilinear" => nx * ny * nz,
        "splat" => h * w * bins.bins,
        _ => {
            return Err(Error::Config(format!(
                "unknown kernel '{}', expected sample, trilinear, or splat",
                kernel
            )))
        }
    };
    let start = Instant::now();
    for _ in 0..reps {
        let out = match kernel {
            "sample" => sample_lift(&[feat.clone()], &strides, &centers, &calib)?,
            "trilinear" => trilinear_sample_depth(&[dist.clone()], &strides, &centers, &calib, &bins)?,
            _ => splat_lift(&[feat.clone()], &[dist.clone()], &strides, &calib, &grid, &bins)?.0,
        };
        std::hint::black_box(out.data().len());
    }
    Ok((queries, reps, start.elapsed().as_secs_f64()))
}

pub const BENCH_HEADER: &str = "kernel,grid,queries,reps,seconds,per_second";

fn bench(kernels: &str, sizes: &str, out: &Path) -> Result<()> {
    let sizes: Result<Vec<_>> = sizes
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_size)
        .collect();
    let sizes = sizes?;
    if sizes.is_empty() {
        return Err(Error::Config("no benchmark sizes given".into()));
    }
    let mut csv = String::from(BENCH_HEADER);
    csv.push('\n');
    for kernel in kernels.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        for &(nx, ny, nz) in &sizes {
            let (queries, reps, seconds) = bench_one(kernel, nx, ny, nz)?;
            let per_second = queries as f64 * reps as f64 / seconds.max(1e-12);
            csv.push_str(&format!(
                "{},{}x{}x{},{},{},{:.6},{:.0}\n",
                kernel, nx, ny, nz, queries, reps, seconds, per_second
            ));
        }
    }
    std::fs::write(out, csv)?;
    Ok(())
}
