//! `cellsplat` — pipeline driver: ingest → partition → train → stitch →
//! render / eval / export, plus `synth` for the synthetic demo scene.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a pipeline error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use cellsplat::camera::{parse_pose_file, CameraView};
use cellsplat::ingest::align::{manhattan_align_with, AlignOptions};
use cellsplat::ingest::{
    export_field_with, import_field, load_scene, parse_colmap_text, write_colmap_text, PlyPrecision, SceneModel,
};
use cellsplat::partition::manifest::{cell_dir, read_manifests, read_summary, write_partition};
use cellsplat::partition::{partition_scene, PartitionConfig, VisMode};
use cellsplat::split::{Split, SplitMode};
use cellsplat::stitch::{render_novel_view, stitch_dir, NovelViewRequest};
use cellsplat::synth::{demo_small, write_dataset};
use cellsplat::train::{evaluate_field, train_cell, TrainConfig};
use nalgebra::{Matrix3, Vector3};

#[derive(Parser)]
#[command(name = "cellsplat", version, about = "Divide-and-conquer Gaussian splatting for large scenes")]
struct Cli {
    /// Seed for every random choice (RANSAC, splits, training, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import a COLMAP text model and its images into a scene directory.
    Ingest(IngestArgs),
    /// Split a scene into grid cells and select cameras/points per cell.
    Partition(PartitionArgs),
    /// Train one cell or all cells of a partition.
    Train(TrainArgs),
    /// Crop trained cells to their bounds and merge them into one field.
    Stitch(StitchArgs),
    /// Render a field from a pose file or a trajectory.
    Render(RenderArgs),
    /// PSNR/SSIM of a field against a scene's held-out (or training) views.
    Eval(EvalArgs),
    /// Re-write a field PLY, optionally with 32-bit floats for viewers.
    Export(ExportArgs),
    /// Generate a synthetic scene with known ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory with cameras.txt, images.txt and points3D.txt.
    #[arg(long)]
    colmap: PathBuf,
    /// Directory holding the images named in images.txt.
    #[arg(long)]
    images: PathBuf,
    /// Output scene directory (sparse/, images/, alignment.txt).
    #[arg(long)]
    out: PathBuf,
    /// `auto` (ground-plane RANSAC), `off`, or a file with a 3×3 rotation.
    #[arg(long, default_value = "auto")]
    manhattan: String,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 2)]
    nx: usize,
    #[arg(long, default_value_t = 2)]
    ny: usize,
    /// Cell expansion ratio.
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    /// Minimum fraction of the image covered by a cell's projection.
    #[arg(long, default_value_t = 0.25)]
    vis_threshold: f64,
    #[arg(long, value_enum, default_value_t = VisModeArg::Positive)]
    vis_mode: VisModeArg,
    /// Train/test split file; defaults to `<scene>/split.txt` if present,
    /// otherwise every 8th image is held out.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Random 95/5 split (seeded) instead of every 8th image when no split
    /// file is available.
    #[arg(long)]
    random_split: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VisModeArg {
    /// ratio ≥ threshold and ratio > 0
    Positive,
    /// ratio ≥ threshold
    Inclusive,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("which").required(true).args(["cell", "all"]))]
struct TrainArgs {
    /// Partition directory (output of `partition`).
    #[arg(long, default_value = ".")]
    cells: PathBuf,
    #[arg(long)]
    cell: Option<usize>,
    #[arg(long)]
    all: bool,
    /// Base configuration; `--config` values override it.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cells trained concurrently with `--all`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print progress every this many iterations (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 2000 iterations, densify until 1000, λ1 = 1.
    Desk,
    /// 60000 iterations, densify until 15000, λ1 = 100.
    Full,
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("poses").required(true).args(["pose", "traj"]))]
struct RenderArgs {
    #[arg(long)]
    field: PathBuf,
    /// File with one pose block (16 world-to-camera values + `fx fy cx cy W H`).
    #[arg(long)]
    pose: Option<PathBuf>,
    /// File with a sequence of pose blocks.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Background color `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    background: Vector3<f64>,
    /// Also write float images (`.raw`: header `H W C`, little-endian f32).
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Which side of the split to score.
    #[arg(long, value_enum, default_value_t = Side::Test)]
    views: Side,
    /// CSV output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    background: Vector3<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Test,
    Train,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write 32-bit float properties.
    #[arg(long)]
    float: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    demo: Demo,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Demo {
    /// 64 splats, 25 cameras (5 held out), 64×64 images.
    Small,
}

fn parse_rgb(s: &str) -> std::result::Result<Vector3<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad color component `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| c.is_finite()) => Ok(Vector3::new(r, g, b)),
        _ => Err("expected `r,g,b`".into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already contains (library errors embed their I/O source).
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => ingest(a, seed),
        Command::Partition(a) => partition(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Stitch(a) => stitch(a),
        Command::Render(a) => render_poses(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
        Command::Synth(a) => synth(a, seed),
    }
}

fn read_rotation(path: &Path) -> Result<Matrix3<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| anyhow!("{}: bad number `{t}`", path.display())))
        .collect::<Result<_>>()?;
    if v.len() != 9 {
        bail!("{}: expected 9 numbers (row-major 3×3 rotation), found {}", path.display(), v.len());
    }
    let r = Matrix3::from_row_slice(&v);
    if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        bail!("{}: not a rotation matrix (orthonormal, determinant +1)", path.display());
    }
    Ok(r)
}

fn format_rotation(r: &Matrix3<f64>) -> String {
    let mut s = String::from("# world rotation applied at ingest (p' = R p), row-major\n");
    for i in 0..3 {
        let _ = writeln!(s, "{:?} {:?} {:?}", r[(i, 0)], r[(i, 1)], r[(i, 2)]);
    }
    s
}

fn ingest(a: IngestArgs, seed: u64) -> Result<()> {
    let mut model = parse_colmap_text(&a.colmap)?;
    // decode every image once to check it matches its camera
    model.load_images(&a.images)?;
    let rotation = match a.manhattan.as_str() {
        "off" => Matrix3::identity(),
        "auto" => {
            let opts = AlignOptions {
                seed,
                ..AlignOptions::default()
            };
            let aligned = manhattan_align_with(&model, &opts)
                .context("use `--manhattan off` or `--manhattan <rotation file>` to bypass")?;
            eprintln!("ground plane found ({:.0}% inliers)", 100.0 * aligned.inlier_ratio);
            aligned.rotation
        }
        file => read_rotation(Path::new(file))?,
    };
    model.rotate(&rotation);
    write_colmap_text(&model, &a.out.join("sparse"))?;
    let images_out = a.out.join("images");
    for c in &model.cameras {
        let dst = images_out.join(&c.name);
        if let Some(dir) = dst.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::copy(a.images.join(&c.name), &dst).with_context(|| format!("copying image {}", c.name))?;
    }
    let path = a.out.join("alignment.txt");
    fs::write(&path, format_rotation(&rotation)).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "ingested {} cameras, {} points into {}",
        model.cameras.len(),
        model.points.len(),
        a.out.display()
    );
    Ok(())
}

fn partition(a: PartitionArgs, seed: u64) -> Result<()> {
    let model = load_scene(&a.scene, false)?;
    let ids: Vec<u32> = model.cameras.iter().map(|c| c.image_id).collect();
    let default_split = a.scene.join("split.txt");
    let split = match &a.split {
        Some(p) => Split::load(p)?,
        None if default_split.is_file() => Split::load(&default_split)?,
        None if a.random_split => Split::new(
            &ids,
            SplitMode::Random {
                train_fraction: 0.95,
                seed,
            },
        )?,
        None => Split::new(&ids, SplitMode::default())?,
    };
    let config = PartitionConfig {
        nx: a.nx,
        ny: a.ny,
        beta: a.beta,
        threshold: a.vis_threshold,
        vis_mode: match a.vis_mode {
            VisModeArg::Positive => VisMode::Positive,
            VisModeArg::Inclusive => VisMode::Inclusive,
        },
    };
    let layout = partition_scene(&model, &config, Some(&split.train))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let split_path = a.out.join("split.txt");
    split.save(&split_path)?;
    let scene = fs::canonicalize(&a.scene).with_context(|| format!("resolving {}", a.scene.display()))?;
    let split_abs = fs::canonicalize(&split_path)?;
    write_partition(&layout, &config, &scene, Some(&split_abs), &a.out)?;
    println!("cell  points  extended  cameras (contained + added)");
    for c in &layout.cells {
        println!(
            "{:4}  {:6}  {:8}  {:3} ({} + {})",
            c.id,
            c.points.len(),
            c.extended.len(),
            c.cameras().len(),
            c.contained_cameras.len(),
            c.added_cameras.len()
        );
    }
    Ok(())
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed ^ (cell as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let base = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    let config = match &a.config {
        Some(p) => TrainConfig::load_over(&base, p)?,
        None => base,
    };
    let manifests = read_manifests(&a.cells)?;
    let summary = read_summary(&a.cells)?;
    let ids: Vec<usize> = match a.cell {
        Some(id) if id >= manifests.len() => bail!("cell {id} does not exist ({} cells)", manifests.len()),
        Some(id) => vec![id],
        None => (0..manifests.len()).collect(),
    };
    let scene = load_scene(&summary.scene, true)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .context("building the worker pool")?;
    let results: Vec<Result<String>> = pool.install(|| {
        ids.par_iter()
            .map(|&id| {
                let start = Instant::now();
                let out = cell_dir(&a.cells, id);
                let log_every = a.log_every;
                let (trained, _) = train_cell(&manifests[id], &scene, &config, cell_seed(seed, id), &out, |r| {
                    if log_every > 0 && (r.iteration + 1) % log_every == 0 {
                        eprintln!(
                            "cell {id} it {:6} L {:.5} L_c {:.5} splats {}",
                            r.iteration + 1,
                            r.loss.total,
                            r.loss.color,
                            r.splats
                        );
                    }
                })
                .with_context(|| format!("training cell {id}"))?;
                Ok(format!(
                    "cell {id}: {} splats, final loss {:.5}, {} densify events, {:.1}s",
                    trained.field.len(),
                    trained.history.last().map_or(f64::NAN, |r| r.loss.total),
                    trained.events.len(),
                    start.elapsed().as_secs_f64()
                ))
            })
            .collect()
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {}", describe(&e));
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn stitch(a: StitchArgs) -> Result<()> {
    let (merged, reports) = stitch_dir(&a.cells, &a.out)?;
    println!("cell  trained  kept  mean base color");
    for r in &reports {
        println!(
            "{:4}  {:7}  {:4}  ({:.3}, {:.3}, {:.3})",
            r.cell, r.trained_splats, r.kept_splats, r.mean_color[0], r.mean_color[1], r.mean_color[2]
        );
    }
    println!("merged {} splats into {}", merged.len(), a.out.display());
    Ok(())
}

fn render_poses(a: RenderArgs) -> Result<()> {
    let field = import_field(&a.field)?;
    let path = a.pose.as_ref().or(a.traj.as_ref()).expect("clap enforces one");
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let frames = parse_pose_file(&text)?;
    if a.pose.is_some() && frames.len() != 1 {
        bail!("{}: --pose expects exactly one pose, found {} (use --traj)", path.display(), frames.len());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let count = frames.len();
    for (i, (pose, intrinsics)) in frames.into_iter().enumerate() {
        let img = render_novel_view(&field, &NovelViewRequest { pose, intrinsics }, a.background)?;
        img.save_png(&a.out.join(format!("frame_{i:04}.png")))?;
        if a.raw {
            img.save_raw(&a.out.join(format!("frame_{i:04}.raw")))?;
        }
    }
    println!("rendered {count} frame(s) into {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let field = import_field(&a.field)?;
    let split = Split::load(&a.split)?;
    let mut scene: SceneModel = load_scene(&a.scene, false)?;
    let ids: &BTreeSet<u32> = match a.views {
        Side::Test => &split.test,
        Side::Train => &split.train,
    };
    if ids.is_empty() {
        bail!("{}: no views on that side of the split", a.split.display());
    }
    if let Some(missing) = ids.iter().find(|id| scene.camera(**id).is_none()) {
        bail!("split references image {missing}, which is not in the scene");
    }
    scene.cameras.retain(|c| ids.contains(&c.image_id));
    scene.load_images(&a.scene.join("images"))?;
    let views: Vec<&CameraView> = scene.cameras.iter().collect();
    let scores = evaluate_field(&field, &views, a.background)?;
    let mut csv = String::from("view,PSNR,SSIM\n");
    for s in &scores {
        let _ = writeln!(csv, "{},{:.4},{:.6}", s.image_id, s.psnr, s.ssim);
    }
    let n = scores.len() as f64;
    let _ = writeln!(
        csv,
        "mean,{:.4},{:.6}",
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n
    );
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let field = import_field(&a.field)?;
    let precision = if a.float { PlyPrecision::Float } else { PlyPrecision::Double };
    export_field_with(&field, &a.out, precision)?;
    println!("wrote {} splats to {}", field.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let scene = match a.demo {
        Demo::Small => demo_small(seed)?,
    };
    write_dataset(&scene, &a.out)?;
    let path = a.out.join("train.toml");
    let text = format!(
        "# Desk-scale training preset for this scene (`cellsplat train --config`).\n{}",
        TrainConfig::desk().to_toml()
    );
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} cameras ({} held out), {} points and {} novel poses to {}",
        scene.scene.cameras.len(),
        scene.split.test.len(),
        scene.scene.points.len(),
        scene.novel.len(),
        a.out.display()
    );
    Ok(())
}
