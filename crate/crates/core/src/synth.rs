//! Self-generated scenes with known ground truth.
//!
//! The small demo is a textured ground patch: 64 thin, nearly horizontal
//! Gaussians on the plane z ≈ 0,
//! seen by 25 downward-looking 64×64 cameras (20 train, 5 held out). The SfM
//! "points" are the ground-truth centers jittered by 5% of the scene extent
//! with random colors, so training starts from a perturbed initialization.

use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::camera::{format_pose_block, CameraView, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::gaussian::{bounding_radius, GaussianField, GaussianSplat};
use crate::ingest::{export_field, save_scene, SceneModel, ScenePoint};
use crate::render::{render, RenderOptions};
use crate::split::Split;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub grid: usize,
    pub camera_grid: usize,
    pub size: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Jitter of the initial points as a fraction of the scene extent.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            camera_grid: 5,
            size: 64,
            focal: 64.0,
            camera_height: 1.6,
            jitter: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub truth: GaussianField,
    /// Cameras (with ground-truth images) and the perturbed point cloud.
    pub scene: SceneModel,
    pub split: Split,
    /// Extra poses straddling the internal boundaries of a 2×2 grid (not in
    /// train or test), with ground-truth images.
    pub novel: Vec<CameraView>,
}

/// Held-out camera positions on the 5×5 camera grid (interior, spread).
const TEST_SLOTS: [usize; 5] = [6, 8, 12, 16, 18];

fn intrinsics(c: &SynthConfig) -> Intrinsics {
    Intrinsics {
        fx: c.focal,
        fy: c.focal,
        cx: c.size as f64 / 2.0,
        cy: c.size as f64 / 2.0,
        width: c.size,
        height: c.size,
    }
}

fn look_down(eye: Vector3<f64>, target_xy: (f64, f64)) -> Pose {
    Pose::look_at(eye, Vector3::new(target_xy.0, target_xy.1, 0.0), Vector3::y())
}

/// Ground-truth field: `grid²` anisotropic, mostly horizontal splats over
/// `[-1, 1]²`.
pub fn truth_field(config: &SynthConfig, rng: &mut impl Rng) -> GaussianField {
    let n = config.grid;
    let step = 2.0 / n as f64;
    let mut splats = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let center = Vector3::new(
                -1.0 + (ix as f64 + 0.5) * step + rng.random_range(-0.3..0.3) * step,
                -1.0 + (iy as f64 + 0.5) * step + rng.random_range(-0.3..0.3) * step,
                rng.random_range(0.0..0.02),
            );
            let scale = Vector3::new(
                rng.random_range(0.07..0.14),
                rng.random_range(0.05..0.11),
                rng.random_range(0.005..0.015),
            );
            // yaw plus a small tilt
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let tilt: f64 = rng.random_range(-0.05..0.05);
            let qz = Vector4::new((yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin());
            let qx = Vector4::new((tilt / 2.0).cos(), (tilt / 2.0).sin(), 0.0, 0.0);
            let rotation = quat_mul(&qz, &qx);
            let color = Vector3::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            );
            let mut s = GaussianSplat::new(center, scale, rotation, rng.random_range(0.75..0.95), vec![Vector3::zeros()]);
            s.set_base_color(&color);
            splats.push(s);
        }
    }
    GaussianField {
        splats,
        sh_degree: 0,
        scene_extent: 1.0,
    }
}

fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

fn render_view(field: &GaussianField, mut view: CameraView) -> CameraView {
    view.image = Some(render(field, &view, &RenderOptions::default()).color);
    view
}

/// Generates a synthetic scene.
pub fn generate(config: &SynthConfig) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = truth_field(config, &mut rng);
    let k = intrinsics(config);

    let m = config.camera_grid;
    let span = 1.6;
    let step = span / (m - 1).max(1) as f64;
    let mut cameras = Vec::with_capacity(m * m);
    for slot in 0..m * m {
        let (ix, iy) = (slot % m, slot / m);
        let x = -span / 2.0 + ix as f64 * step + rng.random_range(-0.1..0.1) * step;
        let y = -span / 2.0 + iy as f64 * step + rng.random_range(-0.1..0.1) * step;
        let eye = Vector3::new(x, y, config.camera_height + rng.random_range(-0.1..0.1));
        let target = (x * 0.7 + rng.random_range(-0.15..0.15), y * 0.7 + rng.random_range(-0.15..0.15));
        let view = CameraView::new(slot as u32 + 1, k, look_down(eye, target));
        cameras.push(render_view(&truth, view));
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
    truth.scene_extent = bounding_radius(&centers);

    let extent = truth.scene_extent;
    let points = truth
        .splats
        .iter()
        .map(|s| {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let position = s.center + Vector3::from(dir) * (config.jitter * extent);
            let color = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
            let track = cameras
                .iter()
                .filter(|c| {
                    c.project(&s.center, 0.01).is_some_and(|p| {
                        p.x >= 0.0 && p.y >= 0.0 && p.x < c.width() as f64 && p.y < c.height() as f64
                    })
                })
                .map(|c| c.image_id)
                .collect();
            ScenePoint {
                position,
                color,
                error: 0.0,
                track,
            }
        })
        .collect();

    let test: Vec<u32> = TEST_SLOTS.iter().filter(|&&s| s < m * m).map(|&s| s as u32 + 1).collect();
    let split = Split {
        test: test.iter().copied().collect(),
        train: cameras.iter().map(|c| c.image_id).filter(|id| !test.contains(id)).collect(),
    };

    // novel poses around the internal grid lines x = 0 and y = 0 of the
    // camera bounding box center
    let bc = {
        let (mut lo, mut hi) = (centers[0].xy(), centers[0].xy());
        for c in &centers {
            lo = lo.inf(&c.xy());
            hi = hi.sup(&c.xy());
        }
        (lo + hi) / 2.0
    };
    let novel_spots = [(0.0, 0.35), (0.0, -0.4), (0.35, 0.0), (-0.4, 0.0), (0.05, 0.05)];
    let novel = novel_spots
        .iter()
        .enumerate()
        .map(|(i, &(dx, dy))| {
            let eye = Vector3::new(bc.x + dx, bc.y + dy, config.camera_height * 1.05);
            let view = CameraView::new(1000 + i as u32, k, look_down(eye, (bc.x + dx * 0.5, bc.y + dy * 0.5)));
            render_view(&truth, view)
        })
        .collect();

    let scene = SceneModel { cameras, points };
    scene.validate()?;
    Ok(SynthScene {
        truth,
        scene,
        split,
        novel,
    })
}

/// The `synth --demo small` scene.
pub fn demo_small(seed: u64) -> Result<SynthScene> {
    generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
}

/// Writes the scene as a dataset directory: `sparse/` (COLMAP text),
/// `images/`, `split.txt`, `truth.ply`, `novel_poses.txt` and
/// `novel/<id>.png` ground truth for the novel poses.
pub fn write_dataset(s: &SynthScene, dir: &Path) -> Result<()> {
    save_scene(&s.scene, dir)?;
    s.split.save(&dir.join("split.txt"))?;
    export_field(&s.truth, &dir.join("truth.ply"))?;
    let mut poses = String::new();
    for v in &s.novel {
        poses += &format!("# novel view {}\n", v.image_id);
        poses += &format_pose_block(&v.pose, &v.intrinsics);
    }
    let path = dir.join("novel_poses.txt");
    std::fs::write(&path, poses).map_err(|e| Error::io(&path, e))?;
    let novel_dir = dir.join("novel");
    std::fs::create_dir_all(&novel_dir).map_err(|e| Error::io(&novel_dir, e))?;
    for v in &s.novel {
        if let Some(img) = &v.image {
            img.save_png(&novel_dir.join(format!("{}.png", v.image_id)))?;
        }
    }
    Ok(())
}
