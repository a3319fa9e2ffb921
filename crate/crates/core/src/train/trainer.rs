//! The per-cell optimization loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::adam::Adam;
use super::config::TrainConfig;
use super::densify::{accumulate_view_gradient, densify_and_prune, reset_opacity, DensifyReport, DensifyStats};
use super::loss::{compute_loss, compute_loss_with_grad, LossBreakdown, LossWeights};
use crate::appearance::{checkpoint, AppearanceGradients, AppearanceModel};
use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::gaussian::{bounding_radius, layout, sh_coeff_count, GaussianField, GaussianSplat};
use crate::ingest::{export_field, SceneModel};
use crate::metrics::{psnr, ssim};
use crate::partition::CellManifest;
use crate::image::Image;
use crate::render::{depth_to_normal, render, render_backward, RenderGradients, RenderGrads, RenderOptions};

/// Initial opacity of point-initialized splats.
pub const INIT_OPACITY: f64 = 0.1;

/// Mean distance from each point to its `k` nearest neighbours (brute
/// force, parallel). Zero distances are floored at `sqrt(1e-7)`.
pub fn knn_mean_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                return 1e-7f64.sqrt();
            }
            let mean = found.iter().map(|d| d.max(1e-7).sqrt()).sum::<f64>() / found.len() as f64;
            mean.max(1e-7f64.sqrt())
        })
        .collect()
}

/// One splat per point: color from `rgb`, isotropic scale = mean distance
/// to the 3 nearest neighbours, opacity [`INIT_OPACITY`], identity rotation.
pub fn init_field_from_points(points: &[(Vector3<f64>, Vector3<f64>)], sh_degree: usize, scene_extent: f64) -> Result<GaussianField> {
    let centers: Vec<Vector3<f64>> = points.iter().map(|p| p.0).collect();
    let dist = knn_mean_distance(&centers, 3);
    let splats = points
        .iter()
        .zip(dist)
        .map(|((c, rgb), d)| {
            let mut s = GaussianSplat::new(
                *c,
                Vector3::repeat(d),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                INIT_OPACITY,
                vec![Vector3::zeros(); sh_coeff_count(sh_degree)],
            );
            s.set_base_color(rgb);
            s
        })
        .collect();
    GaussianField::new(splats, sh_degree, scene_extent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub image_id: u32,
    pub loss: LossBreakdown,
    pub splats: usize,
}

fn param_group(column: usize) -> &'static str {
    match column {
        c if c < layout::LOG_SCALE => "center",
        c if c < layout::ROTATION => "log_scale",
        c if c < layout::OPACITY => "rotation",
        layout::OPACITY => "opacity",
        _ => "sh",
    }
}

/// Loss and gradients of one training view.
pub struct StepGradients {
    pub loss: LossBreakdown,
    /// Splat parameter gradients (flat layout) plus, when requested, the
    /// per-pixel gradients and projection Jacobians for the densification statistic.
    pub render: RenderGradients,
    /// Appearance network and embedding gradients.
    pub appearance: Option<AppearanceGradients>,
}

/// The full training loss of one view: render, appearance forward, depth
/// normals (held constant), composite loss.
pub fn view_loss(
    field: &GaussianField,
    appearance: Option<&AppearanceModel>,
    view: &CameraView,
    gt: &Image,
    normal_target: Option<&Image>,
    opts: &RenderOptions,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let out = render(field, view, opts);
    let trace = appearance.map(|m| m.forward(&out.color, view.image_id)).transpose()?;
    let adjusted = trace.as_ref().map_or(&out.color, |t| &t.output);
    let own_target;
    let target = match normal_target {
        Some(t) => t,
        None => {
            own_target = depth_to_normal(&out.depth, &view.intrinsics);
            &own_target
        }
    };
    compute_loss(&out, adjusted, gt, target, weights)
}

/// [`view_loss`] with analytic gradients for every splat parameter and, with
/// an appearance model, its network weights and this view's embedding. The
/// normal target from the rendered depth is treated as a constant.
pub fn loss_and_gradients(
    field: &GaussianField,
    appearance: Option<&AppearanceModel>,
    view: &CameraView,
    gt: &Image,
    opts: &RenderOptions,
    weights: &LossWeights,
    collect_pixel_grads: bool,
) -> Result<StepGradients> {
    let opts = RenderOptions {
        capture_contribs: true,
        ..*opts
    };
    let out = render(field, view, &opts);
    let trace = appearance.map(|m| m.forward(&out.color, view.image_id)).transpose()?;
    let adjusted = trace.as_ref().map_or(&out.color, |t| &t.output);
    let target = depth_to_normal(&out.depth, &view.intrinsics);
    let (loss, lg) = compute_loss_with_grad(&out, adjusted, gt, &target, weights)?;

    // dL/dI_r: the D-SSIM term plus the L1 term pulled through the
    // appearance model
    let (mut color_grad, app_grads) = match (appearance, &trace) {
        (Some(m), Some(t)) => {
            let (g, ag) = m.backward(t, &lg.adjusted)?;
            (g, Some(ag))
        }
        _ => (lg.adjusted.clone(), None),
    };
    color_grad.data.iter_mut().zip(&lg.rendered.data).for_each(|(a, b)| *a += b);
    let render = render_backward(
        field,
        view,
        &opts,
        &out,
        &RenderGrads {
            color: &color_grad,
            depth: None,
            alpha: None,
            contribs: Some(&lg.contribs),
        },
        collect_pixel_grads,
    )?;
    Ok(StepGradients {
        loss,
        render,
        appearance: app_grads,
    })
}

/// Optimizer state for one cell.
pub struct Trainer {
    pub config: TrainConfig,
    pub field: GaussianField,
    pub appearance: Option<AppearanceModel>,
    pub views: Vec<CameraView>,
    /// Iterations completed.
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    pub events: Vec<DensifyReport>,
    pub stats: DensifyStats,
    field_adam: Adam,
    net_adam: Adam,
    embed_adam: Adam,
    embed_steps: Vec<u64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// `views` must carry their ground-truth images.
    pub fn new(field: GaussianField, views: Vec<CameraView>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        field.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidParameter("no training views".into()));
        }
        for v in &views {
            let img = v
                .image
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("training view {} has no image", v.image_id)))?;
            if img.width != v.width() || img.height != v.height() || img.channels != 3 {
                return Err(Error::Shape(format!("image of view {} does not match its intrinsics", v.image_id)));
            }
        }
        if field.sh_degree != config.sh_degree {
            return Err(Error::InvalidParameter(format!(
                "field SH degree {} differs from config {}",
                field.sh_degree, config.sh_degree
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let appearance = if config.use_appearance {
            let ids: Vec<u32> = views.iter().map(|v| v.image_id).collect();
            Some(AppearanceModel::new(config.appearance, &ids, &mut rng)?)
        } else {
            None
        };
        let (net_len, embed_len) = appearance
            .as_ref()
            .map_or((0, 0), |m| (m.network_param_count(), m.embeddings.len()));
        Ok(Self {
            field_adam: Adam::new(field.param_count()),
            net_adam: Adam::new(net_len),
            embed_adam: Adam::new(embed_len),
            embed_steps: vec![0; views.len()],
            stats: DensifyStats::new(field.len()),
            config,
            field,
            appearance,
            views,
            iteration: 0,
            history: Vec::new(),
            events: Vec::new(),
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            background: Vector3::from(self.config.background),
            ..RenderOptions::training()
        }
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Highest SH degree whose coefficients are currently trained.
    pub fn active_sh_degree(&self) -> usize {
        match self.config.sh_increase_interval {
            0 => self.config.sh_degree,
            k => (self.iteration / k).min(self.config.sh_degree),
        }
    }

    /// One optimization step on the next view; returns its loss.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let it = self.iteration + 1;
        let vi = self.next_view();
        let view = &self.views[vi];
        let gt = view.image.as_ref().expect("checked in new");
        let opts = self.render_options();
        let collect = it <= self.config.densify.stop;
        let mut step = loss_and_gradients(
            &self.field,
            self.appearance.as_ref(),
            view,
            gt,
            &opts,
            &self.config.loss,
            collect,
        )
        .map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged {
                iteration: it,
                detail: format!("view {}: {detail}", view.image_id),
            },
            other => other,
        })?;
        let loss = step.loss;
        let app_grads = step.appearance.take();
        let rg = step.render;

        let stride = self.field.param_stride();
        if let Some(i) = rg.params.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(param_group(i % stride)));
        }
        if let Some(ag) = &app_grads {
            if ag.network.iter().chain(&ag.embedding).any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient("appearance"));
            }
        }

        // splat parameters
        let lr = &self.config.learning_rates;
        let center_lr = lr.center_at(it - 1, self.config.iterations.max(1), self.field.scene_extent);
        let active = layout::SH + 3 * sh_coeff_count(self.active_sh_degree());
        let columns: Vec<f64> = (0..stride)
            .map(|c| match c {
                c if c < layout::LOG_SCALE => center_lr,
                c if c < layout::ROTATION => lr.scale,
                c if c < layout::OPACITY => lr.rotation,
                layout::OPACITY => lr.opacity,
                c if c < layout::SH + 3 => lr.sh,
                c if c < active => lr.sh / lr.sh_rest_divisor,
                _ => 0.0,
            })
            .collect();
        let mut grads = rg.params;
        for (i, g) in grads.iter_mut().enumerate() {
            if columns[i % stride] == 0.0 {
                *g = 0.0;
            }
        }
        let mut params = self.field.to_flat();
        self.field_adam.step(&mut params, &grads, |i| columns[i % stride]);
        self.field.set_flat(&params);

        // appearance network and this view's embedding
        if let (Some(m), Some(ag)) = (&mut self.appearance, app_grads) {
            let mut p = m.network_params();
            self.net_adam.step(&mut p, &ag.network, |_| lr.appearance);
            m.set_network_params(&p)?;
            let e = m.config.embed_dim;
            self.embed_steps[ag.embed_index] += 1;
            self.embed_adam.step_range(
                &mut m.embeddings,
                &ag.embedding,
                ag.embed_index * e,
                lr.appearance,
                self.embed_steps[ag.embed_index],
            );
        }

        if collect {
            accumulate_view_gradient(&mut self.stats, &rg.pixel_grads, &rg.jacobians);
        }
        self.iteration = it;
        self.history.push(LossRecord {
            iteration: it,
            image_id: self.views[vi].image_id,
            loss,
            splats: self.field.len(),
        });

        let d = self.config.densify;
        if d.is_densify_iteration(it) {
            let (report, sources) = densify_and_prune(&mut self.field, &mut self.stats, &d, it, &mut self.rng);
            self.field_adam.remap_rows(stride, &sources);
            if report.opacity_reset {
                self.field_adam.reset_column(stride, layout::OPACITY);
            }
            self.events.push(report);
        } else if d.is_opacity_reset_iteration(it) {
            reset_opacity(&mut self.field, d.opacity_reset_value);
            self.field_adam.reset_column(stride, layout::OPACITY);
            let n = self.field.len();
            self.events.push(DensifyReport {
                iteration: it,
                before: n,
                after: n,
                opacity_reset: true,
                ..DensifyReport::default()
            });
        }
        Ok(loss)
    }

    /// Runs until `config.iterations` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| {})
    }

    /// Like [`Self::run`], calling `progress` after every step.
    pub fn run_with(&mut self, mut progress: impl FnMut(&LossRecord)) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            progress(self.history.last().expect("step records"));
        }
        Ok(())
    }
}

/// Writes `iteration,L,L_c,L_d,L_n,L1,D-SSIM,image,splats` rows.
pub fn write_losses_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "iteration,L,L_c,L_d,L_n,L1,D-SSIM,image,splats").map_err(io)?;
    for r in history {
        let l = &r.loss;
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.iteration, l.total, l.color, l.depth, l.normal, l.l1, l.dssim, r.image_id, r.splats
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViewScore {
    pub image_id: u32,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR/SSIM of plain renders (no appearance model) against the views'
/// images.
pub fn evaluate_field(field: &GaussianField, views: &[&CameraView], background: Vector3<f64>) -> Result<Vec<ViewScore>> {
    let opts = RenderOptions {
        background,
        ..RenderOptions::default()
    };
    views
        .iter()
        .map(|v| {
            let gt = v
                .image
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("view {} has no image", v.image_id)))?;
            let img = render(field, v, &opts).color;
            Ok(ViewScore {
                image_id: v.image_id,
                psnr: psnr(&img, gt)?,
                ssim: ssim(&img, gt)?,
            })
        })
        .collect()
}

/// Files written by [`train_cell`].
#[derive(Debug, Clone)]
pub struct CellOutputs {
    pub field: PathBuf,
    pub appearance: Option<PathBuf>,
    pub losses: PathBuf,
    pub events: PathBuf,
}

pub struct TrainedCell {
    pub field: GaussianField,
    pub appearance: Option<AppearanceModel>,
    pub history: Vec<LossRecord>,
    pub events: Vec<DensifyReport>,
}

/// Builds the initial field and trainer for a cell: splats from P_i^f, the
/// cell's selected cameras as views, scene extent from their centers.
pub fn cell_trainer(manifest: &CellManifest, scene: &SceneModel, config: &TrainConfig, seed: u64) -> Result<Trainer> {
    let cell = &manifest.cell;
    if cell.extended.is_empty() {
        return Err(Error::Layout(format!("cell {} has no points", cell.id)));
    }
    let points = cell
        .extended
        .iter()
        .map(|&i| {
            scene
                .points
                .get(i)
                .map(|p| (p.position, p.rgb()))
                .ok_or_else(|| Error::Layout(format!("cell {} references missing point {i}", cell.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let views = cell
        .cameras()
        .into_iter()
        .map(|id| {
            scene
                .camera(id)
                .cloned()
                .ok_or_else(|| Error::Layout(format!("cell {} references missing camera {id}", cell.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.center()).collect();
    let field = init_field_from_points(&points, config.sh_degree, bounding_radius(&centers))?;
    Trainer::new(field, views, config.clone(), seed)
}

/// Trains one cell and writes `field.ply`, `appearance.ckpt`, `losses.csv`
/// and `densify.csv` into `out_dir`.
pub fn train_cell(
    manifest: &CellManifest,
    scene: &SceneModel,
    config: &TrainConfig,
    seed: u64,
    out_dir: &Path,
    progress: impl FnMut(&LossRecord),
) -> Result<(TrainedCell, CellOutputs)> {
    let mut trainer = cell_trainer(manifest, scene, config, seed)?;
    trainer.run_with(progress)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outputs = CellOutputs {
        field: out_dir.join("field.ply"),
        appearance: trainer.appearance.as_ref().map(|_| out_dir.join("appearance.ckpt")),
        losses: out_dir.join("losses.csv"),
        events: out_dir.join("densify.csv"),
    };
    export_field(&trainer.field, &outputs.field)?;
    if let (Some(m), Some(p)) = (&trainer.appearance, &outputs.appearance) {
        checkpoint::save(m, p)?;
    }
    write_losses_csv(&outputs.losses, &trainer.history)?;
    write_events_csv(&outputs.events, &trainer.events)?;
    Ok((
        TrainedCell {
            field: trainer.field,
            appearance: trainer.appearance,
            history: trainer.history,
            events: trainer.events,
        },
        outputs,
    ))
}

pub fn write_events_csv(path: &Path, events: &[DensifyReport]) -> Result<()> {
    let mut s = String::from("iteration,before,after,cloned,split,pruned,opacity_reset\n");
    for e in events {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            e.iteration, e.before, e.after, e.cloned, e.split, e.pruned, e.opacity_reset as u8
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};

    fn scene_views(field: &GaussianField, n: usize) -> Vec<CameraView> {
        let k = Intrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 12.0,
            cy: 12.0,
            width: 24,
            height: 24,
        };
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.4;
                let eye = Vector3::new(0.8 * a.cos(), 0.8 * a.sin(), 3.0);
                let mut v = CameraView::new(i as u32, k, Pose::look_at(eye, Vector3::zeros(), Vector3::y()));
                v.image = Some(render(field, &v, &RenderOptions::default()).color);
                v
            })
            .collect()
    }

    fn truth() -> GaussianField {
        let pts: Vec<(Vector3<f64>, Vector3<f64>)> = vec![
            (Vector3::new(-0.3, 0.0, 0.0), Vector3::new(0.9, 0.2, 0.1)),
            (Vector3::new(0.3, 0.1, 0.0), Vector3::new(0.1, 0.8, 0.3)),
            (Vector3::new(0.0, -0.3, 0.1), Vector3::new(0.2, 0.3, 0.9)),
        ];
        let mut f = init_field_from_points(&pts, 0, 1.0).unwrap();
        for s in &mut f.splats {
            s.log_scale = Vector3::repeat(0.15f64.ln());
            s.opacity_logit = crate::gaussian::logit(0.9);
        }
        f
    }

    fn small_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            sh_degree: 0,
            use_appearance: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn knn_distance_on_a_line() {
        let pts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let d = knn_mean_distance(&pts, 3);
        assert!((d[0] - 2.0).abs() < 1e-12);
        assert!((d[2] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_leave_field_unchanged() {
        let f = truth();
        let mut t = Trainer::new(f.clone(), scene_views(&f, 3), small_config(0), 1).unwrap();
        t.run().unwrap();
        assert_eq!(t.field, f);
        assert!(t.history.is_empty());
    }

    #[test]
    fn loss_decreases_and_identity_holds() {
        let gt = truth();
        let views = scene_views(&gt, 6);
        let mut init = gt.clone();
        for s in &mut init.splats {
            s.set_base_color(&Vector3::repeat(0.5));
            s.log_scale = Vector3::repeat(0.1f64.ln());
        }
        let mut cfg = small_config(150);
        cfg.use_appearance = true;
        cfg.appearance = crate::appearance::AppearanceConfig {
            embed_dim: 4,
            channels: 4,
            depth: 2,
            grid: 3,
        };
        let mut t = Trainer::new(init, views, cfg.clone(), 2).unwrap();
        t.run().unwrap();
        let first: f64 = t.history[..6].iter().map(|r| r.loss.total).sum();
        let last: f64 = t.history[144..].iter().map(|r| r.loss.total).sum();
        assert!(last < first, "{first} → {last}");
        for r in &t.history {
            let l = r.loss;
            let w = cfg.loss;
            assert!((l.total - (l.color + w.lambda1 * l.depth + w.lambda2 * l.normal)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lambdas_leave_color_only() {
        let gt = truth();
        let mut cfg = small_config(5);
        cfg.loss.lambda1 = 0.0;
        cfg.loss.lambda2 = 0.0;
        let mut t = Trainer::new(gt.clone(), scene_views(&gt, 2), cfg, 3).unwrap();
        t.run().unwrap();
        for r in &t.history {
            assert_eq!(r.loss.total, r.loss.color);
        }
    }
}
