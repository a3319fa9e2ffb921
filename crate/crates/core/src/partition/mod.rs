//! Scene partitioning: an XY grid over the camera positions, concentric
//! boundary expansion, visibility-based camera selection and point-set
//! extension through SfM tracks.
//!
//! Tie-break: a coordinate exactly on an internal grid line belongs to the
//! cell with the lower index, so every cell owns `(lo, hi]` along each axis
//! except the first, which also owns its low edge. The same rule
//! ([`CellLayout::cell_of`]) decides crop membership when stitching.

pub mod manifest;
pub mod visibility;

use std::collections::BTreeSet;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::ingest::SceneModel;
pub use manifest::{CellManifest, LayoutSummary};
pub use visibility::{projected_box_area, visibility_ratio, VisibilityReport};

/// Axis-aligned XY rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: Vector2::new(x0, y0),
            max: Vector2::new(x1, y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(&self) -> Vector2<f64> {
        (self.min + self.max) / 2.0
    }

    /// Closed containment.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Concentric rectangle with dimensions scaled by `1 + beta`.
    pub fn expanded(&self, beta: f64) -> Self {
        let half = Vector2::new(self.width(), self.height()) * ((1.0 + beta) / 2.0);
        let c = self.center();
        Self {
            min: c - half,
            max: c + half,
        }
    }

    pub fn bounding(points: impl IntoIterator<Item = Vector2<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut r = Self { min: first, max: first };
        for p in it {
            r.min = r.min.inf(&p);
            r.max = r.max.sup(&p);
        }
        Some(r)
    }
}

/// Whether threshold 0 admits every camera or only those that see the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisMode {
    /// The visibility rule requires `ratio ≥ threshold` and `ratio > 0`.
    #[default]
    Positive,
    /// The visibility rule requires `ratio ≥ threshold` only (threshold 0 ⇒ all cameras).
    Inclusive,
}

impl std::str::FromStr for VisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Self::Positive),
            "inclusive" => Ok(Self::Inclusive),
            _ => Err(Error::InvalidParameter(format!("vis-mode must be `positive` or `inclusive`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    /// Grid position `(ix, iy)`; `id = iy·n_x + ix`.
    pub index: (usize, usize),
    pub bounds: Rect,
    pub expanded: Rect,
    /// P_i: points whose XY falls in this cell.
    pub points: Vec<usize>,
    /// P_i^d: points inside the expanded bounds.
    pub dilated: Vec<usize>,
    /// P_i^f: dilated set plus points tracked by added cameras.
    pub extended: Vec<usize>,
    /// Cameras whose position lies in the cell (rule a).
    pub contained_cameras: Vec<u32>,
    /// Cameras admitted by visibility only (rule b minus rule a).
    pub added_cameras: Vec<u32>,
    pub visibility: Vec<VisibilityReport>,
}

impl Cell {
    /// All selected cameras, sorted.
    pub fn cameras(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.contained_cameras.iter().chain(&self.added_cameras).copied().collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLayout {
    pub nx: usize,
    pub ny: usize,
    /// XY bounding box of the camera positions.
    pub bbox: Rect,
    pub beta: f64,
    pub cells: Vec<Cell>,
}

/// Index along one axis with the lower-index tie-break; `None` outside.
fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let step = (hi - lo) / n as f64;
    // owns (lo + i·step, lo + (i+1)·step]
    let mut i = ((v - lo) / step).ceil() as usize;
    i = i.saturating_sub(1).min(n - 1);
    // guard against rounding in the division
    while i > 0 && v <= lo + i as f64 * step {
        i -= 1;
    }
    while i + 1 < n && v > lo + (i + 1) as f64 * step {
        i += 1;
    }
    Some(i)
}

impl CellLayout {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell owning an XY position inside the box, with the lower-index
    /// tie-break on internal boundaries.
    pub fn cell_containing(&self, p: &Vector2<f64>) -> Option<usize> {
        let ix = axis_index(p.x, self.bbox.min.x, self.bbox.max.x, self.nx)?;
        let iy = axis_index(p.y, self.bbox.min.y, self.bbox.max.y, self.ny)?;
        Some(iy * self.nx + ix)
    }

    /// Like [`Self::cell_containing`] but positions outside the box go to
    /// the nearest border cell (outer cells extend to infinity). Used for
    /// crop membership so no splat is lost at the scene border.
    pub fn cell_of(&self, p: &Vector2<f64>) -> usize {
        let q = Vector2::new(
            p.x.clamp(self.bbox.min.x, self.bbox.max.x),
            p.y.clamp(self.bbox.min.y, self.bbox.max.y),
        );
        self.cell_containing(&q).expect("clamped point lies in the box")
    }

    /// Union of the selected camera sets (no duplicates).
    pub fn all_cameras(&self) -> BTreeSet<u32> {
        self.cells.iter().flat_map(|c| c.cameras()).collect()
    }
}

/// Splits the XY bounding box of the camera positions into `nx × ny` equal
/// rectangles and assigns points (P_i). Expanded bounds use `beta = 0` until
/// [`expand_cell`] is applied.
pub fn make_grid(model: &SceneModel, nx: usize, ny: usize) -> Result<CellLayout> {
    if nx == 0 || ny == 0 {
        return Err(Error::Layout(format!("grid dimensions must be ≥ 1, got {nx}×{ny}")));
    }
    let bbox = Rect::bounding(model.cameras.iter().map(|c| c.center().xy()))
        .ok_or_else(|| Error::Layout("no cameras to partition".into()))?;
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::Layout(format!(
            "degenerate camera bounding box {:.3e} × {:.3e}",
            bbox.width(),
            bbox.height()
        )));
    }
    let (cw, ch) = (bbox.width() / nx as f64, bbox.height() / ny as f64);
    let mut layout = CellLayout {
        nx,
        ny,
        bbox,
        beta: 0.0,
        cells: (0..nx * ny)
            .map(|id| {
                let (ix, iy) = (id % nx, id / nx);
                let x0 = bbox.min.x + ix as f64 * cw;
                let y0 = bbox.min.y + iy as f64 * ch;
                // the last cell ends exactly at the box edge
                let x1 = if ix + 1 == nx { bbox.max.x } else { bbox.min.x + (ix + 1) as f64 * cw };
                let y1 = if iy + 1 == ny { bbox.max.y } else { bbox.min.y + (iy + 1) as f64 * ch };
                let bounds = Rect::new(x0, y0, x1, y1);
                Cell {
                    id,
                    index: (ix, iy),
                    bounds,
                    expanded: bounds,
                    points: Vec::new(),
                    dilated: Vec::new(),
                    extended: Vec::new(),
                    contained_cameras: Vec::new(),
                    added_cameras: Vec::new(),
                    visibility: Vec::new(),
                }
            })
            .collect(),
    };
    for (i, p) in model.points.iter().enumerate() {
        if let Some(c) = layout.cell_containing(&p.position.xy()) {
            layout.cells[c].points.push(i);
        }
    }
    for cell in &mut layout.cells {
        cell.dilated = cell.points.clone();
        cell.extended = cell.points.clone();
    }
    Ok(layout)
}

/// Sets cell `cell_id`'s expanded bounds (concentric, `(1+β)` scaled) and
/// P_i^d = P_i ∪ points inside them. Resets P_i^f to P_i^d.
pub fn expand_cell(layout: &mut CellLayout, model: &SceneModel, cell_id: usize, beta: f64) -> Result<Rect> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be finite and ≥ 0, got {beta}")));
    }
    let cell = layout
        .cells
        .get_mut(cell_id)
        .ok_or_else(|| Error::Layout(format!("no cell {cell_id}")))?;
    cell.expanded = cell.bounds.expanded(beta);
    let owned: BTreeSet<usize> = cell.points.iter().copied().collect();
    cell.dilated = model
        .points
        .iter()
        .enumerate()
        .filter(|(i, p)| owned.contains(i) || cell.expanded.contains(&p.position.xy()))
        .map(|(i, _)| i)
        .collect();
    cell.extended = cell.dilated.clone();
    Ok(cell.expanded)
}

/// Z range of the cell's dilated points, or of the whole cloud if empty.
pub fn cell_z_range(cell: &Cell, model: &SceneModel) -> (f64, f64) {
    let zs = |idx: &mut dyn Iterator<Item = f64>| {
        idx.fold(None, |acc: Option<(f64, f64)>, z| Some(acc.map_or((z, z), |(a, b)| (a.min(z), b.max(z)))))
    };
    zs(&mut cell.dilated.iter().map(|&i| model.points[i].position.z))
        .or_else(|| zs(&mut model.points.iter().map(|p| p.position.z)))
        .unwrap_or((0.0, 0.0))
}

/// Per-cell camera sets: (a) cameras located in the cell plus (b) cameras
/// whose visibility ratio of the expanded cell box passes `threshold`.
/// Only `cameras` (typically the training split) are considered. Records the
/// visibility reports in each cell.
pub fn select_cameras(
    layout: &mut CellLayout,
    model: &SceneModel,
    cameras: &[&CameraView],
    threshold: f64,
    mode: VisMode,
) -> Result<()> {
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter("visibility threshold must be finite".into()));
    }
    let boxes: Vec<(Rect, (f64, f64))> = layout
        .cells
        .iter()
        .map(|c| (c.expanded, cell_z_range(c, model)))
        .collect();
    let reports: Vec<Vec<VisibilityReport>> = boxes
        .par_iter()
        .enumerate()
        .map(|(ci, (rect, z))| cameras.iter().map(|cam| visibility_ratio(cam, ci, rect, *z)).collect())
        .collect();
    let owner: Vec<Option<usize>> = cameras.iter().map(|c| layout.cell_containing(&c.center().xy())).collect();
    for (ci, cell) in layout.cells.iter_mut().enumerate() {
        cell.contained_cameras.clear();
        cell.added_cameras.clear();
        for (k, cam) in cameras.iter().enumerate() {
            let r = reports[ci][k].ratio;
            let passes = r >= threshold && (mode == VisMode::Inclusive || r > 0.0);
            if owner[k] == Some(ci) {
                cell.contained_cameras.push(cam.image_id);
            } else if passes {
                cell.added_cameras.push(cam.image_id);
            }
        }
        cell.contained_cameras.sort_unstable();
        cell.added_cameras.sort_unstable();
        cell.visibility = reports[ci].clone();
    }
    Ok(())
}

/// P_i^f = P_i^d ∪ { p ∉ P_i^d : track(p) ∩ added cameras ≠ ∅ }.
pub fn extend_points(layout: &mut CellLayout, model: &SceneModel, cell_id: usize) -> Result<Vec<usize>> {
    let cell = layout
        .cells
        .get_mut(cell_id)
        .ok_or_else(|| Error::Layout(format!("no cell {cell_id}")))?;
    let added: BTreeSet<u32> = cell.added_cameras.iter().copied().collect();
    let dilated: BTreeSet<usize> = cell.dilated.iter().copied().collect();
    let mut out: BTreeSet<usize> = dilated.clone();
    if !added.is_empty() {
        for (i, p) in model.points.iter().enumerate() {
            if !dilated.contains(&i) && p.track.iter().any(|id| added.contains(id)) {
                out.insert(i);
            }
        }
    }
    cell.extended = out.into_iter().collect();
    Ok(cell.extended.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub nx: usize,
    pub ny: usize,
    pub beta: f64,
    pub threshold: f64,
    pub vis_mode: VisMode,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            nx: 2,
            ny: 2,
            beta: 0.2,
            threshold: 0.25,
            vis_mode: VisMode::Positive,
        }
    }
}

/// The whole partition stage: grid, expansion, camera selection over
/// `train_ids` (all cameras if `None`), point extension.
pub fn partition_scene(model: &SceneModel, config: &PartitionConfig, train_ids: Option<&BTreeSet<u32>>) -> Result<CellLayout> {
    let mut layout = make_grid(model, config.nx, config.ny)?;
    layout.beta = config.beta;
    for id in 0..layout.len() {
        expand_cell(&mut layout, model, id, config.beta)?;
    }
    let cams: Vec<&CameraView> = model
        .cameras
        .iter()
        .filter(|c| train_ids.is_none_or(|t| t.contains(&c.image_id)))
        .collect();
    select_cameras(&mut layout, model, &cams, config.threshold, config.vis_mode)?;
    for id in 0..layout.len() {
        extend_points(&mut layout, model, id)?;
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::ingest::ScenePoint;
    use nalgebra::Vector3;

    fn cam(id: u32, x: f64, y: f64) -> CameraView {
        let k = Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        let eye = Vector3::new(x, y, 3.0);
        CameraView::new(id, k, Pose::look_at(eye, Vector3::new(x, y, 0.0), Vector3::y()))
    }

    fn point(x: f64, y: f64, track: Vec<u32>) -> ScenePoint {
        ScenePoint {
            position: Vector3::new(x, y, 0.0),
            color: [100; 3],
            error: 0.0,
            track,
        }
    }

    fn unit_scene(points: Vec<ScenePoint>) -> SceneModel {
        SceneModel {
            cameras: vec![cam(1, 0.0, 0.0), cam(2, 1.0, 1.0), cam(3, 0.2, 0.9)],
            points,
        }
    }

    #[test]
    fn grid_assignment_and_ties() {
        let m = unit_scene(vec![point(0.9, 0.9, vec![]), point(0.5, 0.2, vec![]), point(0.0, 0.0, vec![]), point(2.0, 0.5, vec![])]);
        let l = make_grid(&m, 2, 2).unwrap();
        assert_eq!(l.cells[3].points, vec![0]);
        assert_eq!(l.cells[0].points, vec![1, 2]);
        let total: usize = l.cells.iter().map(|c| c.points.len()).sum();
        assert_eq!(total, 3);
        assert_eq!(l.cell_of(&Vector2::new(2.0, 0.5)), 1);
    }

    #[test]
    fn expansion_is_concentric() {
        let m = unit_scene(vec![point(1.05, 0.2, vec![])]);
        let mut l = make_grid(&m, 1, 1).unwrap();
        let r = expand_cell(&mut l, &m, 0, 0.2).unwrap();
        assert!((r.min - Vector2::new(-0.1, -0.1)).norm() < 1e-12);
        assert!((r.max - Vector2::new(1.1, 1.1)).norm() < 1e-12);
        assert_eq!(l.cells[0].dilated, vec![0]);
    }

    #[test]
    fn degenerate_box_is_a_layout_error() {
        let m = SceneModel {
            cameras: vec![cam(1, 0.0, 0.0), cam(2, 0.0, 1.0)],
            points: vec![],
        };
        assert!(matches!(make_grid(&m, 2, 2), Err(Error::Layout(_))));
    }

    #[test]
    fn extension_uses_added_camera_tracks() {
        let m = unit_scene(vec![point(0.1, 0.1, vec![]), point(5.0, 5.0, vec![9]), point(6.0, 6.0, vec![1])]);
        let mut l = make_grid(&m, 2, 2).unwrap();
        expand_cell(&mut l, &m, 0, 0.0).unwrap();
        l.cells[0].added_cameras = vec![9];
        assert_eq!(extend_points(&mut l, &m, 0).unwrap(), vec![0, 1]);
    }
}
