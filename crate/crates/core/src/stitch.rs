//! Crop trained cells to the area they own, merge them into one field and
//! render novel views of the result.
//!
//! Membership uses [`CellLayout::cell_of`] on the splat center: the
//! lower-index cell wins on internal grid lines, and the outer cells extend
//! to infinity, so every splat of every cell is kept by at most one cell
//! and a field copied into all cells is reproduced exactly by crop + merge.

use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;

use crate::camera::{CameraView, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::gaussian::{bounding_radius, GaussianField};
use crate::image::Image;
use crate::ingest::{export_field, import_field};
use crate::partition::manifest::{cell_dir, layout_from_manifests, read_manifests};
use crate::partition::CellLayout;
use crate::render::{render, RenderOptions};
use crate::sh::SH_C0;

/// Splats of `field` whose center belongs to cell `cell_id`.
pub fn crop_cell(field: &GaussianField, layout: &CellLayout, cell_id: usize) -> GaussianField {
    GaussianField {
        splats: field
            .splats
            .iter()
            .filter(|s| layout.cell_of(&s.center.xy()) == cell_id)
            .cloned()
            .collect(),
        sh_degree: field.sh_degree,
        scene_extent: field.scene_extent,
    }
}

/// Concatenates cropped cells; the scene extent is recomputed from the
/// merged splat centers.
pub fn merge(fields: &[GaussianField]) -> Result<GaussianField> {
    let degree = fields.first().map_or(0, |f| f.sh_degree);
    if let Some(f) = fields.iter().find(|f| f.sh_degree != degree) {
        return Err(Error::InvalidParameter(format!(
            "cannot merge SH degree {} with {}",
            f.sh_degree, degree
        )));
    }
    let splats: Vec<_> = fields.iter().flat_map(|f| f.splats.iter().cloned()).collect();
    let centers: Vec<Vector3<f64>> = splats.iter().map(|s| s.center).collect();
    let extent = if centers.is_empty() {
        fields.first().map_or(1.0, |f| f.scene_extent)
    } else {
        bounding_radius(&centers)
    };
    GaussianField::new(splats, degree, extent)
}

/// Crop every cell's field to its own area and merge.
pub fn crop_and_merge(fields: &[GaussianField], layout: &CellLayout) -> Result<GaussianField> {
    if fields.len() != layout.len() {
        return Err(Error::Layout(format!("{} fields for {} cells", fields.len(), layout.len())));
    }
    let cropped: Vec<GaussianField> = fields.iter().enumerate().map(|(i, f)| crop_cell(f, layout, i)).collect();
    merge(&cropped)
}

/// A camera for novel-view synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelViewRequest {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl NovelViewRequest {
    pub fn camera(&self, id: u32) -> Result<CameraView> {
        let c = CameraView::new(id, self.intrinsics, self.pose.clone());
        c.validate()?;
        Ok(c)
    }
}

pub fn render_novel_view(field: &GaussianField, request: &NovelViewRequest, background: Vector3<f64>) -> Result<Image> {
    let cam = request.camera(0)?;
    let opts = RenderOptions {
        background,
        ..RenderOptions::default()
    };
    Ok(render(field, &cam, &opts).color)
}

/// Per-cell summary written alongside the merged field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStitchReport {
    pub cell: usize,
    pub trained_splats: usize,
    pub kept_splats: usize,
    /// Mean base (DC) color of the kept splats — cells are trained
    /// independently, so this exposes appearance drift between them.
    pub mean_color: [f64; 3],
}

fn mean_base_color(field: &GaussianField) -> [f64; 3] {
    if field.is_empty() {
        return [0.0; 3];
    }
    let sum: Vector3<f64> = field.splats.iter().map(|s| s.sh[0] * SH_C0 + Vector3::repeat(0.5)).sum();
    (sum / field.len() as f64).into()
}

/// Reads `<cells>/cells/cell_<i>/field.ply` for every manifest under
/// `cells`, crops, merges and writes `out`.
pub fn stitch_dir(cells: &Path, out: &Path) -> Result<(GaussianField, Vec<CellStitchReport>)> {
    let manifests = read_manifests(cells)?;
    let layout = layout_from_manifests(&manifests)?;
    let mut cropped = Vec::with_capacity(layout.len());
    let mut reports = Vec::with_capacity(layout.len());
    for id in 0..layout.len() {
        let field = import_field(&cell_dir(cells, id).join("field.ply"))?;
        let c = crop_cell(&field, &layout, id);
        reports.push(CellStitchReport {
            cell: id,
            trained_splats: field.len(),
            kept_splats: c.len(),
            mean_color: mean_base_color(&c),
        });
        cropped.push(c);
    }
    let merged = merge(&cropped)?;
    export_field(&merged, out)?;
    Ok((merged, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianSplat;
    use crate::partition::{Cell, Rect};
    use nalgebra::{Vector2, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout_2x2() -> CellLayout {
        let bbox = Rect::new(0.0, 0.0, 2.0, 2.0);
        CellLayout {
            nx: 2,
            ny: 2,
            bbox,
            beta: 0.0,
            cells: (0..4)
                .map(|id| {
                    let (ix, iy) = (id % 2, id / 2);
                    let b = Rect::new(ix as f64, iy as f64, ix as f64 + 1.0, iy as f64 + 1.0);
                    Cell {
                        id,
                        index: (ix, iy),
                        bounds: b,
                        expanded: b,
                        points: vec![],
                        dilated: vec![],
                        extended: vec![],
                        contained_cameras: vec![],
                        added_cameras: vec![],
                        visibility: vec![],
                    }
                })
                .collect(),
        }
    }

    fn field(centers: &[Vector3<f64>]) -> GaussianField {
        GaussianField::new(
            centers
                .iter()
                .map(|c| GaussianSplat::new(*c, Vector3::repeat(0.1), Vector4::new(1.0, 0.0, 0.0, 0.0), 0.5, vec![Vector3::zeros()]))
                .collect(),
            0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn boundary_splat_is_kept_once() {
        let l = layout_2x2();
        let f = field(&[Vector3::new(1.0, 0.5, 0.0), Vector3::new(1.0, 1.0, 0.0), Vector3::new(-3.0, 5.0, 0.0)]);
        let counts: Vec<usize> = (0..4).map(|i| crop_cell(&f, &l, i).len()).collect();
        assert_eq!(counts, vec![2, 0, 1, 0]);
    }

    #[test]
    fn crop_merge_reproduces_a_copied_field() {
        let l = layout_2x2();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::new(rng.random_range(-1.0..3.0), rng.random_range(-1.0..3.0), 0.0))
            .collect();
        let f = field(&centers);
        let merged = crop_and_merge(&vec![f.clone(); 4], &l).unwrap();
        assert_eq!(merged.len(), f.len());
        for s in &f.splats {
            assert_eq!(merged.splats.iter().filter(|m| m.center == s.center).count(), 1);
        }
        // idempotent
        let again = crop_and_merge(&vec![merged.clone(); 4], &l).unwrap();
        let mut a: Vec<_> = again.splats.iter().map(|s| (s.center.x, s.center.y)).collect();
        let mut b: Vec<_> = merged.splats.iter().map(|s| (s.center.x, s.center.y)).collect();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(a, b);
        // brute-force membership scan
        for id in 0..4 {
            let kept = crop_cell(&f, &l, id);
            let brute = f
                .splats
                .iter()
                .filter(|s| {
                    let p = Vector2::new(s.center.x.clamp(0.0, 2.0), s.center.y.clamp(0.0, 2.0));
                    let ix = if p.x <= 1.0 { 0 } else { 1 };
                    let iy = if p.y <= 1.0 { 0 } else { 1 };
                    iy * 2 + ix == id
                })
                .count();
            assert_eq!(kept.len(), brute);
        }
    }

    #[test]
    fn merge_of_one_cell_is_identity_and_degrees_must_match() {
        let f = field(&[Vector3::new(0.2, 0.3, 0.0), Vector3::new(1.2, 0.3, 0.0)]);
        let m = merge(std::slice::from_ref(&f)).unwrap();
        assert_eq!(m.splats, f.splats);
        let mut g = f.clone();
        g.sh_degree = 1;
        for s in &mut g.splats {
            s.sh.resize(4, Vector3::zeros());
        }
        assert!(merge(&[f, g]).is_err());
    }

    #[test]
    fn empty_field_renders_background() {
        let req = NovelViewRequest {
            pose: Pose::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y()),
            intrinsics: Intrinsics {
                fx: 10.0,
                fy: 10.0,
                cx: 4.0,
                cy: 4.0,
                width: 8,
                height: 8,
            },
        };
        let img = render_novel_view(&GaussianField::empty(0, 1.0), &req, Vector3::new(0.2, 0.4, 0.6)).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }
}
