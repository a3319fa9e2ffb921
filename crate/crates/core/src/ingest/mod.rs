//! Sparse-model ingestion: COLMAP text models, image loading, Manhattan
//! alignment and the splat PLY exchange format.

pub mod align;
pub mod colmap;
pub mod ply;

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::image::Image;

pub use align::{manhattan_align, Alignment};
pub use colmap::{parse_colmap_text, write_colmap_text};
pub use ply::{export_field, export_field_with, import_field, PlyPrecision};

/// One sparse SfM point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    /// Reprojection error reported by the SfM solver.
    pub error: f64,
    /// Ids of the images observing this point.
    pub track: Vec<u32>,
}

impl ScenePoint {
    pub fn rgb(&self) -> Vector3<f64> {
        Vector3::new(self.color[0] as f64, self.color[1] as f64, self.color[2] as f64) / 255.0
    }
}

/// Cameras plus the sparse point cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneModel {
    pub cameras: Vec<CameraView>,
    pub points: Vec<ScenePoint>,
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.cameras {
            c.validate()?;
            if !ids.insert(c.image_id) {
                return Err(Error::InvalidParameter(format!("duplicate image id {}", c.image_id)));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!("point {i} is not finite")));
            }
            if let Some(bad) = p.track.iter().find(|id| !ids.contains(*id)) {
                return Err(Error::InvalidParameter(format!(
                    "point {i} track references missing image {bad}"
                )));
            }
        }
        Ok(())
    }

    pub fn camera(&self, image_id: u32) -> Option<&CameraView> {
        self.cameras.iter().find(|c| c.image_id == image_id)
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.cameras.iter().map(CameraView::center).collect()
    }

    /// Rigidly rotates the world frame: points map to `R·p`, cameras keep
    /// observing the same points.
    pub fn rotate(&mut self, r: &Matrix3<f64>) {
        for p in &mut self.points {
            p.position = r * p.position;
        }
        for c in &mut self.cameras {
            c.pose = c.pose.rotate_world(r);
        }
    }

    /// Loads every camera's image from `dir/<name>` (in parallel).
    pub fn load_images(&mut self, dir: &Path) -> Result<()> {
        self.cameras.par_iter_mut().try_for_each(|c| {
            let img = Image::load_rgb(&dir.join(&c.name))?;
            if img.width != c.width() || img.height != c.height() {
                return Err(Error::Shape(format!(
                    "image {} is {}×{}, camera expects {}×{}",
                    c.name,
                    img.width,
                    img.height,
                    c.width(),
                    c.height()
                )));
            }
            c.image = Some(img);
            Ok(())
        })
    }

    /// Writes every loaded image as PNG to `dir/<name>`.
    pub fn save_images(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cameras.par_iter().try_for_each(|c| match &c.image {
            Some(img) => img.save_png(&dir.join(&c.name)),
            None => Ok(()),
        })
    }
}

/// A scene directory: `sparse/{cameras,images,points3D}.txt` plus `images/`.
pub fn load_scene(dir: &Path, with_images: bool) -> Result<SceneModel> {
    let mut scene = parse_colmap_text(&dir.join("sparse"))?;
    if with_images {
        scene.load_images(&dir.join("images"))?;
    }
    Ok(scene)
}

pub fn save_scene(scene: &SceneModel, dir: &Path) -> Result<()> {
    write_colmap_text(scene, &dir.join("sparse"))?;
    scene.save_images(&dir.join("images"))
}
