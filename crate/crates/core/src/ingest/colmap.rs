//! COLMAP text models (`cameras.txt`, `images.txt`, `points3D.txt`).
//!
//! Only the undistorted pinhole models are supported: `PINHOLE fx fy cx cy`
//! and `SIMPLE_PINHOLE f cx cy`. Image poses are world-to-camera quaternions
//! `QW QX QY QZ` and translations. Numbers are parsed with Rust's
//! locale-independent float parser.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{SceneModel, ScenePoint};
use crate::camera::{CameraView, Intrinsics, Pose};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct Tokens<'a> {
    file: &'a str,
    line: usize,
    toks: Vec<&'a str>,
}

impl<'a> Tokens<'a> {
    fn new(file: &'a str, line: usize, text: &'a str) -> Self {
        Self {
            file,
            line,
            toks: text.split_whitespace().collect(),
        }
    }

    fn need(&self, n: usize, what: &str) -> Result<()> {
        if self.toks.len() < n {
            return Err(Error::parse(
                self.file,
                self.line,
                format!("{what} needs at least {n} fields, found {}", self.toks.len()),
            ));
        }
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        let t = self.toks[i];
        t.parse()
            .map_err(|_| Error::parse(self.file, self.line, format!("bad number `{t}` in field {}", i + 1)))
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, Intrinsics>> {
    const FILE: &str = "cameras.txt";
    let mut cams = BTreeMap::new();
    for (line, l) in content_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let t = Tokens::new(FILE, line, l);
        t.need(4, "camera line")?;
        let id: u32 = t.num(0)?;
        let model = t.toks[1];
        let (width, height): (usize, usize) = (t.num(2)?, t.num(3)?);
        let k = match model {
            "PINHOLE" => {
                t.need(8, "PINHOLE camera")?;
                Intrinsics {
                    fx: t.num(4)?,
                    fy: t.num(5)?,
                    cx: t.num(6)?,
                    cy: t.num(7)?,
                    width,
                    height,
                }
            }
            "SIMPLE_PINHOLE" => {
                t.need(7, "SIMPLE_PINHOLE camera")?;
                let f: f64 = t.num(4)?;
                Intrinsics {
                    fx: f,
                    fy: f,
                    cx: t.num(5)?,
                    cy: t.num(6)?,
                    width,
                    height,
                }
            }
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        k.validate()
            .map_err(|e| Error::parse(FILE, line, e.to_string()))?;
        if cams.insert(id, k).is_some() {
            return Err(Error::parse(FILE, line, format!("duplicate camera id {id}")));
        }
    }
    Ok(cams)
}

fn parse_images(text: &str, cams: &BTreeMap<u32, Intrinsics>) -> Result<Vec<CameraView>> {
    const FILE: &str = "images.txt";
    let mut views = Vec::new();
    let mut ids = BTreeSet::new();
    let mut expect_points = false;
    for (line, l) in content_lines(text) {
        if expect_points {
            // the 2D observation line (possibly empty) is not needed
            expect_points = false;
            continue;
        }
        if l.trim().is_empty() {
            continue;
        }
        let t = Tokens::new(FILE, line, l);
        t.need(10, "image line")?;
        let id: u32 = t.num(0)?;
        let q = [t.num(1)?, t.num(2)?, t.num(3)?, t.num(4)?];
        if q.iter().map(|v: &f64| v * v).sum::<f64>() <= 0.0 {
            return Err(Error::parse(FILE, line, "zero quaternion"));
        }
        let tr = Vector3::new(t.num(5)?, t.num(6)?, t.num(7)?);
        let cam_id: u32 = t.num(8)?;
        let k = *cams
            .get(&cam_id)
            .ok_or_else(|| Error::parse(FILE, line, format!("unknown camera id {cam_id}")))?;
        if !ids.insert(id) {
            return Err(Error::parse(FILE, line, format!("duplicate image id {id}")));
        }
        let mut view = CameraView::new(id, k, Pose::from_quat_translation(q, tr));
        view.name = t.toks[9..].join(" ");
        views.push(view);
        expect_points = true;
    }
    Ok(views)
}

fn parse_points(text: &str, image_ids: &BTreeSet<u32>) -> Result<Vec<ScenePoint>> {
    const FILE: &str = "points3D.txt";
    let mut points = Vec::new();
    for (line, l) in content_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let t = Tokens::new(FILE, line, l);
        t.need(8, "point line")?;
        let _id: u64 = t.num(0)?;
        let position: Vector3<f64> = Vector3::new(t.num(1)?, t.num(2)?, t.num(3)?);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(FILE, line, "non-finite point"));
        }
        let color = [t.num(4)?, t.num(5)?, t.num(6)?];
        let error: f64 = t.num(7)?;
        let rest = t.toks.len() - 8;
        if rest % 2 != 0 {
            return Err(Error::parse(FILE, line, "track must be (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        let mut track = Vec::with_capacity(rest / 2);
        for k in 0..rest / 2 {
            let img: u32 = t.num(8 + 2 * k)?;
            let _idx: u64 = t.num(9 + 2 * k)?;
            if !image_ids.contains(&img) {
                return Err(Error::parse(FILE, line, format!("track references missing image {img}")));
            }
            track.push(img);
        }
        points.push(ScenePoint {
            position,
            color,
            error,
            track,
        });
    }
    Ok(points)
}

/// Reads `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn parse_colmap_text(dir: &Path) -> Result<SceneModel> {
    let cams = parse_cameras(&read(&dir.join("cameras.txt"))?)?;
    let cameras = parse_images(&read(&dir.join("images.txt"))?, &cams)?;
    let ids: BTreeSet<u32> = cameras.iter().map(|c| c.image_id).collect();
    let points = parse_points(&read(&dir.join("points3D.txt"))?, &ids)?;
    Ok(SceneModel { cameras, points })
}

/// Writes the model as COLMAP text, one `PINHOLE` camera per image (camera
/// id = image id). Floats use shortest round-trip formatting.
pub fn write_colmap_text(model: &SceneModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for c in &model.cameras {
        let k = &c.intrinsics;
        let _ = writeln!(
            cams,
            "{} PINHOLE {} {} {:?} {:?} {:?} {:?}",
            c.image_id, k.width, k.height, k.fx, k.fy, k.cx, k.cy
        );
        let q = c.pose.quaternion();
        let t = c.pose.translation;
        let _ = writeln!(
            imgs,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}\n",
            c.image_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, c.image_id, c.name
        );
    }
    let mut pts = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    for (i, p) in model.points.iter().enumerate() {
        let _ = write!(
            pts,
            "{} {:?} {:?} {:?} {} {} {} {:?}",
            i + 1,
            p.position.x,
            p.position.y,
            p.position.z,
            p.color[0],
            p.color[1],
            p.color[2],
            p.error
        );
        for (k, id) in p.track.iter().enumerate() {
            let _ = write!(pts, " {id} {k}");
        }
        pts.push('\n');
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
