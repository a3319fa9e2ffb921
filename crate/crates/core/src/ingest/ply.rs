//! Splat PLY exchange format (binary little-endian).
//!
//! One `vertex` element with properties
//! `x y z nx ny nz f_dc_0 f_dc_1 f_dc_2 f_rest_0 … opacity scale_0 scale_1
//! scale_2 rot_0 rot_1 rot_2 rot_3`: opacity as a logit, scales as logs,
//! rotation as a `(w, x, y, z)` quaternion, normals written as zeros.
//! `f_rest_*` is channel-major (all red coefficients, then green, then
//! blue), so its length `3·((deg+1)² − 1)` determines the SH degree.
//!
//! The writer stores `double` properties so that import∘export is bit-exact,
//! and records the scene extent in a `comment scene_extent` header line. The
//! reader accepts any scalar property types and ignores unknown properties.

use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::gaussian::{bounding_radius, sh_coeff_count, sh_degree_for_count, GaussianField, GaussianSplat};

fn property_names(sh_degree: usize) -> Vec<String> {
    let rest = 3 * (sh_coeff_count(sh_degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Scalar type of the written properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyPrecision {
    /// `double`: import∘export is bit-exact (the pipeline format).
    #[default]
    Double,
    /// `float`: what most external splat viewers expect.
    Float,
}

pub fn to_bytes(field: &GaussianField) -> Vec<u8> {
    to_bytes_with(field, PlyPrecision::Double)
}

pub fn to_bytes_with(field: &GaussianField, precision: PlyPrecision) -> Vec<u8> {
    let names = property_names(field.sh_degree);
    let (type_name, width) = match precision {
        PlyPrecision::Double => ("double", 8),
        PlyPrecision::Float => ("float", 4),
    };
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment scene_extent {:?}\nelement vertex {}\n",
        field.scene_extent,
        field.len()
    );
    for n in &names {
        header.push_str(&format!("property {type_name} {n}\n"));
    }
    header.push_str("end_header\n");
    let mut bytes = header.into_bytes();
    let k = field.sh_count();
    bytes.reserve(field.len() * names.len() * width);
    let mut push = |v: f64| match precision {
        PlyPrecision::Double => bytes.extend_from_slice(&v.to_le_bytes()),
        PlyPrecision::Float => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
    };
    for s in &field.splats {
        s.center.iter().for_each(|&v| push(v));
        (0..3).for_each(|_| push(0.0));
        (0..3).for_each(|c| push(s.sh[0][c]));
        for c in 0..3 {
            for j in 1..k {
                push(s.sh[j][c]);
            }
        }
        push(s.opacity_logit);
        s.log_scale.iter().for_each(|&v| push(v));
        s.rotation.iter().for_each(|&v| push(v));
    }
    bytes
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

pub fn from_bytes(bytes: &[u8], file: &str) -> Result<GaussianField> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format(format!("{file}: unterminated PLY header")))?;
        let s = String::from_utf8_lossy(&bytes[*pos..*pos + end]).trim_end_matches('\r').to_string();
        *pos += end + 1;
        line_no += 1;
        Ok((line_no, s))
    };
    let (_, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::Format(format!("{file}: not a PLY file")));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut extent = None;
    loop {
        let (ln, line) = next_line(&mut pos)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("{file}: unsupported PLY format `{fmt}`")));
                }
            }
            ["comment", "scene_extent", v] => {
                extent = Some(v.parse::<f64>().map_err(|_| Error::parse(file, ln, "bad scene_extent"))?);
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::parse(file, ln, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(Error::Format(format!("{file}: list properties are not supported")));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::parse(file, ln, format!("unknown type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(file, ln, "property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(Error::parse(file, ln, format!("unexpected header line `{line}`"))),
        }
    }

    // skip fixed-size elements preceding the vertices
    let mut vertex = None;
    for el in &elements {
        let row: usize = el.props.iter().map(|p| p.1.size()).sum();
        if el.name == "vertex" {
            vertex = Some((el, row));
            break;
        }
        pos += el.count * row;
    }
    let (el, row) = vertex.ok_or_else(|| Error::Format(format!("{file}: no vertex element")))?;

    let find = |n: &str| el.props.iter().position(|p| p.0 == n);
    let rest_count = (0..).take_while(|i| find(&format!("f_rest_{i}")).is_some()).count();
    let sh_count = match rest_count % 3 {
        0 => sh_degree_for_count(rest_count / 3 + 1),
        _ => None,
    };
    let sh_degree = sh_count.ok_or_else(|| {
        Error::Format(format!("{file}: {rest_count} f_rest properties do not match any SH degree"))
    })?;
    let names = property_names(sh_degree);
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !n.starts_with('n') && find(n).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingProperties(missing));
    }
    let offsets: Vec<(usize, Scalar)> = el
        .props
        .iter()
        .scan(0, |off, p| {
            let o = *off;
            *off += p.1.size();
            Some((o, p.1))
        })
        .collect();
    let column = |n: &str| offsets[find(n).expect("checked above")];

    let need = el.count * row;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "{file}: vertex data truncated ({} of {need} bytes)",
            bytes.len().saturating_sub(pos)
        )));
    }
    let k = sh_coeff_count(sh_degree);
    let cols = |prefix: &str, n: usize| (0..n).map(|i| column(&format!("{prefix}{i}"))).collect::<Vec<_>>();
    let pos_cols = [column("x"), column("y"), column("z")];
    let dc_cols = cols("f_dc_", 3);
    let rest_cols = cols("f_rest_", 3 * (k - 1));
    let scale_cols = cols("scale_", 3);
    let rot_cols = cols("rot_", 4);
    let opacity_col = column("opacity");

    let mut splats = Vec::with_capacity(el.count);
    for i in 0..el.count {
        let r = &bytes[pos + i * row..pos + (i + 1) * row];
        let get = |(o, t): (usize, Scalar)| t.read(&r[o..]);
        let mut sh = vec![Vector3::zeros(); k];
        for c in 0..3 {
            sh[0][c] = get(dc_cols[c]);
            for j in 1..k {
                sh[j][c] = get(rest_cols[c * (k - 1) + j - 1]);
            }
        }
        splats.push(GaussianSplat {
            center: Vector3::new(get(pos_cols[0]), get(pos_cols[1]), get(pos_cols[2])),
            log_scale: Vector3::new(get(scale_cols[0]), get(scale_cols[1]), get(scale_cols[2])),
            rotation: Vector4::new(get(rot_cols[0]), get(rot_cols[1]), get(rot_cols[2]), get(rot_cols[3])),
            opacity_logit: get(opacity_col),
            sh,
        });
    }
    let scene_extent = extent.unwrap_or_else(|| {
        let centers: Vec<Vector3<f64>> = splats.iter().map(|s| s.center).collect();
        bounding_radius(&centers)
    });
    GaussianField::new(splats, sh_degree, scene_extent)
}

pub fn export_field(field: &GaussianField, path: &Path) -> Result<()> {
    export_field_with(field, path, PlyPrecision::Double)
}

pub fn export_field_with(field: &GaussianField, path: &Path, precision: PlyPrecision) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes_with(field, precision)).map_err(|e| Error::io(path, e))
}

pub fn import_field(path: &Path) -> Result<GaussianField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
