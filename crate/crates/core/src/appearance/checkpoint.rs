//! Appearance checkpoints: a text header naming every tensor and its shape,
//! terminated by a `data` line, followed by the tensors as flat
//! little-endian `f64` values in header order.
//!
//! ```text
//! cellsplat-appearance 1
//! embed_dim 64
//! channels 32
//! depth 5
//! grid 5
//! ids 0 1 2
//! tensor embeddings 3 64
//! tensor conv0.weight 32 67 3 3
//! ...
//! data
//! ```

use std::fs;
use std::path::Path;

use super::conv::Conv2d;
use super::kan::{basis_count, KanConv2d};
use super::{AppearanceConfig, AppearanceModel};
use crate::error::{Error, Result};

const MAGIC: &str = "cellsplat-appearance 1";

fn tensors(model: &AppearanceModel) -> Vec<(String, Vec<usize>, &[f64])> {
    let cfg = &model.config;
    let (e, c) = (cfg.embed_dim, cfg.channels);
    let mut v: Vec<(String, Vec<usize>, &[f64])> = vec![
        ("embeddings".into(), vec![model.image_ids.len(), e], &model.embeddings),
        ("conv0.weight".into(), vec![c, 3 + e, 3, 3], &model.conv0.weight),
        ("conv0.bias".into(), vec![c], &model.conv0.bias),
    ];
    for (i, b) in model.blocks.iter().enumerate() {
        v.push((format!("block{i}.weight"), vec![c, c, 3, 3], &b.weight));
        v.push((format!("block{i}.bias"), vec![c], &b.bias));
    }
    v.push(("kan.coeffs".into(), vec![3, c, 3, 3, basis_count(cfg.grid)], &model.kan.coeffs));
    v.push(("kan.base".into(), vec![3, c, 3, 3], &model.kan.base));
    v
}

pub fn to_bytes(model: &AppearanceModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut header = format!(
        "{MAGIC}\nembed_dim {}\nchannels {}\ndepth {}\ngrid {}\nids",
        cfg.embed_dim, cfg.channels, cfg.depth, cfg.grid
    );
    for id in &model.image_ids {
        header.push_str(&format!(" {id}"));
    }
    header.push('\n');
    let list = tensors(model);
    for (name, shape, _) in &list {
        header.push_str("tensor ");
        header.push_str(name);
        for s in shape {
            header.push_str(&format!(" {s}"));
        }
        header.push('\n');
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for (_, _, data) in &list {
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn from_bytes(bytes: &[u8], file: &str) -> Result<AppearanceModel> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(file, lines.len() + 1, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::parse(file, lines.len() + 1, "header is not UTF-8"))?
            .to_string();
        pos += end + 1;
        if line == "data" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::parse(file, 1, "not an appearance checkpoint"));
    }
    let field = |idx: usize, key: &str| -> Result<Vec<String>> {
        let line = lines
            .get(idx)
            .ok_or_else(|| Error::parse(file, idx + 1, format!("missing `{key}`")))?;
        let mut toks = line.split_whitespace().map(String::from);
        if toks.next().as_deref() != Some(key) {
            return Err(Error::parse(file, idx + 1, format!("expected `{key}`")));
        }
        Ok(toks.collect())
    };
    let number = |idx: usize, key: &str| -> Result<usize> {
        let v = field(idx, key)?;
        match v.as_slice() {
            [n] => n.parse().map_err(|_| Error::parse(file, idx + 1, format!("bad `{key}` value"))),
            _ => Err(Error::parse(file, idx + 1, format!("`{key}` takes one value"))),
        }
    };
    let config = AppearanceConfig {
        embed_dim: number(1, "embed_dim")?,
        channels: number(2, "channels")?,
        depth: number(3, "depth")?,
        grid: number(4, "grid")?,
    };
    let ids = field(5, "ids")?
        .iter()
        .map(|t| t.parse::<u32>().map_err(|_| Error::parse(file, 6, format!("bad image id `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = AppearanceModel::zeros(config, &ids)?;
    let expected: Vec<(String, Vec<usize>)> =
        tensors(&model).into_iter().map(|(n, s, _)| (n, s)).collect();
    if lines.len() != 6 + expected.len() {
        return Err(Error::Format(format!(
            "{file}: expected {} tensors, header lists {}",
            expected.len(),
            lines.len().saturating_sub(6)
        )));
    }
    for (k, (name, shape)) in expected.iter().enumerate() {
        let toks = field(6 + k, "tensor")?;
        let ok = toks.first() == Some(name)
            && toks[1..].iter().map(|t| t.parse::<usize>().ok()).collect::<Option<Vec<_>>>().as_ref() == Some(shape);
        if !ok {
            return Err(Error::Format(format!(
                "{file}: tensor {k} should be `{name}` with shape {shape:?}, found `{}`",
                toks.join(" ")
            )));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[pos..];
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "{file}: expected {} data bytes, found {}",
            total * 8,
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = values.next().expect("sized payload"));
    fill(&mut model.embeddings);
    fill_conv(&mut model.conv0, &mut fill);
    for b in &mut model.blocks {
        fill_conv(b, &mut fill);
    }
    fill_kan(&mut model.kan, &mut fill);
    Ok(model)
}

fn fill_conv(c: &mut Conv2d, fill: &mut impl FnMut(&mut [f64])) {
    fill(&mut c.weight);
    fill(&mut c.bias);
}

fn fill_kan(k: &mut KanConv2d, fill: &mut impl FnMut(&mut [f64])) {
    fill(&mut k.coeffs);
    fill(&mut k.base);
}

pub fn save(model: &AppearanceModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AppearanceModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
