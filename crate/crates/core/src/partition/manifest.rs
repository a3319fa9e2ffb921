//! On-disk partition output: `<out>/layout.json` plus one JSON manifest per
//! cell at `<out>/cells/cell_<i>/manifest`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cell, CellLayout, PartitionConfig, Rect};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "cellsplat-cell-manifest 1";
pub const LAYOUT_FORMAT: &str = "cellsplat-layout 1";

/// Everything the trainer needs for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub format: String,
    /// Scene directory (as produced by `ingest` / `synth`).
    pub scene: PathBuf,
    pub grid: (usize, usize),
    pub bbox: Rect,
    pub config: PartitionConfig,
    pub cell: Cell,
}

/// Global summary of a partition run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSummary {
    pub format: String,
    pub scene: PathBuf,
    pub config: PartitionConfig,
    pub bbox: Rect,
    pub cells: usize,
    /// Train/test split file used for camera selection, if any.
    pub split: Option<PathBuf>,
}

pub fn cell_dir(out: &Path, id: usize) -> PathBuf {
    out.join("cells").join(format!("cell_{id}"))
}

pub fn manifest_path(out: &Path, id: usize) -> PathBuf {
    cell_dir(out, id).join("manifest")
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}

impl CellManifest {
    pub fn new(layout: &CellLayout, config: &PartitionConfig, scene: &Path, id: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            scene: scene.to_path_buf(),
            grid: (layout.nx, layout.ny),
            bbox: layout.bbox,
            config: *config,
            cell: layout.cells[id].clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("{}: unknown manifest format `{}`", path.display(), m.format)));
        }
        Ok(m)
    }
}

/// Writes `layout.json` and every cell manifest under `out`.
pub fn write_partition(
    layout: &CellLayout,
    config: &PartitionConfig,
    scene: &Path,
    split: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let summary = LayoutSummary {
        format: LAYOUT_FORMAT.into(),
        scene: scene.to_path_buf(),
        config: *config,
        bbox: layout.bbox,
        cells: layout.len(),
        split: split.map(Path::to_path_buf),
    };
    write_json(&summary, &out.join("layout.json"))?;
    for id in 0..layout.len() {
        CellManifest::new(layout, config, scene, id).save(&manifest_path(out, id))?;
    }
    Ok(())
}

pub fn read_summary(out: &Path) -> Result<LayoutSummary> {
    let path = out.join("layout.json");
    let s: LayoutSummary = read_json(&path)?;
    if s.format != LAYOUT_FORMAT {
        return Err(Error::Format(format!("{}: unknown layout format `{}`", path.display(), s.format)));
    }
    Ok(s)
}

/// Reads all cell manifests of a partition directory, ordered by cell id.
pub fn read_manifests(out: &Path) -> Result<Vec<CellManifest>> {
    let summary = read_summary(out)?;
    (0..summary.cells).map(|i| CellManifest::load(&manifest_path(out, i))).collect()
}

/// Rebuilds the layout (without per-cell visibility reports' consumers
/// needing anything else) from manifests.
pub fn layout_from_manifests(manifests: &[CellManifest]) -> Result<CellLayout> {
    let first = manifests
        .first()
        .ok_or_else(|| Error::Layout("no cell manifests".into()))?;
    let (nx, ny) = first.grid;
    if manifests.len() != nx * ny {
        return Err(Error::Layout(format!("{} manifests for a {nx}×{ny} grid", manifests.len())));
    }
    let mut cells: Vec<Cell> = manifests.iter().map(|m| m.cell.clone()).collect();
    cells.sort_by_key(|c| c.id);
    if cells.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::Layout("cell ids are not 0..n".into()));
    }
    Ok(CellLayout {
        nx,
        ny,
        bbox: first.bbox,
        beta: first.config.beta,
        cells,
    })
}
