//! Train/test split of the image ids.
//!
//! File format: one `train <id>` or `test <id>` line per image; `#` starts a
//! comment.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Every `n`-th image (in id order, starting with the first) is a test image.
    EveryNth(usize),
    /// A seeded random `train_fraction` of the images is used for training.
    Random { train_fraction: f64, seed: u64 },
}

impl Default for SplitMode {
    fn default() -> Self {
        Self::EveryNth(8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl Split {
    pub fn new(ids: &[u32], mode: SplitMode) -> Result<Self> {
        let mut sorted: Vec<u32> = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut split = Split::default();
        match mode {
            SplitMode::EveryNth(n) => {
                if n < 2 {
                    return Err(Error::InvalidParameter(format!("split interval must be ≥ 2, got {n}")));
                }
                for (i, id) in sorted.into_iter().enumerate() {
                    if i % n == 0 {
                        split.test.insert(id);
                    } else {
                        split.train.insert(id);
                    }
                }
            }
            SplitMode::Random { train_fraction, seed } => {
                if !(train_fraction > 0.0 && train_fraction <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "train fraction must lie in (0, 1], got {train_fraction}"
                    )));
                }
                let n_train = ((sorted.len() as f64 * train_fraction).round() as usize).clamp(1.min(sorted.len()), sorted.len());
                sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                split.train.extend(&sorted[..n_train]);
                split.test.extend(&sorted[n_train..]);
            }
        }
        Ok(split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# cellsplat split\n");
        for id in &self.train {
            s += &format!("train {id}\n");
        }
        for id in &self.test {
            s += &format!("test {id}\n");
        }
        s
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut split = Split::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (kind, id) = (it.next(), it.next().and_then(|t| t.parse::<u32>().ok()));
            let (Some(kind), Some(id), None) = (kind, id, it.next()) else {
                return Err(Error::parse(file, i + 1, "expected `train <id>` or `test <id>`"));
            };
            let inserted = match kind {
                "train" => !split.test.contains(&id) && split.train.insert(id),
                "test" => !split.train.contains(&id) && split.test.insert(id),
                _ => return Err(Error::parse(file, i + 1, format!("unknown split kind `{kind}`"))),
            };
            if !inserted {
                return Err(Error::parse(file, i + 1, format!("image {id} listed twice")));
            }
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
