//! Paths under a run root: `build/`, `attacks/<strategy>/<loss>/<target>/<seed>/`
//! and `reports/`.

use std::path::{Path, PathBuf};

use vlminv_core::{LossKind, Strategy};
use walkdir::WalkDir;

pub const RUN_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const IMAGE_FILE: &str = "reconstruction.png";
pub const ANCHOR_FILE: &str = "anchor.json";

/// Identifies one grid cell run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub target: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunRoot {
    root: PathBuf,
}

impl RunRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn build_dir(&self) -> PathBuf {
        self.root.join("build")
    }

    pub fn anchor_path(&self) -> PathBuf {
        self.build_dir().join(ANCHOR_FILE)
    }

    pub fn attacks_dir(&self) -> PathBuf {
        self.root.join("attacks")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn cell_dir(&self, key: &CellKey) -> PathBuf {
        self.attacks_dir()
            .join(key.strategy.as_str())
            .join(key.loss.as_str())
            .join(key.target.to_string())
            .join(key.seed.to_string())
    }

    /// Every cell directory holding a completed run, in path order.
    pub fn completed_cells(&self) -> walkdir::Result<Vec<PathBuf>> {
        let attacks = self.attacks_dir();
        if !attacks.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in WalkDir::new(attacks).min_depth(4).max_depth(4).sort_by_file_name() {
            let entry = entry?;
            if entry.file_type().is_dir() && entry.path().join(RUN_FILE).exists() {
                out.push(entry.into_path());
            }
        }
        Ok(out)
    }
}
