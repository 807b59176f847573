//! Run-directory file layout and atomic writes.

use std::fs;
use std::path::{Path, PathBuf};

use c2d_core::data::LabeledDataset;
use c2d_core::model::Model;
use c2d_core::runlog::RunLog;

use crate::error::Result;

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Conventional file names inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn train_dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn test_dataset(&self) -> PathBuf {
        self.root.join("test.csv")
    }

    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.root.join("pretrain.ckpt")
    }

    pub fn warmup_ckpt(&self) -> PathBuf {
        self.root.join("warmup.ckpt")
    }

    pub fn final_ckpt(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn train_b_ckpt(&self) -> PathBuf {
        self.root.join("model_b.ckpt")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn divide(&self) -> PathBuf {
        self.root.join("divide.csv")
    }

    pub fn histogram(&self) -> PathBuf {
        self.root.join("histogram.csv")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }

    pub fn runlog(&self) -> PathBuf {
        self.root.join("runlog.csv")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn save_dataset(&self, path: &Path, ds: &LabeledDataset) -> Result<()> {
        write_atomic(path, ds.to_csv().as_bytes())
    }

    pub fn load_dataset(&self, path: &Path) -> Result<LabeledDataset> {
        let text = fs::read_to_string(path)?;
        Ok(LabeledDataset::from_csv(&text)?)
    }

    pub fn save_model(&self, path: &Path, model: &Model) -> Result<()> {
        write_atomic(path, &model.to_checkpoint_bytes())
    }

    pub fn load_model(&self, path: &Path) -> Result<Model> {
        let bytes = fs::read(path)?;
        Ok(Model::from_checkpoint_bytes(&bytes)?)
    }

    /// Read the run log if present, else start a fresh one.
    pub fn load_runlog(&self) -> Result<RunLog> {
        let path = self.runlog();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            Ok(RunLog::from_csv(&text)?)
        } else {
            Ok(RunLog::new())
        }
    }

    pub fn save_runlog(&self, log: &RunLog) -> Result<()> {
        write_atomic(&self.runlog(), log.to_csv().as_bytes())
    }
}
