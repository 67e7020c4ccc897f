//! Artifact names inside the output directory and provenance-checked I/O.

use std::fs;
use std::path::{Path, PathBuf};

use fpo_core::model::{read_checkpoint, write_checkpoint, ModelCheckpoint};
use fpo_core::pipeline::ExperimentConfig;
use fpo_core::records::{read_document, read_jsonl, with_provenance, write_document, write_jsonl};
use fpo_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TASK: &str = "task.json";
pub const SFT_DATA: &str = "sft_data.jsonl";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_LOSS: &str = "sft_loss.csv";
pub const SAMPLES: &str = "samples.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const PAIR_YIELD: &str = "pair_yield.json";
pub const COMPARISON: &str = "comparison.csv";
pub const SWEEP: &str = "sweep.json";
pub const SWEEP_RUNS: &str = "sweep_runs.csv";
pub const SWEEP_CELLS: &str = "sweep_cells.csv";
pub const GRADCHECK: &str = "gradcheck.json";

pub fn policy_ckpt(model: &str) -> String {
    format!("policy_{model}.ckpt")
}

pub fn train_loss(model: &str) -> String {
    format!("train_{model}_loss.csv")
}

pub fn eval_report(model: &str) -> String {
    format!("eval_{model}.json")
}

pub fn eval_records(model: &str) -> String {
    format!("eval_{model}_records.csv")
}

/// The output directory bound to one config hash.
pub struct Workspace {
    pub dir: PathBuf,
    pub hash: String,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Self {
            dir: cfg.out_dir.clone(),
            hash: cfg.hash(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    /// CSV with a leading provenance comment.
    pub fn write_csv(&self, name: &str, csv: &str) -> Result<PathBuf> {
        self.write_text(name, &with_provenance(&self.hash, csv))
    }

    pub fn write_records<T: Serialize>(&self, name: &str, schema: &str, items: &[T]) -> Result<PathBuf> {
        let p = self.path(name);
        write_jsonl(&p, schema, &self.hash, items)?;
        Ok(p)
    }

    pub fn read_records<T: DeserializeOwned>(&self, name: &str, schema: &str) -> Result<Vec<T>> {
        read_jsonl(&self.path(name), schema, Some(&self.hash)).map(|(_, v)| v)
    }

    pub fn write_doc<T: Serialize>(&self, name: &str, schema: &str, body: &T) -> Result<PathBuf> {
        let p = self.path(name);
        write_document(&p, schema, &self.hash, body)?;
        Ok(p)
    }

    pub fn read_doc<T: DeserializeOwned>(&self, name: &str, schema: &str) -> Result<T> {
        read_document(&self.path(name), schema, Some(&self.hash))
    }

    pub fn write_ckpt(&self, name: &str, ckpt: &ModelCheckpoint) -> Result<PathBuf> {
        let p = self.path(name);
        write_checkpoint(&p, ckpt, &self.hash)?;
        Ok(p)
    }

    pub fn read_ckpt(&self, name: &str) -> Result<ModelCheckpoint> {
        let p = self.path(name);
        let (ckpt, hash) = read_checkpoint(&p)?;
        check_hash(&p, &hash, &self.hash)?;
        Ok(ckpt)
    }
}

fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Provenance {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        })
    }
}
