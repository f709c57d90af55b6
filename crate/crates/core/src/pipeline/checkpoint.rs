//! Checkpoint directories: a JSON index plus one tensor container per
//! parameter and per optimizer moment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::labels_io::read_json;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::tensor::io::{read_tensor, write_tensor, RawTensor};
use crate::tensor::{Elem, Tensor};

pub const CHECKPOINT_FORMAT: &str = "uwav-checkpoint/1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    /// `"pseudolabeler"` or `"han"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub class_names: Vec<String>,
    /// Number of completed epochs.
    pub epochs_done: usize,
    pub optimizer_step: u64,
    /// Parameter name to tensor file, in model order.
    pub params: Vec<(String, String)>,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub index: CheckpointIndex,
    pub params: Vec<(String, RawTensor)>,
    pub moments: BTreeMap<String, (RawTensor, RawTensor)>,
}

/// What a training run writes after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// How many epoch directories to keep (0 keeps all).
    pub keep: usize,
}

pub fn epoch_dir(root: &Path, epochs_done: usize) -> PathBuf {
    root.join(format!("epoch_{epochs_done:03}"))
}

fn to_raw<E: Elem>(shape: &[usize], v: &[E]) -> Result<RawTensor> {
    RawTensor::new(shape.to_vec(), v.iter().map(|x| x.as_f32()).collect())
}

pub struct CheckpointContent<'a, E: Elem, C: Serialize> {
    pub kind: &'a str,
    pub config: &'a C,
    pub class_names: &'a [String],
    pub epochs_done: usize,
    pub optimizer: Option<&'a AdamW<E>>,
}

pub fn save_checkpoint<E: Elem, C: Serialize>(
    dir: &Path,
    model: &impl Module<E>,
    content: &CheckpointContent<'_, E, C>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = model.named_params();
    let mut params = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let file = format!("param.{name}.uwt");
        write_tensor(&dir.join(&file), &RawTensor::from_tensor(t))?;
        params.push((name.clone(), file));
    }
    let mut moments = Vec::new();
    let mut step = 0;
    if let Some(opt) = content.optimizer {
        step = opt.step;
        let shapes: BTreeMap<&str, &Tensor<E>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, m) in &opt.moments {
            let shape = shapes
                .get(name.as_str())
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![m.first.len()]);
            let first = format!("adam_m.{name}.uwt");
            let second = format!("adam_v.{name}.uwt");
            write_tensor(&dir.join(&first), &to_raw(&shape, &m.first)?)?;
            write_tensor(&dir.join(&second), &to_raw(&shape, &m.second)?)?;
            moments.push(MomentEntry {
                name: name.clone(),
                first,
                second,
            });
        }
    }
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: content.kind.to_string(),
        config: serde_json::to_value(content.config).map_err(|e| Error::json(dir, e))?,
        class_names: content.class_names.to_vec(),
        epochs_done: content.epochs_done,
        optimizer_step: step,
        params,
        moments,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes `epoch_NNN` under the policy root and prunes old epochs.
pub fn save_epoch<E: Elem, C: Serialize>(
    policy: &CheckpointPolicy,
    model: &impl Module<E>,
    content: &CheckpointContent<'_, E, C>,
) -> Result<PathBuf> {
    let dir = epoch_dir(&policy.dir, content.epochs_done);
    save_checkpoint(&dir, model, content)?;
    if policy.keep > 0 && content.epochs_done > policy.keep {
        let stale = epoch_dir(&policy.dir, content.epochs_done - policy.keep);
        if stale.exists() {
            fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }
    Ok(dir)
}

/// Latest `epoch_NNN` directory under `root`, if any.
pub fn latest_epoch_dir(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("epoch_")).and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if entry.path().join(INDEX_FILE).exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let index: CheckpointIndex = read_json(&dir.join(INDEX_FILE))?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {:?}", index.format)));
    }
    let mut params = Vec::with_capacity(index.params.len());
    for (name, file) in &index.params {
        params.push((name.clone(), read_tensor(&dir.join(file))?));
    }
    let mut moments = BTreeMap::new();
    for m in &index.moments {
        moments.insert(
            m.name.clone(),
            (read_tensor(&dir.join(&m.first))?, read_tensor(&dir.join(&m.second))?),
        );
    }
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        index,
        params,
        moments,
    })
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.index.kind != kind {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model, expected {kind}",
                self.dir.display(),
                self.index.kind
            )));
        }
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.index.config.clone()).map_err(|e| Error::json(&self.dir, e))
    }

    /// Overwrites the model parameters with the stored values.
    pub fn restore_params<E: Elem>(&self, model: &impl Module<E>) -> Result<()> {
        let stored: BTreeMap<&str, &RawTensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let named = model.named_params();
        if named.len() != stored.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                stored.len(),
                named.len()
            )));
        }
        for (name, p) in named {
            let raw = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if raw.shape != p.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    raw.shape,
                    p.shape()
                )));
            }
            p.data_mut()
                .iter_mut()
                .zip(&raw.data)
                .for_each(|(d, &v)| *d = E::from_f32(v));
        }
        Ok(())
    }

    pub fn optimizer<E: Elem>(&self, config: AdamWConfig) -> AdamW<E> {
        let conv = |r: &RawTensor| r.data.iter().map(|&v| E::from_f32(v)).collect();
        AdamW {
            config,
            step: self.index.optimizer_step,
            moments: self
                .moments
                .iter()
                .map(|(n, (m, v))| {
                    (
                        n.clone(),
                        Moments {
                            first: conv(m),
                            second: conv(v),
                        },
                    )
                })
                .collect(),
        }
    }
}
