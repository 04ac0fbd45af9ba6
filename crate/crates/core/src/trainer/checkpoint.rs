use std::path::Path;

use super::adam::Moments;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Archive, Tensor};

/// What produced a checkpoint; gates which regimes may start from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Encoder and VN trained on the Frobenius loss.
    Pretrain,
    /// Encoder trained with cross-entropy on the auxiliary corpus.
    SupervisedAux,
    /// Output of one of the five regimes.
    Classifier,
    /// Untrained initialization (frozen-random control).
    Random,
}

impl CheckpointKind {
    fn code(self) -> f64 {
        match self {
            CheckpointKind::Pretrain => 0.0,
            CheckpointKind::SupervisedAux => 1.0,
            CheckpointKind::Classifier => 2.0,
            CheckpointKind::Random => 3.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        [
            CheckpointKind::Pretrain,
            CheckpointKind::SupervisedAux,
            CheckpointKind::Classifier,
            CheckpointKind::Random,
        ]
        .into_iter()
        .find(|k| k.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::SupervisedAux => "supervised-aux",
            CheckpointKind::Classifier => "classifier",
            CheckpointKind::Random => "random",
        }
    }
}

pub(crate) const RESUME_PREFIX: &str = "resume/";

/// Named-tensor container. Plain `enc/`, `vn/`, `dec/` entries hold the
/// selected (best-validation) weights; `resume/…`, `adam/…` and `meta/…`
/// hold the state needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    archive: Archive,
}

fn put_u64(a: &mut Archive, name: &str, v: u64) {
    a.insert(format!("{name}_hi"), Tensor::scalar((v >> 32) as f64));
    a.insert(
        format!("{name}_lo"),
        Tensor::scalar((v & 0xffff_ffff) as f64),
    );
}

fn get_u64(a: &Archive, name: &str) -> Result<u64> {
    let hi = a.require(&format!("{name}_hi"))?.item();
    let lo = a.require(&format!("{name}_lo"))?.item();
    let ok = |v: f64| v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0;
    if !ok(hi) || !ok(lo) {
        return Err(Error::CorruptTensor(format!("{name} is not a u64")));
    }
    Ok(((hi as u64) << 32) | lo as u64)
}

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ResumeState {
    pub current: Model,
    pub moments: Moments,
    pub epoch: usize,
    pub best_score: Option<(f64, f64)>,
    pub best_epoch: usize,
    pub task_code: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, kind: CheckpointKind) -> Self {
        let mut archive = model.to_archive("");
        archive.insert("meta/kind", Tensor::scalar(kind.code()));
        Self { archive }
    }

    pub(crate) fn with_state(best: &Model, kind: CheckpointKind, state: &ResumeState) -> Self {
        let mut c = Self::from_model(best, kind);
        let a = &mut c.archive;
        state.current.write_archive(RESUME_PREFIX, a);
        let names: Vec<String> = state
            .current
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (i, name) in names.iter().enumerate() {
            a.insert(format!("adam/m/{name}"), state.moments.m[i].clone());
            a.insert(format!("adam/v/{name}"), state.moments.v[i].clone());
        }
        put_u64(a, "meta/adam_t", state.moments.t);
        put_u64(a, "meta/epoch", state.epoch as u64);
        put_u64(a, "meta/best_epoch", state.best_epoch as u64);
        put_u64(a, "meta/task", state.task_code);
        put_u64(a, "meta/config_hash", state.config_hash);
        if let Some((primary, secondary)) = state.best_score {
            a.insert(
                "meta/best_score",
                Tensor::new(vec![2], vec![primary, secondary]).expect("finite score"),
            );
        }
        c
    }

    pub(crate) fn insert_meta(&mut self, name: &str, v: f64) {
        self.archive.insert(name, Tensor::scalar(v));
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn from_archive(archive: Archive) -> Result<Self> {
        let c = Self { archive };
        c.kind()?;
        Ok(c)
    }

    pub fn kind(&self) -> Result<CheckpointKind> {
        let code = self.archive.require("meta/kind")?.item();
        CheckpointKind::from_code(code)
            .ok_or_else(|| Error::CorruptTensor(format!("unknown checkpoint kind {code}")))
    }

    /// The selected weights.
    pub fn model(&self) -> Result<Model> {
        Model::from_archive(&self.archive, "")
    }

    pub fn has_resume_state(&self) -> bool {
        self.archive.contains("meta/epoch_hi")
    }

    pub fn epoch(&self) -> Option<usize> {
        get_u64(&self.archive, "meta/epoch")
            .ok()
            .map(|e| e as usize)
    }

    pub(crate) fn resume_state(&self) -> Result<ResumeState> {
        let a = &self.archive;
        let current = Model::from_archive(a, RESUME_PREFIX)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in current.named_params() {
            let mt = a.require(&format!("adam/m/{name}"))?;
            let vt = a.require(&format!("adam/v/{name}"))?;
            if mt.shape() != t.shape() || vt.shape() != t.shape() {
                return Err(Error::CorruptTensor(format!(
                    "moment shape mismatch for {name}"
                )));
            }
            m.push(mt.clone());
            v.push(vt.clone());
        }
        let best_score = a.get("meta/best_score").map(|t| (t.data()[0], t.data()[1]));
        Ok(ResumeState {
            current,
            moments: Moments {
                m,
                v,
                t: get_u64(a, "meta/adam_t")?,
            },
            epoch: get_u64(a, "meta/epoch")? as usize,
            best_score,
            best_epoch: get_u64(a, "meta/best_epoch")? as usize,
            task_code: get_u64(a, "meta/task")?,
            config_hash: get_u64(a, "meta/config_hash")?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.archive.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_archive(Archive::load(path)?)
    }
}
