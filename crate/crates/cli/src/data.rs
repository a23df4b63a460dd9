//! Loading annotation files and knowledge sources named by a plan.

use std::path::{Path, PathBuf};

use knit::encoder::TaskFamily;
use knit::kstore::KnowledgeStore;
use knit::tokenize::{load_annotations, EntityPolicy, Example, Vocabulary};
use knit::train::MetricKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::plan::{ExperimentPlan, PlanPaths};

/// Written next to every saved model so `analyze` can rebuild its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub task: String,
    pub metric: String,
    pub policy: String,
    pub max_len: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub vocab: PathBuf,
    pub paths: PlanPaths,
}

impl RunInfo {
    pub fn sidecar(ckpt: &Path) -> PathBuf {
        ckpt.with_extension("run.json")
    }

    pub fn read(ckpt: &Path) -> Result<Self> {
        let p = Self::sidecar(ckpt);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::Io(p.clone(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::file(&p, e.line(), e.to_string()))
    }

    pub fn write(&self, ckpt: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain data serializes");
        crate::error::write(&Self::sidecar(ckpt), text + "\n")
    }

    pub fn task(&self) -> Result<TaskFamily> {
        self.task.parse().map_err(CliError::Mismatch)
    }

    pub fn metric(&self) -> Result<MetricKind> {
        self.metric.parse().map_err(CliError::Mismatch)
    }

    pub fn policy(&self) -> Result<EntityPolicy> {
        self.policy.parse().map_err(CliError::Mismatch)
    }

    pub fn from_plan(plan: &ExperimentPlan, lr: f64, lambda: f64, seed: u64, vocab: PathBuf) -> Self {
        RunInfo {
            task: plan.task.to_string(),
            metric: plan.metric.to_string(),
            policy: plan.policy.to_string(),
            max_len: plan.max_len,
            lr,
            lambda,
            seed,
            vocab,
            paths: plan.paths.clone(),
        }
    }
}

pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Option<Vec<Example>>,
    pub store: KnowledgeStore,
}

impl Corpus {
    pub fn load(paths: &PlanPaths) -> Result<Self> {
        let mut store = KnowledgeStore::new();
        if let Some(d) = &paths.dictionary {
            store.read_dictionary(d)?;
        }
        if let Some(e) = &paths.embeddings {
            store.read_embeddings(e)?;
        }
        Ok(Corpus {
            train: load_annotations(&paths.train)?,
            dev: load_annotations(&paths.dev)?,
            test: paths.test.as_deref().map(load_annotations).transpose()?,
            store,
        })
    }

    /// Probe-train and probe-test examples: dev and test, or the two halves
    /// of dev when there is no test split.
    pub fn analysis_split(&self) -> (&[Example], &[Example]) {
        match &self.test {
            Some(t) => (&self.dev, t),
            None => self.dev.split_at(self.dev.len() / 2),
        }
    }
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::load(path)?)
}
