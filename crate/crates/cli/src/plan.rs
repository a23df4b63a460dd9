//! Experiment plans.
//!
//! ```text
//! task = classification
//! methods = baseline, KT-Attn
//! lr = 1e-5, 2e-5, 3e-5
//! lambda = 0.1, 0.2, 0.3
//! seeds = 1, 2, 3, 4, 5
//! train = data/train.jsonl
//! dev = data/dev.jsonl
//! dictionary = data/dictionary.tsv
//! out = runs
//! ```
//!
//! Relative paths are resolved against the plan's directory.

use std::path::{Path, PathBuf};

use knit::encoder::{EncoderConfig, TaskFamily};
use knit::numcore::Precision;
use knit::tokenize::EntityPolicy;
use knit::train::{KtEmbMode, Method, MetricKind, RunConfig, PROTOCOL_LAMBDAS};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::kv::KvFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub task: TaskFamily,
    pub metric: MetricKind,
    pub methods: Vec<Method>,
    pub lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub policy: EntityPolicy,
    pub encoder: EncoderConfig,
    pub protocol: bool,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub kt_emb: KtEmbMode,
    pub min_freq: usize,
    pub workers: usize,
    pub paths: PlanPaths,
}

impl ExperimentPlan {
    pub fn parse(kv: &KvFile) -> Result<Self> {
        let task: TaskFamily = kv.get_or("task", TaskFamily::Classification)?;
        let base = RunConfig::new(Method::Baseline, task);
        let enc = EncoderConfig::new(0);
        let required = |key: &str| kv.path(key).ok_or_else(|| CliError::Plan(format!("missing `{key}`")));
        let plan = ExperimentPlan {
            task,
            metric: kv.get_or("metric", base.metric)?,
            methods: kv.list("methods")?.unwrap_or_else(|| Method::ALL.to_vec()),
            lrs: kv.list("lr")?.unwrap_or_else(|| vec![base.lr]),
            lambdas: kv.list("lambda")?.unwrap_or_else(|| PROTOCOL_LAMBDAS.to_vec()),
            seeds: kv.list("seeds")?.unwrap_or_else(|| vec![1, 2, 3, 4, 5]),
            epochs: kv.get_or("epochs", base.epochs)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            max_len: kv.get_or("max_len", base.max_len)?,
            policy: kv.get_or("policy", base.policy)?,
            encoder: EncoderConfig {
                vocab_size: 0,
                d_model: kv.get_or("d_model", enc.d_model)?,
                layers: kv.get_or("layers", enc.layers)?,
                heads: kv.get_or("heads", enc.heads)?,
                ff: kv.get_or("ff", enc.ff)?,
                max_positions: kv.get_or("max_positions", enc.max_positions)?,
                dropout: kv.get_or("dropout", enc.dropout)?,
                precision: kv.get_or("precision", Precision::F32)?,
            },
            protocol: kv.get_or("protocol", false)?,
            grad_clip: kv.get("grad_clip")?,
            weight_decay: kv.get_or("weight_decay", 0.0)?,
            kt_emb: kv.get_or("kt_emb", KtEmbMode::Shared)?,
            min_freq: kv.get_or("min_freq", 1)?,
            workers: kv.get_or("workers", 1)?,
            paths: PlanPaths {
                train: required("train")?,
                dev: required("dev")?,
                test: kv.path("test"),
                dictionary: kv.path("dictionary"),
                embeddings: kv.path("embeddings"),
                out: required("out")?,
            },
        };
        kv.finish()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan = Self::parse(&KvFile::read(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Lambdas a method is swept over; non-embedding methods ignore λ.
    pub fn lambdas_for(&self, m: Method) -> Vec<f64> {
        if m.is_embedding() {
            self.lambdas.clone()
        } else {
            vec![0.0]
        }
    }

    pub fn run_config(&self, method: Method, lr: f64, lambda: f64, seed: u64) -> RunConfig {
        RunConfig {
            method,
            lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda,
            seed,
            task: self.task,
            metric: self.metric,
            max_len: self.max_len,
            policy: self.policy,
            encoder: self.encoder.clone(),
            protocol: self.protocol,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            kt_emb: self.kt_emb,
        }
    }

    /// Checks everything that can be checked without training: grids,
    /// per-run settings, referenced files and the output directory.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.lrs.is_empty() || self.lambdas.is_empty() {
            return Err(CliError::Plan("methods, lr and lambda grids must be non-empty".into()));
        }
        if self.seeds.len() != 5 {
            return Err(CliError::Plan(format!("medians are taken over 5 seeds, plan has {}", self.seeds.len())));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(CliError::Plan("a method is listed twice".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Plan("workers must be at least 1".into()));
        }
        if self.min_freq == 0 {
            return Err(CliError::Plan("min_freq must be at least 1".into()));
        }
        // The vocabulary size is only known once the training data is read.
        EncoderConfig {
            vocab_size: knit::tokenize::RESERVED.len() + 1,
            ..self.encoder.clone()
        }
        .validate()?;
        for &m in &self.methods {
            for &lr in &self.lrs {
                for l in self.lambdas_for(m) {
                    self.run_config(m, lr, l, self.seeds[0]).validate()?;
                }
            }
        }
        let needs_dict = self.methods.iter().any(|m| matches!(m, Method::Kt | Method::KtAttn | Method::KtEmb));
        let needs_emb = self.methods.contains(&Method::KgEmb);
        if needs_dict && self.paths.dictionary.is_none() {
            return Err(CliError::Plan("KT methods need a `dictionary`".into()));
        }
        if needs_emb && self.paths.embeddings.is_none() {
            return Err(CliError::Plan("KG-Emb needs `embeddings`".into()));
        }
        let p = &self.paths;
        for f in [Some(&p.train), Some(&p.dev), p.test.as_ref(), p.dictionary.as_ref(), p.embeddings.as_ref()]
            .into_iter()
            .flatten()
        {
            if !f.is_file() {
                return Err(CliError::Plan(format!("file not found: {}", f.display())));
            }
        }
        crate::error::mkdir(&p.out)?;
        let probe = p.out.join(".writable");
        crate::error::write(&probe, b"")?;
        std::fs::remove_file(&probe).map_err(|e| CliError::Io(probe.clone(), e))?;
        Ok(())
    }
}
