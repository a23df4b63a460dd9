//! Fine-tuning harness: per-method training runs, evaluation, seed sweeps.

mod data;
pub mod metrics;
mod optim;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    build_vocabulary, class_balance, prepare, prepare_all, Diagnostics, LabelSpace, Method, Prepared,
    PrepareOptions, Target,
};
pub use metrics::{MetricKind, Score};
pub use optim::{Adam, GradAccumulator, Schedule, WARMUP_FRACTION};

use crate::encoder::{AnnealSchedule, Dropout, EncoderConfig, Injection, LayerActivations, Network, TaskFamily, TaskKind};
use crate::error::{invalid, Error, Result};
use crate::kstore::KnowledgeStore;
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::stream;
use crate::tokenize::{EntityPolicy, Example, Vocabulary};

pub const PROTOCOL_LRS: [f64; 3] = [1e-5, 2e-5, 3e-5];
pub const PROTOCOL_LAMBDAS: [f64; 3] = [0.1, 0.2, 0.3];

/// How KT-Emb obtains entity vectors from descriptions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KtEmbMode {
    /// Encoded every step by the shared encoder, gradients flowing back.
    #[default]
    Shared,
    /// Encoded every step, treated as constants.
    StopGrad,
    /// Encoded once with the initial weights and reused.
    Cache,
}

impl std::str::FromStr for KtEmbMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "shared" => Ok(KtEmbMode::Shared),
            "stop-grad" => Ok(KtEmbMode::StopGrad),
            "cache" => Ok(KtEmbMode::Cache),
            other => Err(format!("unknown KT-Emb mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub task: TaskFamily,
    pub metric: MetricKind,
    pub max_len: usize,
    pub policy: EntityPolicy,
    /// Vocabulary size is filled in from the run's vocabulary.
    pub encoder: EncoderConfig,
    /// Restricts learning rate and λ to the published grids.
    pub protocol: bool,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub kt_emb: KtEmbMode,
}

impl RunConfig {
    pub fn new(method: Method, task: TaskFamily) -> Self {
        RunConfig {
            method,
            lr: 2e-5,
            batch_size: 32,
            epochs: if task == TaskFamily::SequenceLabeling { 3 } else { 10 },
            lambda: 0.2,
            seed: 0,
            task,
            metric: match task {
                TaskFamily::Classification => MetricKind::Accuracy,
                TaskFamily::Regression => MetricKind::Pearson,
                TaskFamily::SequenceLabeling => MetricKind::SpanF1,
            },
            max_len: 256,
            policy: EntityPolicy::ContentPos,
            encoder: EncoderConfig::new(0),
            protocol: false,
            grad_clip: None,
            weight_decay: 0.0,
            kt_emb: KtEmbMode::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid!("batch size and epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid!("λ {} outside [0, 1]", self.lambda));
        }
        if self.protocol {
            if !PROTOCOL_LRS.contains(&self.lr) {
                return Err(invalid!("protocol mode: learning rate {} not in {PROTOCOL_LRS:?}", self.lr));
            }
            if self.method.is_embedding() && !PROTOCOL_LAMBDAS.contains(&self.lambda) {
                return Err(invalid!("protocol mode: λ {} not in {PROTOCOL_LAMBDAS:?}", self.lambda));
            }
        }
        let metric_ok = matches!(
            (self.task, self.metric),
            (TaskFamily::Classification, MetricKind::Accuracy | MetricKind::Matthews)
                | (TaskFamily::Regression, MetricKind::Pearson)
                | (TaskFamily::SequenceLabeling, MetricKind::SpanF1 | MetricKind::Accuracy)
        );
        if !metric_ok {
            return Err(invalid!("metric {} does not apply to {:?}", self.metric, self.task));
        }
        Ok(())
    }
}

/// A trained (or freshly initialised) model with everything needed to run
/// it on prepared inputs.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub net: Network,
    pub params: ParamStore<S>,
    pub method: Method,
    pub labels: LabelSpace,
    /// Injection weight used outside training.
    pub alpha: f64,
    pub kt_emb: KtEmbMode,
    /// Cached KT-Emb vectors keyed by entity id.
    pub cache: HashMap<String, Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Value(f64),
    Tags(Vec<usize>),
}

impl<S: Scalar> Model<S> {
    pub fn init(
        cfg: &EncoderConfig,
        method: Method,
        labels: LabelSpace,
        store: &KnowledgeStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let proj_in = match method {
            Method::KgEmb => Some(
                store
                    .dim()
                    .ok_or_else(|| invalid!("KG-Emb needs an embedding file"))?,
            ),
            Method::KtEmb => Some(cfg.d_model),
            _ => None,
        };
        let (net, params) = Network::init(cfg, labels.kind, proj_in, rng)?;
        Ok(Model {
            net,
            params,
            method,
            labels,
            alpha: 0.0,
            kt_emb: KtEmbMode::Shared,
            cache: HashMap::new(),
        })
    }

    /// The same model at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
            method: self.method,
            labels: self.labels.clone(),
            alpha: self.alpha,
            kt_emb: self.kt_emb,
            cache: self.cache.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn proj_in(&self) -> Option<usize> {
        self.net.proj.as_ref().map(|p| p.d_in)
    }

    fn kt_vector(&self, g: &mut Graph<'_, S>, id: &str, desc: &[usize]) -> Result<Var> {
        if let Some(t) = self.cache.get(id) {
            return Ok(g.input(t.clone()));
        }
        if self.kt_emb == KtEmbMode::Shared {
            return self.net.encoder.derive_kt_emb(g, desc);
        }
        let mut f = Graph::frozen(g.store());
        let h = self.net.encoder.derive_kt_emb(&mut f, desc)?;
        let t = f.value(h).clone();
        Ok(g.input(t))
    }

    /// Embedding-layer injections for `p` at weight `alpha`.
    pub fn injections(&self, g: &mut Graph<'_, S>, p: &Prepared, alpha: f64) -> Result<Vec<Injection>> {
        let Some(proj) = &self.net.proj else {
            return Ok(Vec::new());
        };
        if p.anchors.is_empty() {
            return Ok(Vec::new());
        }
        match self.method {
            Method::KgEmb => {
                let d = proj.d_in;
                let mut data = Vec::with_capacity(p.graph.len() * d);
                for h in &p.graph {
                    if h.len() != d {
                        return Err(Error::Shape(format!(
                            "graph vector of dimension {}, model expects {d}",
                            h.len()
                        )));
                    }
                    data.extend(h.iter().map(|&v| S::of(v)));
                }
                let h = g.input(Tensor::new(vec![p.graph.len(), d], data)?);
                Ok(vec![proj.injection(g, h, p.anchors.clone(), alpha)?])
            }
            Method::KtEmb => p
                .anchors
                .iter()
                .zip(&p.descriptions)
                .zip(&p.entity_ids)
                .map(|((&a, desc), id)| {
                    let h = self.kt_vector(g, id, desc)?;
                    proj.injection(g, h, vec![a], alpha)
                })
                .collect(),
            _ => Ok(Vec::new()),
        }
    }

    /// `c^(0)` with injections applied.
    pub fn embed(&self, g: &mut Graph<'_, S>, p: &Prepared, alpha: f64) -> Result<Var> {
        let inj = self.injections(g, p, alpha)?;
        self.net.encoder.embed(g, &p.inp.ids, &inj)
    }

    pub fn activations(
        &self,
        g: &mut Graph<'_, S>,
        p: &Prepared,
        alpha: f64,
        drop: Dropout<'_>,
    ) -> Result<LayerActivations> {
        let c0 = self.embed(g, p, alpha)?;
        self.net.encoder.layers_from(g, c0, p.mask.as_ref(), drop)
    }

    pub fn head(&self, g: &mut Graph<'_, S>, acts: &LayerActivations, p: &Prepared) -> Result<Var> {
        self.net.head.forward(g, acts.top(), &p.inp.x_positions)
    }

    pub fn loss(&self, g: &mut Graph<'_, S>, out: Var, p: &Prepared) -> Result<Var> {
        match &p.target {
            Target::Class(c) => g.softmax_xent(out, &[*c]),
            Target::Value(v) => g.mse(out, &[S::of(*v)]),
            Target::Tags(t) => g.softmax_xent(out, t),
        }
    }

    pub fn predict(&self, p: &Prepared) -> Result<Prediction> {
        let mut g = Graph::frozen(&self.params);
        let acts = self.activations(&mut g, p, self.alpha, None)?;
        let out = self.head(&mut g, &acts, p)?;
        Ok(decode(self.labels.kind, g.value(out)))
    }

    /// Fills the KT-Emb cache from the current weights.
    pub fn fill_cache<'a>(&mut self, examples: impl IntoIterator<Item = &'a Prepared>) -> Result<()> {
        let mut g = Graph::frozen(&self.params);
        let mut cache = HashMap::new();
        for p in examples {
            for (id, desc) in p.entity_ids.iter().zip(&p.descriptions) {
                if !cache.contains_key(id) {
                    let h = self.net.encoder.derive_kt_emb(&mut g, desc)?;
                    cache.insert(id.clone(), g.value(h).clone());
                }
            }
        }
        self.cache = cache;
        Ok(())
    }
}

/// Everything besides the parameters needed to rebuild a [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub method: Method,
    pub encoder: EncoderConfig,
    pub labels: LabelSpace,
    pub proj_in: Option<usize>,
    pub alpha: f64,
    pub kt_emb: KtEmbMode,
}

impl<S: Scalar> Model<S> {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            method: self.method,
            encoder: self.net.cfg().clone(),
            labels: self.labels.clone(),
            proj_in: self.proj_in(),
            alpha: self.alpha,
            kt_emb: self.kt_emb,
        }
    }

    /// Rebinds reloaded parameters. A KT-Emb cache is not persisted; cached
    /// runs fall back to encoding descriptions with the frozen weights.
    pub fn from_meta(meta: &ModelMeta, mut params: ParamStore<S>) -> Result<Self> {
        let net = Network::bind(&mut params, &meta.encoder, meta.labels.kind, meta.proj_in)?;
        let kt_emb = match meta.kt_emb {
            KtEmbMode::Cache => KtEmbMode::StopGrad,
            m => m,
        };
        Ok(Model {
            net,
            params,
            method: meta.method,
            labels: meta.labels.clone(),
            alpha: meta.alpha,
            kt_emb,
            cache: HashMap::new(),
        })
    }

    /// Writes the parameters to `path` and the metadata to `path` with a
    /// `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::numcore::checkpoint::save(path, &self.params)?;
        let side = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.meta()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
        let params = crate::numcore::checkpoint::load::<S>(path)?;
        Model::from_meta(&meta, params)
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn decode<S: Scalar>(kind: TaskKind, out: &Tensor<S>) -> Prediction {
    match kind {
        TaskKind::Classification(_) => Prediction::Class(argmax(out.row(0))),
        TaskKind::Regression => Prediction::Value(out.data()[0].f64()),
        TaskKind::SequenceLabeling(_) => {
            Prediction::Tags((0..out.rows()).map(|r| argmax(out.row(r))).collect())
        }
    }
}

/// Scores predictions against the targets of `data`.
pub fn score(kind: MetricKind, labels: &LabelSpace, preds: &[Prediction], data: &[Prepared]) -> Result<Score> {
    let mut pc = Vec::new();
    let mut gc = Vec::new();
    let mut pv = Vec::new();
    let mut gv = Vec::new();
    let mut pt = Vec::new();
    let mut gt = Vec::new();
    for (p, d) in preds.iter().zip(data) {
        match (p, &d.target) {
            (Prediction::Class(a), Target::Class(b)) => {
                pc.push(*a);
                gc.push(*b);
            }
            (Prediction::Value(a), Target::Value(b)) => {
                pv.push(*a);
                gv.push(*b);
            }
            (Prediction::Tags(a), Target::Tags(b)) => {
                let names = |v: &[usize]| v.iter().map(|&i| labels.classes[i].clone()).collect::<Vec<_>>();
                pc.extend_from_slice(a);
                gc.extend_from_slice(b);
                pt.push(names(a));
                gt.push(names(b));
            }
            _ => return Err(invalid!("prediction/target kind mismatch")),
        }
    }
    match kind {
        MetricKind::Accuracy => metrics::accuracy(&pc, &gc),
        MetricKind::Matthews => metrics::matthews(&pc, &gc),
        MetricKind::Pearson => metrics::pearson(&pv, &gv),
        MetricKind::SpanF1 => metrics::span_f1(&pt, &gt),
    }
}

pub fn evaluate<S: Scalar>(model: &Model<S>, kind: MetricKind, data: &[Prepared]) -> Result<Score> {
    let preds = data.iter().map(|p| model.predict(p)).collect::<Result<Vec<_>>>()?;
    score(kind, &model.labels, &preds, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub lambda: f64,
    pub metric: MetricKind,
    pub epochs: Vec<EpochRecord>,
    pub dev: Score,
    /// Injection weight at each update step, then the final weight.
    pub alpha_trace: Vec<f64>,
    /// Training loss after each update.
    pub step_losses: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub wall_secs: f64,
}

/// Equality ignores wall time.
impl PartialEq for RunReport {
    fn eq(&self, o: &Self) -> bool {
        self.method == o.method
            && self.seed == o.seed
            && self.lr == o.lr
            && self.lambda == o.lambda
            && self.metric == o.metric
            && self.epochs == o.epochs
            && self.dev == o.dev
            && self.alpha_trace == o.alpha_trace
            && self.step_losses == o.step_losses
            && self.diagnostics == o.diagnostics
    }
}

impl RunReport {
    /// One row per epoch. Wall time is left out so reruns are byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Everything a run needs besides its configuration.
#[derive(Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub store: &'a KnowledgeStore,
    pub vocab: &'a Vocabulary,
}

pub fn finetune<S: Scalar>(cfg: &RunConfig, data: RunData<'_>) -> Result<(Model<S>, RunReport)> {
    let start = Instant::now();
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(invalid!("training and development sets must be non-empty"));
    }
    let labels = LabelSpace::from_examples(cfg.task, data.train)?;
    let opts = PrepareOptions {
        method: cfg.method,
        policy: cfg.policy,
        max_len: cfg.max_len.min(cfg.encoder.max_positions),
    };
    let (train, mut diag) = prepare_all(data.train, opts, data.store, data.vocab, &labels)?;
    let (dev, d2) = prepare_all(data.dev, opts, data.store, data.vocab, &labels)?;
    diag += d2;

    let mut enc = cfg.encoder.clone();
    enc.vocab_size = data.vocab.len();
    let mut model = Model::<S>::init(&enc, cfg.method, labels, data.store, &mut stream(cfg.seed, "init"))?;
    model.kt_emb = cfg.kt_emb;
    if cfg.method == Method::KtEmb && cfg.kt_emb == KtEmbMode::Cache {
        model.fill_cache(train.iter().chain(&dev))?;
    }

    let batches = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let schedule = Schedule::new(cfg.lr, total);
    let anneal = cfg
        .method
        .is_embedding()
        .then(|| AnnealSchedule::new(cfg.lambda, total))
        .transpose()?;
    let alpha_at = |t: usize| anneal.map_or(Ok(0.0), |a| a.alpha(t));

    let mut opt = Adam::new(&model.params);
    opt.clip = cfg.grad_clip;
    opt.weight_decay = cfg.weight_decay;
    let mut shuffle = stream(cfg.seed, "shuffle");
    let mut dropout = stream(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut alpha_trace = Vec::with_capacity(total + 1);
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let alpha = alpha_at(step)?;
            alpha_trace.push(alpha);
            let mut acc = GradAccumulator::new(model.params.len());
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let p = &train[i];
                let mut g = Graph::new(&model.params);
                let acts = model.activations(&mut g, p, alpha, Some(&mut dropout))?;
                let out = model.head(&mut g, &acts, p)?;
                let loss = model.loss(&mut g, out, p)?;
                let lv = g.value(loss).item().f64();
                if !lv.is_finite() {
                    return Err(Error::Divergence { step });
                }
                batch_loss += lv * w;
                acc.add(&g.backward(loss)?, w);
            }
            let grads = acc.take();
            opt.step(&mut model.params, &grads, schedule.lr(step));
            step_losses.push(batch_loss);
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        model.alpha = alpha_at(step)?;
        let dev_score = evaluate(&model, cfg.metric, &dev)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / train.len() as f64,
            dev_metric: dev_score.value,
            alpha: model.alpha,
        });
    }
    if model.params.iter().any(|(_, _, t)| !t.is_finite()) {
        return Err(Error::Divergence { step });
    }
    alpha_trace.push(alpha_at(total)?);
    model.alpha = alpha_at(total)?;
    let dev_score = evaluate(&model, cfg.metric, &dev)?;
    let report = RunReport {
        method: cfg.method,
        seed: cfg.seed,
        lr: cfg.lr,
        lambda: if cfg.method.is_embedding() { cfg.lambda } else { 0.0 },
        metric: cfg.metric,
        epochs,
        dev: dev_score,
        alpha_trace,
        step_losses,
        diagnostics: diag,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Middle value of an odd-length list (lower middle for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[derive(Clone, Debug)]
pub struct SeedSweep<S: Scalar> {
    pub median: f64,
    pub reports: Vec<RunReport>,
    pub models: Vec<Model<S>>,
}

/// Runs `cfg` once per seed on up to `workers` threads and takes the median
/// development metric.
pub fn median_over_seeds<S: Scalar>(
    cfg: &RunConfig,
    seeds: &[u64],
    data: RunData<'_>,
    workers: usize,
) -> Result<SeedSweep<S>> {
    if seeds.len() != 5 {
        return Err(invalid!("median over seeds needs 5 seeds, got {}", seeds.len()));
    }
    let cfgs: Vec<RunConfig> = seeds
        .iter()
        .map(|&seed| RunConfig { seed, ..cfg.clone() })
        .collect();
    let results = run_parallel(&cfgs, workers, |c| finetune::<S>(c, data));
    let mut reports = Vec::with_capacity(5);
    let mut models = Vec::with_capacity(5);
    for (c, r) in cfgs.iter().zip(results) {
        let (m, rep) = r.map_err(|e| invalid!("{} seed {} failed: {e}", c.method, c.seed))?;
        models.push(m);
        reports.push(rep);
    }
    let values: Vec<f64> = reports.iter().map(|r| r.dev.value).collect();
    Ok(SeedSweep {
        median: median(&values),
        reports,
        models,
    })
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}
