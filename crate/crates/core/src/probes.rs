//! Layer-wise information probes.
//!
//! A y-probe predicts the task label from the frozen activations of one
//! layer; its held-out accuracy stands in for `I(c^(l); y)`. An x-probe
//! recovers masked input tokens from the same activations; its held-out
//! cross-entropy `R` stands in for `-I(c^(l); x)`. Both probes are one
//! transformer layer followed by two affine layers, and both read only the
//! `[CLS]` row and the rows of the original input tokens, so layer ranges
//! and position sets are comparable across methods.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{Block, Declare, Init};
use crate::error::{invalid, Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor};
use crate::plot::{line_chart, Series};
use crate::rng::stream;
use crate::tokenize::MASK;
use crate::train::{run_parallel, Adam, GradAccumulator, Model, Prepared, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Each probe is trained once per seed; the best held-out score wins.
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Fraction of input tokens masked for the x-probe.
    pub mask_fraction: f64,
    /// Seed of the masking pattern, shared by every probe seed.
    pub mask_seed: u64,
    pub workers: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 5,
            lr: 1e-3,
            seeds: vec![1, 2, 3],
            batch_size: 16,
            mask_fraction: 0.15,
            mask_seed: 0,
            workers: 1,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid!("probe needs at least one seed"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("probe batch size must be at least 1"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(invalid!("mask fraction {} outside (0, 1]", self.mask_fraction));
        }
        Ok(())
    }
}

/// Probe-train and probe-test sets, prepared for the probed model's method.
#[derive(Clone, Copy)]
pub struct ProbeData<'a> {
    pub train: &'a [Prepared],
    pub test: &'a [Prepared],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub r_x: f64,
    pub acc_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIProbeReport {
    pub method: String,
    pub layers: Vec<LayerProbe>,
}

impl MIProbeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer,R_x,acc_y\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.layer, l.r_x, l.acc_y));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    /// `R_baseline - R_method`.
    pub delta_x: f64,
    /// `acc_method - acc_baseline`.
    pub delta_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMI {
    pub method: String,
    pub baseline: String,
    pub layers: Vec<LayerDelta>,
}

pub fn delta_mi(method: &MIProbeReport, baseline: &MIProbeReport) -> Result<DeltaMI> {
    if method.layers.len() != baseline.layers.len() {
        return Err(invalid!(
            "{} has {} probed layers, {} has {}",
            method.method,
            method.layers.len(),
            baseline.method,
            baseline.layers.len()
        ));
    }
    let layers = method
        .layers
        .iter()
        .zip(&baseline.layers)
        .map(|(m, b)| {
            if m.layer != b.layer {
                return Err(invalid!("layer {} paired with layer {}", m.layer, b.layer));
            }
            Ok(LayerDelta {
                layer: m.layer,
                delta_x: b.r_x - m.r_x,
                delta_y: m.acc_y - b.acc_y,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DeltaMI {
        method: method.method.clone(),
        baseline: baseline.method.clone(),
        layers,
    })
}

impl DeltaMI {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer,delta_I_x,delta_I_y\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.layer, l.delta_x, l.delta_y));
        }
        s
    }

    pub fn svg(&self) -> String {
        let pts = |f: fn(&LayerDelta) -> f64| self.layers.iter().map(|l| (l.layer as f64, f(l))).collect();
        line_chart(
            &format!("{} vs {}", self.method, self.baseline),
            "layer",
            "difference",
            &[
                Series {
                    name: "ΔI(c; x)",
                    points: pts(|l| l.delta_x),
                },
                Series {
                    name: "ΔI(c; y)",
                    points: pts(|l| l.delta_y),
                },
            ],
        )
    }
}

/// Rows a probe reads: `[CLS]` then every original input token.
fn probe_rows(p: &Prepared) -> Vec<usize> {
    let mut rows = Vec::with_capacity(p.inp.x_positions.len() + 1);
    rows.push(0);
    rows.extend_from_slice(&p.inp.x_positions);
    rows
}

/// Frozen activations at the probe rows, `[example][layer]`.
pub fn layer_features<S: Scalar>(model: &Model<S>, data: &[Prepared]) -> Result<Vec<Vec<Tensor<S>>>> {
    data.iter()
        .map(|p| {
            let mut g = Graph::frozen(&model.params);
            let acts = model.activations(&mut g, p, model.alpha, None)?;
            let rows = probe_rows(p);
            acts.layers
                .iter()
                .map(|&v| {
                    let t = g.value(v);
                    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
                    Tensor::new(vec![rows.len(), t.cols()], data)
                })
                .collect()
        })
        .collect()
}

/// One probe target set over a feature matrix.
struct Sample<S> {
    feats: Tensor<S>,
    rows: Vec<usize>,
    targets: Vec<usize>,
}

struct ProbeNet {
    block: Block,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl ProbeNet {
    fn init<S: Scalar>(d: usize, heads: usize, ff: usize, outputs: usize, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "probe-init");
        let mut dc = Declare::new(&mut store, Some(&mut rng));
        let block = Block::declare(&mut dc, "probe.l0", d, heads, ff)?;
        let fc1 = (
            dc.param("probe.fc1.w", &[d, d], Init::Xavier)?,
            dc.param("probe.fc1.b", &[d], Init::Zeros)?,
        );
        // A zero output layer starts the probe at the uniform prediction.
        let fc2 = (
            dc.param("probe.fc2.w", &[d, outputs], Init::Zeros)?,
            dc.param("probe.fc2.b", &[outputs], Init::Zeros)?,
        );
        Ok((ProbeNet { block, fc1, fc2 }, store))
    }

    fn loss<S: Scalar>(&self, g: &mut Graph<'_, S>, s: &Sample<S>) -> Result<(crate::numcore::Var, usize)> {
        let x = g.input(s.feats.clone());
        let h = self.block.apply(g, x, None, 0.0, None)?;
        let r = g.select_rows(h, &s.rows)?;
        let r = g.linear(r, self.fc1.0, self.fc1.1)?;
        let r = g.gelu(r);
        let logits = g.linear(r, self.fc2.0, self.fc2.1)?;
        let correct = (0..s.rows.len())
            .filter(|&i| argmax(g.value(logits).row(i)) == s.targets[i])
            .count();
        Ok((g.softmax_xent(logits, &s.targets)?, correct))
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

/// Held-out accuracy and mean cross-entropy over all target rows.
#[derive(Clone, Copy, Debug)]
struct Fit {
    acc: f64,
    ce: f64,
}

fn fit<S: Scalar>(train: &[Sample<S>], test: &[Sample<S>], outputs: usize, heads: usize, ff: usize, cfg: &ProbeConfig, seed: u64) -> Result<Fit> {
    let d = train[0].feats.cols();
    let (net, mut params) = ProbeNet::init::<S>(d, heads, ff, outputs, seed)?;
    let mut opt = Adam::new(&params);
    let mut shuffle = stream(seed, "probe-shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new(params.len());
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new(&params);
                let (loss, _) = net.loss(&mut g, &train[i])?;
                acc.add(&g.backward(loss)?, w);
            }
            opt.step(&mut params, &acc.take(), cfg.lr);
        }
    }
    let (mut ce, mut correct, mut rows) = (0.0, 0, 0);
    for s in test {
        let mut g = Graph::frozen(&params);
        let (loss, c) = net.loss(&mut g, s)?;
        ce += g.value(loss).item().f64() * s.rows.len() as f64;
        correct += c;
        rows += s.rows.len();
    }
    let fit = Fit {
        acc: correct as f64 / rows as f64,
        ce: ce / rows as f64,
    };
    if !fit.ce.is_finite() {
        return Err(invalid!("probe loss is not finite"));
    }
    Ok(fit)
}

fn best_of_seeds<S: Scalar>(
    train: &[Sample<S>],
    test: &[Sample<S>],
    outputs: usize,
    model: &Model<S>,
    cfg: &ProbeConfig,
) -> Result<Vec<Fit>> {
    let enc = model.net.cfg();
    cfg.seeds
        .iter()
        .map(|&seed| fit(train, test, outputs, enc.heads, enc.ff, cfg, seed))
        .collect()
}

fn y_samples<S: Scalar>(data: &[Prepared], feats: Vec<Tensor<S>>) -> Result<Vec<Sample<S>>> {
    data.iter()
        .zip(feats)
        .map(|(p, feats)| match &p.target {
            Target::Class(c) => Ok(Sample {
                feats,
                rows: vec![0],
                targets: vec![*c],
            }),
            Target::Tags(t) => Ok(Sample {
                feats,
                rows: (1..=t.len()).collect(),
                targets: t.clone(),
            }),
            Target::Value(_) => Err(invalid!("the y-probe needs class or tag labels")),
        })
        .collect()
}

fn y_outputs<S>(train: &[Sample<S>]) -> Result<usize> {
    let classes: std::collections::BTreeSet<usize> = train.iter().flat_map(|s| s.targets.iter().copied()).collect();
    if classes.len() < 2 {
        return Err(invalid!("the y-probe needs at least two classes in its training set"));
    }
    Ok(classes.last().unwrap() + 1)
}

fn layer_of<S: Scalar>(all: &[Vec<Tensor<S>>], layer: usize) -> Result<Vec<Tensor<S>>> {
    all.iter()
        .map(|f| {
            f.get(layer)
                .cloned()
                .ok_or_else(|| invalid!("layer {layer} out of range 0..{}", f.len()))
        })
        .collect()
}

/// Held-out accuracy of the best y-probe on layer `layer`.
pub fn train_y_probe<S: Scalar>(model: &Model<S>, layer: usize, data: ProbeData<'_>, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    check_sets(data)?;
    let tr = y_samples(data.train, layer_of(&layer_features(model, data.train)?, layer)?)?;
    let te = y_samples(data.test, layer_of(&layer_features(model, data.test)?, layer)?)?;
    let k = y_outputs(&tr)?.max(y_outputs(&te).unwrap_or(0));
    let fits = best_of_seeds(&tr, &te, k, model, cfg)?;
    Ok(fits.iter().map(|f| f.acc).fold(f64::NEG_INFINITY, f64::max))
}

fn check_sets(data: ProbeData<'_>) -> Result<()> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(invalid!("probe-train and probe-test sets must be non-empty"));
    }
    Ok(())
}

/// Copy of `p` with a fixed share of its input tokens replaced by `[MASK]`;
/// also returns the masked probe rows and the original ids there.
/// Description tokens are never masked.
pub fn mask_inputs(p: &Prepared, fraction: f64, rng: &mut rand_chacha::ChaCha8Rng) -> (Prepared, Vec<usize>, Vec<usize>) {
    let n = p.inp.x_positions.len();
    let mut q = p.clone();
    if n == 0 {
        return (q, Vec::new(), Vec::new());
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    picks.sort_unstable();
    let mut rows = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for i in picks {
        let pos = p.inp.x_positions[i];
        targets.push(p.inp.ids[pos]);
        q.inp.ids[pos] = MASK;
        q.inp.tokens[pos] = "[MASK]".to_string();
        rows.push(i + 1);
    }
    (q, rows, targets)
}

fn x_samples<S: Scalar>(model: &Model<S>, data: &[Prepared], cfg: &ProbeConfig, salt: &str) -> Result<Vec<Vec<Sample<S>>>> {
    let mut rng = stream(cfg.mask_seed, salt);
    let mut masked = Vec::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for p in data {
        let (q, r, t) = mask_inputs(p, cfg.mask_fraction, &mut rng);
        if !r.is_empty() {
            masked.push(q);
            rows.push(r);
            targets.push(t);
        }
    }
    if masked.is_empty() {
        return Err(invalid!("no maskable input positions"));
    }
    let feats = layer_features(model, &masked)?;
    let layers = feats[0].len();
    Ok((0..layers)
        .map(|l| {
            feats
                .iter()
                .zip(&rows)
                .zip(&targets)
                .map(|((f, r), t)| Sample {
                    feats: f[l].clone(),
                    rows: r.clone(),
                    targets: t.clone(),
                })
                .collect()
        })
        .collect())
}

/// Held-out reconstruction loss `R` of the best x-probe on layer `layer`.
pub fn train_x_probe<S: Scalar>(model: &Model<S>, layer: usize, data: ProbeData<'_>, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    check_sets(data)?;
    let mut tr = x_samples(model, data.train, cfg, "probe-mask-train")?;
    let mut te = x_samples(model, data.test, cfg, "probe-mask-test")?;
    if layer >= tr.len() {
        return Err(invalid!("layer {layer} out of range 0..{}", tr.len()));
    }
    let vocab = model.net.cfg().vocab_size;
    let fits = best_of_seeds(&tr.swap_remove(layer), &te.swap_remove(layer), vocab, model, cfg)?;
    Ok(fits.iter().map(|f| f.ce).fold(f64::INFINITY, f64::min))
}

/// Both probes on every layer `0..=L`, layers in parallel.
pub fn probe_model<S: Scalar>(model: &Model<S>, name: &str, data: ProbeData<'_>, cfg: &ProbeConfig) -> Result<MIProbeReport> {
    cfg.validate()?;
    check_sets(data)?;
    let ytr_all = layer_features(model, data.train)?;
    let yte_all = layer_features(model, data.test)?;
    let xtr = x_samples(model, data.train, cfg, "probe-mask-train")?;
    let xte = x_samples(model, data.test, cfg, "probe-mask-test")?;
    let vocab = model.net.cfg().vocab_size;
    let layers: Vec<usize> = (0..xtr.len()).collect();
    let results = run_parallel(&layers, cfg.workers, |&l| -> Result<LayerProbe> {
        let ytr = y_samples(data.train, layer_of(&ytr_all, l)?)?;
        let yte = y_samples(data.test, layer_of(&yte_all, l)?)?;
        let k = y_outputs(&ytr)?.max(y_outputs(&yte).unwrap_or(0));
        let acc_y = best_of_seeds(&ytr, &yte, k, model, cfg)?
            .iter()
            .map(|f| f.acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let r_x = best_of_seeds(&xtr[l], &xte[l], vocab, model, cfg)?
            .iter()
            .map(|f| f.ce)
            .fold(f64::INFINITY, f64::min);
        Ok(LayerProbe { layer: l, r_x, acc_y })
    });
    Ok(MIProbeReport {
        method: name.to_string(),
        layers: results.into_iter().collect::<Result<_>>()?,
    })
}
