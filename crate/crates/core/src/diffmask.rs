//! Differentiable input masking.
//!
//! For every layer `l` a small gate network reads `(c^(0)_j, c^(l)_j)` for
//! each input token `j` and emits a gate `v^(l)_j`. The token survives at
//! layer `l` with weight `z^(l)_j = ∏_{k ≤ l} v^(k)_j`; a masked token's
//! embedding is replaced by a learned baseline vector `b`. Gates are trained
//! to close as many tokens as possible while keeping the frozen model's
//! output within a divergence margin, via a Lagrangian with one multiplier
//! per layer updated by gradient ascent. Binary gates are relaxed with a
//! stretched, hard-rectified binary concrete distribution.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Declare, Init};
use crate::error::{invalid, Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::plot::{bar_chart, heatmap};
use crate::rng::stream;
use crate::tokenize::Upos;
use crate::train::{Adam, Method, Model, Prepared, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub temperature: f64,
    /// Stretch interval `(lo, hi)` with `lo < 0 < 1 < hi`.
    pub stretch: (f64, f64),
    /// Allowed mean divergence between masked and original outputs.
    pub margin: f64,
    pub sparsity_weight: f64,
    pub lr: f64,
    pub lagrange_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden width of each gate network; 0 means `d_model`.
    pub hidden: usize,
    /// Initial gate log-odds, positive so gates start open.
    pub init_logit: f64,
    /// Midpoint nodes for the evaluation-mode expectation.
    pub quadrature: usize,
    /// Threshold below which a token counts as masked.
    pub tau: f64,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            temperature: 0.2,
            stretch: (-0.2, 1.2),
            margin: 0.05,
            sparsity_weight: 1.0,
            lr: 1e-2,
            lagrange_lr: 0.5,
            epochs: 10,
            batch_size: 16,
            hidden: 0,
            init_logit: 3.0,
            quadrature: 64,
            tau: 0.5,
            seed: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.stretch;
        if !(lo < 0.0 && hi > 1.0) {
            return Err(invalid!("stretch interval ({lo}, {hi}) must contain [0, 1] strictly"));
        }
        if !(self.temperature > 0.0) || !(self.margin >= 0.0) || self.batch_size == 0 || self.quadrature == 0 {
            return Err(invalid!("gate temperature, margin, batch size and quadrature must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid!("tau {} outside (0, 1)", self.tau));
        }
        Ok(())
    }

    /// Log-odds offset turning a gate logit into `P(v != 0)`.
    fn l0_shift(&self) -> f64 {
        let (lo, hi) = self.stretch;
        -self.temperature * (-lo / hi).ln()
    }

    /// Expected rectified gate for logit `la`, by midpoint quadrature over
    /// the uniform noise.
    pub fn expected_gate(&self, la: f64) -> f64 {
        let (lo, hi) = self.stretch;
        let n = self.quadrature;
        let total: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let s = 1.0 / (1.0 + (-((u / (1.0 - u)).ln() + la) / self.temperature).exp());
                (s * (hi - lo) + lo).clamp(0.0, 1.0)
            })
            .sum();
        total / n as f64
    }
}

#[derive(Clone, Debug)]
struct GateNet {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Trained gates for one frozen model.
#[derive(Clone, Debug)]
pub struct MaskGateStack<S: Scalar> {
    pub params: ParamStore<S>,
    gates: Vec<GateNet>,
    baseline: ParamId,
    pub cfg: GateConfig,
    /// One multiplier per layer, so each layer's masks meet the margin.
    pub lagrange: Vec<f64>,
    pub method: Method,
    pub d_model: usize,
    /// Divergence of each training step's batch.
    pub trace: Vec<f64>,
}

impl<S: Scalar> MaskGateStack<S> {
    fn init(model: &Model<S>, cfg: &GateConfig) -> Result<Self> {
        let enc = model.net.cfg();
        let d = enc.d_model;
        let hidden = if cfg.hidden == 0 { d } else { cfg.hidden };
        let mut params = ParamStore::new();
        let mut rng = stream(cfg.seed, "diffmask-init");
        let mut dc = Declare::new(&mut params, Some(&mut rng));
        let mut gates = Vec::with_capacity(enc.layers + 1);
        for l in 0..=enc.layers {
            gates.push(GateNet {
                fc1: (
                    dc.param(&format!("gate.l{l}.fc1.w"), &[2 * d, hidden], Init::Xavier)?,
                    dc.param(&format!("gate.l{l}.fc1.b"), &[hidden], Init::Zeros)?,
                ),
                fc2: (
                    dc.param(&format!("gate.l{l}.fc2.w"), &[hidden, 1], Init::Xavier)?,
                    dc.param(&format!("gate.l{l}.fc2.b"), &[1], Init::Zeros)?,
                ),
            });
        }
        let baseline = dc.param("gate.baseline", &[d], Init::Zeros)?;
        for g in &gates {
            params.get_mut(g.fc2.1).data_mut()[0] = S::of(cfg.init_logit);
        }
        Ok(MaskGateStack {
            params,
            gates,
            baseline,
            cfg: cfg.clone(),
            lagrange: vec![0.0; enc.layers + 1],
            method: model.method,
            d_model: d,
            trace: Vec::new(),
        })
    }

    /// Number of gated layers, `L + 1`.
    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    pub fn baseline(&self) -> &Tensor<S> {
        self.params.get(self.baseline)
    }

    fn check(&self, model: &Model<S>) -> Result<()> {
        let enc = model.net.cfg();
        if model.method != self.method || enc.layers + 1 != self.layers() || enc.d_model != self.d_model {
            return Err(invalid!(
                "gates trained for {} ({} layers, width {}) do not fit {} ({} layers, width {})",
                self.method,
                self.layers(),
                self.d_model,
                model.method,
                enc.layers + 1,
                enc.d_model
            ));
        }
        Ok(())
    }
}

/// Frozen forward results reused across gate training steps.
struct Cached<S> {
    c0: Tensor<S>,
    /// `c^(l)` at the input-token rows, per layer.
    xs: Vec<Tensor<S>>,
    reference: Reference<S>,
}

enum Reference<S> {
    Probs(Tensor<S>),
    Value(Vec<S>),
}

fn rows_of<S: Scalar>(t: &Tensor<S>, rows: &[usize]) -> Tensor<S> {
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), t.cols()], data).expect("row count matches")
}

fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn cache<S: Scalar>(model: &Model<S>, p: &Prepared) -> Result<Cached<S>> {
    let mut g = Graph::frozen(&model.params);
    let acts = model.activations(&mut g, p, model.alpha, None)?;
    let out = model.head(&mut g, &acts, p)?;
    let reference = match p.target {
        Target::Value(_) => Reference::Value(g.value(out).data().to_vec()),
        _ => Reference::Probs(softmax_rows(g.value(out))),
    };
    Ok(Cached {
        c0: g.value(acts.layers[0]).clone(),
        xs: acts
            .layers
            .iter()
            .map(|&v| rows_of(g.value(v), &p.inp.x_positions))
            .collect(),
        reference,
    })
}

/// Gate and baseline tensors placed in a graph, as leaves (training) or
/// constants.
struct Placed {
    gates: Vec<[Var; 4]>,
    baseline: Var,
}

fn place<S: Scalar>(g: &mut Graph<'_, S>, stack: &MaskGateStack<S>, train: bool) -> Placed {
    let mut put = |id: ParamId| {
        let t = stack.params.get(id).clone();
        if train {
            g.leaf(t)
        } else {
            g.input(t)
        }
    };
    let gates = stack
        .gates
        .iter()
        .map(|n| [put(n.fc1.0), put(n.fc1.1), put(n.fc2.0), put(n.fc2.1)])
        .collect();
    let baseline = put(stack.baseline);
    Placed { gates, baseline }
}

fn gate_logits<S: Scalar>(g: &mut Graph<'_, S>, w: &[Var; 4], c0x: Var, clx: Var) -> Result<Var> {
    let x = g.concat_cols(c0x, clx)?;
    let h = g.matmul(x, w[0])?;
    let h = g.add_bias(h, w[1])?;
    let h = g.tanh(h);
    let o = g.matmul(h, w[2])?;
    g.add_bias(o, w[3])
}

/// `ĉ^(0)` with input rows interpolated towards the baseline by `1 - z`.
fn masked_embedding<S: Scalar>(g: &mut Graph<'_, S>, c: &Cached<S>, p: &Prepared, z: Var, b: Var) -> Result<Var> {
    let c0 = g.input(c.c0.clone());
    let c0x = g.input(c.xs[0].clone());
    let neg = g.scale(c0x, S::of(-1.0));
    let diff = g.add_bias(neg, b)?;
    let keep = g.affine(z, S::of(-1.0), S::one());
    let delta = g.mul_col(diff, keep)?;
    g.add_rows_at(c0, delta, &p.inp.x_positions)
}

fn output<S: Scalar>(g: &mut Graph<'_, S>, model: &Model<S>, p: &Prepared, c0: Var) -> Result<Var> {
    let acts = model.net.encoder.layers_from(g, c0, p.mask.as_ref(), None)?;
    model.head(g, &acts, p)
}

fn divergence<S: Scalar>(g: &mut Graph<'_, S>, out: Var, r: &Reference<S>) -> Result<Var> {
    match r {
        Reference::Probs(t) => g.kl_to_target(out, t),
        Reference::Value(v) => g.mse(out, v),
    }
}

/// Model output on `p` with input-token gates fixed to `z` (one value per
/// input token) and the stack's baseline vector.
pub fn masked_output<S: Scalar>(stack: &MaskGateStack<S>, model: &Model<S>, p: &Prepared, z: &[f64]) -> Result<Tensor<S>> {
    stack.check(model)?;
    if z.len() != p.inp.x_positions.len() {
        return Err(invalid!("{} gate values for {} input tokens", z.len(), p.inp.x_positions.len()));
    }
    let c = cache(model, p)?;
    let mut g = Graph::frozen(&model.params);
    let zt = g.input(Tensor::new(vec![z.len(), 1], z.iter().map(|&v| S::of(v)).collect())?);
    let b = g.input(stack.baseline().clone());
    let c0 = masked_embedding(&mut g, &c, p, zt, b)?;
    let out = output(&mut g, model, p, c0)?;
    Ok(g.value(out).clone())
}

/// Unmasked model output on `p`.
pub fn original_output<S: Scalar>(model: &Model<S>, p: &Prepared) -> Result<Tensor<S>> {
    let mut g = Graph::frozen(&model.params);
    let acts = model.activations(&mut g, p, model.alpha, None)?;
    let out = model.head(&mut g, &acts, p)?;
    Ok(g.value(out).clone())
}

fn logit_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            (u / (1.0 - u)).ln()
        })
        .collect()
}

/// One stochastic training evaluation: returns (objective, divergence).
fn step_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    stack: &MaskGateStack<S>,
    placed: &Placed,
    model: &Model<S>,
    p: &Prepared,
    c: &Cached<S>,
    layer: usize,
    noise: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let cfg = &stack.cfg;
    let (lo, hi) = cfg.stretch;
    let n = p.inp.x_positions.len();
    let c0x = g.input(c.xs[0].clone());
    let mut z: Option<Var> = None;
    let mut open: Option<Var> = None;
    for k in 0..=layer {
        let clx = g.input(c.xs[k].clone());
        let la = gate_logits(g, &placed.gates[k], c0x, clx)?;
        let eps = Tensor::new(vec![n, 1], logit_noise(noise, n).into_iter().map(S::of).collect())?;
        let s = g.add_const(la, &eps)?;
        let s = g.scale(s, S::of(1.0 / cfg.temperature));
        let s = g.sigmoid(s);
        let s = g.affine(s, S::of(hi - lo), S::of(lo));
        let v = g.clamp01(s);
        let pk = g.affine(la, S::one(), S::of(cfg.l0_shift()));
        let pk = g.sigmoid(pk);
        z = Some(match z {
            Some(z) => g.mul(z, v)?,
            None => v,
        });
        open = Some(match open {
            Some(o) => g.mul(o, pk)?,
            None => pk,
        });
    }
    let (z, open) = (z.expect("at least one layer"), open.expect("at least one layer"));
    let c0 = masked_embedding(g, c, p, z, placed.baseline)?;
    let out = output(g, model, p, c0)?;
    let div = divergence(g, out, &c.reference)?;
    let l0 = g.mean(open);
    let l0 = g.scale(l0, S::of(cfg.sparsity_weight));
    let pen = g.scale(div, S::of(stack.lagrange[layer]));
    Ok((g.add(l0, pen)?, div))
}

/// Trains gates for the frozen `model` on `data`. The model is only read.
pub fn train_gates<S: Scalar>(model: &Model<S>, data: &[Prepared], cfg: &GateConfig) -> Result<MaskGateStack<S>> {
    cfg.validate()?;
    let usable: Vec<&Prepared> = data.iter().filter(|p| !p.inp.x_positions.is_empty()).collect();
    if usable.is_empty() {
        return Err(invalid!("no input tokens to gate"));
    }
    let mut stack = MaskGateStack::init(model, cfg)?;
    let cached = usable.iter().map(|p| cache(model, p)).collect::<Result<Vec<_>>>()?;
    // With every gate open the masked input is the original input, so the
    // constraint is always satisfiable.
    let ones = vec![1.0; usable[0].inp.x_positions.len()];
    let same = masked_output(&stack, model, usable[0], &ones)?;
    if same != original_output(model, usable[0])? {
        return Err(invalid!("open gates do not reproduce the model output"));
    }

    let layers = stack.layers();
    let mut opt = Adam::new(&stack.params);
    let mut shuffle = stream(cfg.seed, "diffmask-shuffle");
    let mut noise = stream(cfg.seed, "diffmask-noise");
    let mut pick = stream(cfg.seed, "diffmask-layer");
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let ids: Vec<ParamId> = stack.params.ids().collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let w = S::of(1.0 / batch.len() as f64);
            let mut grads: Vec<Tensor<S>> = ids.iter().map(|&i| Tensor::zeros(stack.params.get(i).shape())).collect();
            let mut batch_div = 0.0;
            let mut layer_div = vec![(0.0, 0usize); layers];
            for &i in batch {
                let layer = pick.gen_range(0..layers);
                let mut g = Graph::frozen(&model.params);
                let placed = place(&mut g, &stack, true);
                let (loss, div) = step_loss(&mut g, &stack, &placed, model, usable[i], &cached[i], layer, &mut noise)?;
                let d = g.value(div).item().f64();
                batch_div += d / batch.len() as f64;
                layer_div[layer].0 += d;
                layer_div[layer].1 += 1;
                let gr = g.backward(loss)?;
                let leaves = placed.gates.iter().flatten().chain(std::iter::once(&placed.baseline));
                for (acc, &v) in grads.iter_mut().zip(leaves) {
                    if let Some(t) = gr.leaf(v) {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += w * b;
                        }
                    }
                }
            }
            if !batch_div.is_finite() {
                return Err(Error::Divergence { step: stack.trace.len() });
            }
            let pairs: Vec<(ParamId, Tensor<S>)> = ids.iter().copied().zip(grads).collect();
            opt.step(&mut stack.params, &pairs, cfg.lr);
            for (lam, &(sum, n)) in stack.lagrange.iter_mut().zip(&layer_div) {
                if n > 0 {
                    *lam = (*lam + cfg.lagrange_lr * (sum / n as f64 - cfg.margin)).max(0.0);
                }
            }
            stack.trace.push(batch_div);
        }
    }
    Ok(stack)
}

/// Gate values and predictions for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHeatmap {
    pub tokens: Vec<String>,
    /// `z[l][j]` for layer `l` and input token `j`.
    pub z: Vec<Vec<f64>>,
    /// Model output without masking.
    pub original: Vec<f64>,
    /// Model output with the top-layer gates applied.
    pub masked: Vec<f64>,
    pub divergence: f64,
}

fn kl_or_mse(reference: &[f64], out: &[f64], probs: bool, k: usize) -> f64 {
    if !probs {
        return reference.iter().zip(out).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    }
    let rows = reference.len() / k;
    let mut total = 0.0;
    for r in 0..rows {
        let t = &reference[r * k..(r + 1) * k];
        let o = &out[r * k..(r + 1) * k];
        let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = o.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        let tm = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tz = t.iter().map(|v| (v - tm).exp()).sum::<f64>().ln() + tm;
        for c in 0..k {
            let pt = (t[c] - tz).exp();
            if pt > 0.0 {
                total += pt * ((t[c] - tz) - (o[c] - lz));
            }
        }
    }
    total / rows as f64
}

/// Evaluation-mode heatmap: expected gates, multiplied up the layers.
pub fn compute_heatmap<S: Scalar>(stack: &MaskGateStack<S>, model: &Model<S>, p: &Prepared) -> Result<MaskHeatmap> {
    stack.check(model)?;
    let c = cache(model, p)?;
    let n = p.inp.x_positions.len();
    let mut z = Vec::with_capacity(stack.layers());
    let mut running = vec![1.0; n];
    if n > 0 {
        let mut g = Graph::frozen(&model.params);
        let placed = place(&mut g, stack, false);
        let c0x = g.input(c.xs[0].clone());
        for (k, w) in placed.gates.iter().enumerate() {
            let clx = g.input(c.xs[k].clone());
            let la = gate_logits(&mut g, w, c0x, clx)?;
            let la = g.value(la).to_f64_vec();
            for (r, l) in running.iter_mut().zip(la) {
                *r *= stack.cfg.expected_gate(l);
            }
            z.push(running.clone());
        }
    } else {
        z.resize(stack.layers(), Vec::new());
    }
    let original = original_output(model, p)?;
    let masked = masked_output(stack, model, p, &running)?;
    let k = original.cols();
    let probs = !matches!(p.target, Target::Value(_));
    let (o, m) = (original.to_f64_vec(), masked.to_f64_vec());
    Ok(MaskHeatmap {
        tokens: p.inp.x_positions.iter().map(|&i| p.inp.tokens[i].clone()).collect(),
        z,
        divergence: kl_or_mse(&o, &m, probs, k),
        original: o,
        masked: m,
    })
}

impl MaskHeatmap {
    pub fn layers(&self) -> usize {
        self.z.len()
    }

    /// Share of tokens with `z < tau` at layer `l`.
    pub fn masked_fraction(&self, l: usize, tau: f64) -> f64 {
        let row = &self.z[l];
        if row.is_empty() {
            return 0.0;
        }
        row.iter().filter(|&&v| v < tau).count() as f64 / row.len() as f64
    }

    /// `position,token,l0,l1,...`, one row per input token.
    pub fn csv(&self) -> String {
        let mut s = String::from("position,token");
        for l in 0..self.layers() {
            s.push_str(&format!(",l{l}"));
        }
        s.push('\n');
        for (j, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{j},{}", csv_field(t)));
            for l in 0..self.layers() {
                s.push_str(&format!(",{}", self.z[l][j]));
            }
            s.push('\n');
        }
        s
    }

    pub fn svg(&self, title: &str) -> String {
        let cols: Vec<String> = (0..self.layers()).map(|l| l.to_string()).collect();
        let values: Vec<Vec<f64>> = (0..self.tokens.len())
            .map(|j| self.z.iter().map(|row| row[j]).collect())
            .collect();
        heatmap(title, &self.tokens, &cols, &values)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Held-out fidelity and sparsity of a trained stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mean_divergence: f64,
    /// Per layer, share of input tokens with `z < tau`.
    pub masked_fraction: Vec<f64>,
    pub examples: usize,
}

pub fn fidelity<S: Scalar>(stack: &MaskGateStack<S>, model: &Model<S>, data: &[Prepared]) -> Result<Fidelity> {
    let maps = data
        .iter()
        .filter(|p| !p.inp.x_positions.is_empty())
        .map(|p| compute_heatmap(stack, model, p))
        .collect::<Result<Vec<_>>>()?;
    if maps.is_empty() {
        return Err(invalid!("no input tokens to evaluate"));
    }
    let tau = stack.cfg.tau;
    let tokens: usize = maps.iter().map(|m| m.tokens.len()).sum();
    let masked_fraction = (0..stack.layers())
        .map(|l| {
            maps.iter()
                .map(|m| m.z[l].iter().filter(|&&v| v < tau).count())
                .sum::<usize>() as f64
                / tokens as f64
        })
        .collect();
    Ok(Fidelity {
        mean_divergence: maps.iter().map(|m| m.divergence).sum::<f64>() / maps.len() as f64,
        masked_fraction,
        examples: maps.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosRow {
    pub pos: Upos,
    /// Mean number of layers with `z >= tau`.
    pub mean_layers: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosAggregate {
    pub tau: f64,
    pub rows: Vec<PosRow>,
}

/// Mean count of layers that keep each token (`z >= tau`), grouped by tag.
pub fn pos_aggregate(maps: &[MaskHeatmap], tags: &[Vec<Upos>], tau: f64) -> Result<PosAggregate> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid!("tau {tau} outside (0, 1)"));
    }
    if maps.len() != tags.len() {
        return Err(invalid!("{} heatmaps but {} tag sequences", maps.len(), tags.len()));
    }
    let layers = maps.first().map_or(0, |m| m.layers());
    let mut acc: BTreeMap<Upos, (usize, usize)> = BTreeMap::new();
    for (i, (m, t)) in maps.iter().zip(tags).enumerate() {
        if m.layers() != layers {
            return Err(invalid!("heatmap {i} has {} layers, expected {layers}", m.layers()));
        }
        if m.tokens.len() != t.len() {
            return Err(invalid!("heatmap {i} has {} tokens but {} tags", m.tokens.len(), t.len()));
        }
        for (j, &tag) in t.iter().enumerate() {
            let kept = m.z.iter().filter(|row| row[j] >= tau).count();
            let e = acc.entry(tag).or_default();
            e.0 += kept;
            e.1 += 1;
        }
    }
    Ok(PosAggregate {
        tau,
        rows: acc
            .into_iter()
            .map(|(pos, (kept, n))| PosRow {
                pos,
                mean_layers: kept as f64 / n as f64,
                tokens: n,
            })
            .collect(),
    })
}

impl PosAggregate {
    pub fn csv(&self) -> String {
        let mut s = String::from("pos,mean_layers,tokens\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.pos, r.mean_layers, r.tokens));
        }
        s
    }

    pub fn svg(&self) -> String {
        let bars: Vec<(String, f64)> = self.rows.iter().map(|r| (r.pos.to_string(), r.mean_layers)).collect();
        bar_chart(&format!("layers keeping each tag (z >= {})", self.tau), "mean layers", &bars)
    }

    pub fn write(&self, csv: &Path, svg: &Path) -> Result<()> {
        std::fs::write(csv, self.csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(svg, self.svg()).map_err(|e| Error::io(svg, e))
    }
}
