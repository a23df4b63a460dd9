//! Small pre-LN transformer encoder with embedding-layer injection hooks
//! and task heads.

mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use params::{Declare, Init};

use crate::error::{invalid, Error, Result};
use crate::numcore::{AttnMask, Graph, ParamId, ParamStore, Precision, Scalar, Var};
use crate::tokenize::{CLS, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 128,
            layers: 4,
            heads: 4,
            ff: 256,
            max_positions: 256,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid!("encoder needs at least one layer"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.heads
            ));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.ff == 0 || self.max_positions == 0 {
            return Err(invalid!("encoder dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Optional dropout source; `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut ChaCha8Rng>;

/// One pre-LN transformer layer.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    heads: usize,
}

fn affine<S: Scalar>(
    dc: &mut Declare<'_, S>,
    name: &str,
    din: usize,
    dout: usize,
    zero: bool,
) -> Result<(ParamId, ParamId)> {
    let w = dc.param(
        &format!("{name}.w"),
        &[din, dout],
        if zero { Init::Zeros } else { Init::Xavier },
    )?;
    let b = dc.param(&format!("{name}.b"), &[dout], Init::Zeros)?;
    Ok((w, b))
}

fn norm<S: Scalar>(dc: &mut Declare<'_, S>, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = dc.param(&format!("{name}.g"), &[d], Init::Ones)?;
    let b = dc.param(&format!("{name}.b"), &[d], Init::Zeros)?;
    Ok((g, b))
}

impl Block {
    pub(crate) fn declare<S: Scalar>(
        dc: &mut Declare<'_, S>,
        prefix: &str,
        d: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: norm(dc, &format!("{prefix}.ln1"), d)?,
            q: affine(dc, &format!("{prefix}.q"), d, d, false)?,
            k: affine(dc, &format!("{prefix}.k"), d, d, false)?,
            v: affine(dc, &format!("{prefix}.v"), d, d, false)?,
            o: affine(dc, &format!("{prefix}.o"), d, d, false)?,
            ln2: norm(dc, &format!("{prefix}.ln2"), d)?,
            ff1: affine(dc, &format!("{prefix}.ff1"), d, ff, false)?,
            ff2: affine(dc, &format!("{prefix}.ff2"), ff, d, false)?,
            heads,
        })
    }

    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mask: Option<&Arc<AttnMask>>,
        rate: f64,
        mut drop: Dropout<'_>,
    ) -> Result<Var> {
        let h = g.layer_norm(x, self.ln1.0, self.ln1.1)?;
        let q = g.linear(h, self.q.0, self.q.1)?;
        let k = g.linear(h, self.k.0, self.k.1)?;
        let v = g.linear(h, self.v.0, self.v.1)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        let mut a = g.linear(a, self.o.0, self.o.1)?;
        if let Some(r) = drop.as_deref_mut() {
            a = g.dropout(a, rate, r);
        }
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, self.ln2.0, self.ln2.1)?;
        let f = g.linear(h, self.ff1.0, self.ff1.1)?;
        let f = g.gelu(f);
        let mut f = g.linear(f, self.ff2.0, self.ff2.1)?;
        if let Some(r) = drop {
            f = g.dropout(f, rate, r);
        }
        g.add(x, f)
    }
}

/// Additive update of the embedding rows at `rows` (already weighted).
#[derive(Clone, Debug)]
pub struct Injection {
    pub rows: Vec<usize>,
    pub delta: Var,
}

/// Per-layer activations `c^(0)..c^(L)`. The last entry is after the final
/// layer normalization.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    pub layers: Vec<Var>,
}

impl LayerActivations {
    pub fn top(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf: (ParamId, ParamId),
}

impl Encoder {
    pub(crate) fn declare<S: Scalar>(dc: &mut Declare<'_, S>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok = dc.param("enc.tok", &[cfg.vocab_size, d], Init::Uniform(0.1))?;
        let pos = dc.param("enc.pos", &[cfg.max_positions, d], Init::Uniform(0.1))?;
        let blocks = (0..cfg.layers)
            .map(|l| Block::declare(dc, &format!("enc.l{l}"), d, cfg.heads, cfg.ff))
            .collect::<Result<_>>()?;
        let lnf = norm(dc, "enc.lnf", d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            tok,
            pos,
            blocks,
            lnf,
        })
    }

    pub fn token_table(&self) -> ParamId {
        self.tok
    }

    /// Token plus position embeddings, with any injections added at their
    /// rows: `c^(0)`.
    pub fn embed<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        ids: &[usize],
        injections: &[Injection],
    ) -> Result<Var> {
        let t = ids.len();
        if t == 0 {
            return Err(invalid!("empty input"));
        }
        if t > self.cfg.max_positions {
            return Err(invalid!(
                "sequence of {t} exceeds {} positions",
                self.cfg.max_positions
            ));
        }
        let e = g.gather(self.tok, ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let p = g.gather(self.pos, &positions)?;
        let mut c0 = g.add(e, p)?;
        for inj in injections {
            c0 = g.add_rows_at(c0, inj.delta, &inj.rows)?;
        }
        Ok(c0)
    }

    /// Runs the layers from a given `c^(0)`.
    pub fn layers_from<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        c0: Var,
        mask: Option<&Arc<AttnMask>>,
        mut drop: Dropout<'_>,
    ) -> Result<LayerActivations> {
        let rate = self.cfg.dropout;
        let mut x = c0;
        if let Some(r) = drop.as_deref_mut() {
            x = g.dropout(x, rate, r);
        }
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        layers.push(c0);
        for (l, b) in self.blocks.iter().enumerate() {
            x = b.apply(g, x, mask, rate, drop.as_deref_mut())?;
            if l + 1 == self.blocks.len() {
                x = g.layer_norm(x, self.lnf.0, self.lnf.1)?;
            }
            layers.push(x);
        }
        Ok(LayerActivations { layers })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        ids: &[usize],
        mask: Option<&Arc<AttnMask>>,
        injections: &[Injection],
        drop: Dropout<'_>,
    ) -> Result<LayerActivations> {
        let c0 = self.embed(g, ids, injections)?;
        self.layers_from(g, c0, mask, drop)
    }

    /// Top-layer activation at the first description token of
    /// `[CLS] description [SEP]`, encoded with full attention and no
    /// dropout. Returns a `[1, d_model]` node.
    pub fn derive_kt_emb<S: Scalar>(&self, g: &mut Graph<'_, S>, description: &[usize]) -> Result<Var> {
        if description.is_empty() {
            return Err(invalid!("empty description"));
        }
        let mut ids = Vec::with_capacity(description.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(description);
        ids.push(SEP);
        let acts = self.forward(g, &ids, None, &[], None)?;
        g.select_rows(acts.top(), &[1])
    }
}

/// `d_in -> d_model` MLP: affine, tanh, affine. The final affine starts at
/// zero.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub d_in: usize,
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
}

impl ProjectionHead {
    pub(crate) fn declare<S: Scalar>(dc: &mut Declare<'_, S>, d_in: usize, d_model: usize) -> Result<Self> {
        Ok(ProjectionHead {
            d_in,
            l1: affine(dc, "proj.l1", d_in, d_model, false)?,
            l2: affine(dc, "proj.l2", d_model, d_model, true)?,
        })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
        let got = g.shape(h);
        if got.len() != 2 || got[1] != self.d_in {
            return Err(Error::Shape(format!(
                "injection vector of shape {got:?}, expected width {}",
                self.d_in
            )));
        }
        let a = g.linear(h, self.l1.0, self.l1.1)?;
        let a = g.tanh(a);
        g.linear(a, self.l2.0, self.l2.1)
    }

    /// `α · MLP(h)` for rows of `h` anchored at `rows`.
    pub fn injection<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        rows: Vec<usize>,
        alpha: f64,
    ) -> Result<Injection> {
        let m = self.apply(g, h)?;
        let delta = g.scale(m, S::of(alpha));
        Ok(Injection { rows, delta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification(usize),
    Regression,
    SequenceLabeling(usize),
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification(k) | TaskKind::SequenceLabeling(k) => k,
            TaskKind::Regression => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification(_) => "classification",
            TaskKind::Regression => "regression",
            TaskKind::SequenceLabeling(_) => "sequence-labeling",
        })
    }
}

/// Task family named in configuration files; class counts come from data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    Classification,
    Regression,
    SequenceLabeling,
}

impl FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "classification" => Ok(TaskFamily::Classification),
            "regression" => Ok(TaskFamily::Regression),
            "sequence-labeling" | "tagging" => Ok(TaskFamily::SequenceLabeling),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::Classification => "classification",
            TaskFamily::Regression => "regression",
            TaskFamily::SequenceLabeling => "sequence-labeling",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: TaskKind,
    w: ParamId,
    b: ParamId,
}

impl TaskHead {
    pub(crate) fn declare<S: Scalar>(dc: &mut Declare<'_, S>, kind: TaskKind, d: usize) -> Result<Self> {
        let (w, b) = affine(dc, "head", d, kind.outputs(), false)?;
        Ok(TaskHead { kind, w, b })
    }

    /// Logits `[1, K]`, a `[1, 1]` regression value, or `[|x|, K]` tag
    /// logits over `x_positions`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, top: Var, x_positions: &[usize]) -> Result<Var> {
        let d = g.shape(top)[1];
        if g.store().get(self.w).rows() != d {
            return Err(Error::Shape(format!(
                "head expects width {}, activations have {d}",
                g.store().get(self.w).rows()
            )));
        }
        let rows = match self.kind {
            TaskKind::Classification(_) | TaskKind::Regression => g.select_rows(top, &[0])?,
            TaskKind::SequenceLabeling(_) => g.select_rows(top, x_positions)?,
        };
        g.linear(rows, self.w, self.b)
    }
}

/// `α(t) = λ·t/total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub lambda: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn new(lambda: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid!("λ {lambda} outside [0, 1]"));
        }
        if total_steps == 0 {
            return Err(invalid!("anneal schedule needs at least one step"));
        }
        Ok(AnnealSchedule { lambda, total_steps })
    }

    pub fn alpha(&self, step: usize) -> Result<f64> {
        anneal_alpha(step, self)
    }
}

pub fn anneal_alpha(step: usize, s: &AnnealSchedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(invalid!("step {step} beyond {} total steps", s.total_steps));
    }
    Ok(s.lambda * (step as f64 / s.total_steps as f64))
}

/// Encoder, task head and optional projection head for one model.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub head: TaskHead,
    pub proj: Option<ProjectionHead>,
}

impl Network {
    fn declare<S: Scalar>(
        dc: &mut Declare<'_, S>,
        cfg: &EncoderConfig,
        task: TaskKind,
        proj_in: Option<usize>,
    ) -> Result<Self> {
        let encoder = Encoder::declare(dc, cfg)?;
        let head = TaskHead::declare(dc, task, cfg.d_model)?;
        let proj = proj_in
            .map(|d| ProjectionHead::declare(dc, d, cfg.d_model))
            .transpose()?;
        Ok(Network { encoder, head, proj })
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init<S: Scalar>(
        cfg: &EncoderConfig,
        task: TaskKind,
        proj_in: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let net = Network::declare(&mut Declare::new(&mut store, Some(rng)), cfg, task, proj_in)?;
        Ok((net, store))
    }

    /// Binds to an existing (e.g. reloaded) parameter store.
    pub fn bind<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        task: TaskKind,
        proj_in: Option<usize>,
    ) -> Result<Self> {
        let n = store.len();
        let mut dc = Declare::new(store, None);
        let net = Network::declare(&mut dc, cfg, task, proj_in)?;
        if dc.declared != n {
            return Err(Error::Checkpoint("parameter store has unexpected entries".into()));
        }
        Ok(net)
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }
}

#[cfg(test)]
mod tests;
