//! Criteria checked on randomly drawn inputs and weights.

use knit::assemble::{assemble, build_visibility_mask, Layout};
use knit::encoder::{TaskFamily, TaskKind};
use knit::kstore::MAX_DESCRIPTION_TOKENS;
use knit::numcore::{gradient_check, Graph, LossBuilder, Precision, Scalar, Tensor, Var};
use knit::tokenize::{select_entities, EntityPolicy, Label};
use knit::train::synth::{generate, SynthSpec};
use knit::train::{build_vocabulary, finetune, prepare, LabelSpace, Method, Model, PrepareOptions, Prepared, RunConfig, RunData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{encoder, instance, randomize, Instance, Shape, MAX_LEN};
use crate::{ensure, Outcome};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Region of each position: `None` for the input, `Some(i)` for the `i`-th
/// kept description. Also returns the anchor of each kept description.
fn geometry(inst: &Instance) -> (usize, Vec<Option<usize>>, Vec<usize>) {
    let n = inst.seq.len();
    let base = n + 2;
    let mut segs: Vec<(usize, usize)> = inst
        .seq
        .spans
        .iter()
        .zip(&inst.definitions)
        .filter_map(|(s, d)| d.map(|w| (s.start + 1, (w + 2).min(MAX_DESCRIPTION_TOKENS) + 1)))
        .collect();
    while base + segs.iter().map(|s| s.1).sum::<usize>() > MAX_LEN {
        segs.pop();
    }
    let mut region = vec![None; base];
    for (i, &(_, len)) in segs.iter().enumerate() {
        region.extend(std::iter::repeat(Some(i)).take(len));
    }
    (base, region, segs.iter().map(|s| s.0).collect())
}

const MASK_SHAPE: Shape = Shape {
    max_tokens: 40,
    min_entities: 0,
    unresolved: 0.15,
    max_definition: 40,
};

pub fn mask_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut entries, mut dropped) = (0usize, 0usize);
    for trial in 0..1000 {
        let inst = instance(&mut rng, &MASK_SHAPE);
        let spans = select_entities(&inst.seq, EntityPolicy::ContentPos);
        let inp = assemble(&inst.seq, &spans, &inst.store, &inst.vocab, Layout::Append, MAX_LEN).map_err(err)?;
        let mask = build_visibility_mask(&inp).map_err(err)?;
        let (_, region, anchors) = geometry(&inst);
        let t = region.len();
        ensure!(mask.size() == t, "trial {trial}: mask size {} but oracle expects {t}", mask.size());
        dropped += inp.dropped;
        for j in 0..t {
            for k in 0..t {
                let visible = match (region[j], region[k]) {
                    (None, None) => true,
                    (Some(a), Some(b)) => a == b,
                    (None, Some(b)) => anchors[b] == j,
                    (Some(_), None) => false,
                };
                ensure!(
                    mask.is_visible(j, k) == visible,
                    "trial {trial}: entry ({j}, {k}) is {} but oracle says {visible}",
                    mask.is_visible(j, k)
                );
                let add = mask.additive(j, k);
                ensure!(
                    (add == 0.0) == visible,
                    "trial {trial}: additive entry ({j}, {k}) = {add}"
                );
                entries += 1;
            }
        }
    }
    Ok(format!("1000 instances, {entries} entries equal, {dropped} descriptions dropped for length"))
}

const MODEL_SHAPE: Shape = Shape {
    max_tokens: 20,
    min_entities: 1,
    unresolved: 0.15,
    max_definition: 12,
};

fn regression() -> LabelSpace {
    LabelSpace {
        kind: TaskKind::Regression,
        classes: Vec::new(),
    }
}

fn random_model<S: Scalar>(
    inst: &Instance,
    method: Method,
    labels: LabelSpace,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Model<S>, String> {
    let cfg = encoder(inst.vocab.len(), S::PRECISION);
    let mut m = Model::<S>::init(&cfg, method, labels, &inst.store, rng).map_err(err)?;
    randomize(&mut m.params, rng, scale);
    Ok(m)
}

fn prepared<S: Scalar>(m: &Model<S>, inst: &Instance, label: Label) -> Result<Prepared, String> {
    let opts = PrepareOptions {
        method: m.method,
        policy: EntityPolicy::ContentPos,
        max_len: MAX_LEN,
    };
    Ok(prepare(&inst.example(label), opts, &inst.store, &inst.vocab, &m.labels).map_err(err)?.0)
}

fn locality<S: Scalar>(tol: f64, seed: u64) -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut anchors_moved) = (0f64, 0);
    for trial in 0..100 {
        let inst = instance(&mut rng, &MODEL_SHAPE);
        let m = random_model::<S>(&inst, Method::KtAttn, regression(), 0.5, &mut rng)?;
        let p = prepared(&m, &inst, Label::Number(0.0))?;
        let enc = &m.net.encoder;
        let mut g = Graph::frozen(&m.params);
        let masked = enc.forward(&mut g, &p.inp.ids, p.mask.as_ref(), &[], None).map_err(err)?;
        let plain = enc.forward(&mut g, &p.inp.ids[..p.inp.base_len], None, &[], None).map_err(err)?;
        let (a, b) = (g.value(masked.layers[1]), g.value(plain.layers[1]));
        let anchors: Vec<usize> = p.inp.segments.iter().map(|s| s.anchor).collect();
        for r in 0..p.inp.base_len {
            let d = a
                .row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x.f64() - y.f64()).abs())
                .fold(0.0, f64::max);
            if anchors.contains(&r) {
                anchors_moved += usize::from(d > tol);
                continue;
            }
            worst = worst.max(d);
            ensure!(d <= tol, "trial {trial}: row {r} differs by {d:e} (tolerance {tol:e})");
        }
    }
    Ok((worst, anchors_moved))
}

pub fn layer1_locality() -> Outcome {
    let (w32, a32) = locality::<f32>(1e-6, 2)?;
    let (w64, a64) = locality::<f64>(1e-12, 3)?;
    Ok(format!(
        "100 draws each; max deviation f32 {w32:.1e}, f64 {w64:.1e}; anchor rows that changed: {a32} and {a64}"
    ))
}

fn bits<S: Scalar>(t: &Tensor<S>) -> Vec<u64> {
    t.data().iter().map(|v| v.f64().to_bits()).collect()
}

fn identity<S: Scalar>(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut injected = 0;
    for trial in 0..100 {
        let inst = instance(&mut rng, &MODEL_SHAPE);
        for method in [Method::KgEmb, Method::KtEmb] {
            let m = random_model::<S>(&inst, method, regression(), 0.5, &mut rng)?;
            let p = prepared(&m, &inst, Label::Number(0.0))?;

            let mut g = Graph::frozen(&m.params);
            let acts = m.activations(&mut g, &p, 0.0, None).map_err(err)?;
            let out = m.head(&mut g, &acts, &p).map_err(err)?;
            let base = m.net.encoder.forward(&mut g, &p.inp.ids, None, &[], None).map_err(err)?;
            let base_out = m.head(&mut g, &base, &p).map_err(err)?;
            for (l, (x, y)) in acts.layers.iter().zip(&base.layers).enumerate() {
                ensure!(
                    bits(g.value(*x)) == bits(g.value(*y)),
                    "trial {trial}, {method}: layer {l} differs from the baseline forward"
                );
            }
            ensure!(
                bits(g.value(out)) == bits(g.value(base_out)),
                "trial {trial}, {method}: head output differs"
            );

            if !p.anchors.is_empty() {
                let on = m.activations(&mut g, &p, 0.5, None).map_err(err)?;
                ensure!(
                    bits(g.value(on.top())) != bits(g.value(base.top())),
                    "trial {trial}, {method}: injection at alpha 0.5 had no effect"
                );
                injected += 1;
            }
        }
    }
    Ok(injected)
}

pub fn injection_identity() -> Outcome {
    let a = identity::<f32>(4)?;
    let b = identity::<f64>(5)?;
    Ok(format!(
        "200 forwards per precision bit-identical; injection active at alpha 0.5 in {a} and {b} of them"
    ))
}

pub fn annealing() -> Outcome {
    let data = generate(&SynthSpec {
        train: 64,
        dev: 16,
        test: 16,
        train_entities: 20,
        eval_entities: 10,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let vocab = build_vocabulary(&data.train, &data.store, 1).map_err(err)?;
    let mut checked = 0;
    for method in [Method::KgEmb, Method::KtEmb] {
        for lambda in [0.1, 0.2, 0.3] {
            let mut cfg = RunConfig::new(method, TaskFamily::Classification);
            cfg.lr = 1e-3;
            cfg.lambda = lambda;
            cfg.epochs = 2;
            cfg.batch_size = 16;
            cfg.max_len = MAX_LEN;
            cfg.encoder = encoder(0, Precision::F64);
            cfg.encoder.layers = 1;
            let run = RunData {
                train: &data.train,
                dev: &data.dev,
                store: &data.store,
                vocab: &vocab,
            };
            let (model, report) = finetune::<f64>(&cfg, run).map_err(err)?;
            let trace = &report.alpha_trace;
            let total = cfg.epochs * data.train.len().div_ceil(cfg.batch_size);
            ensure!(trace.len() == total + 1, "{method} λ={lambda}: trace has {} entries, want {}", trace.len(), total + 1);
            ensure!(trace[0] == 0.0, "{method} λ={lambda}: α(0) = {}", trace[0]);
            ensure!(trace[total] == lambda, "{method} λ={lambda}: α(T) = {}", trace[total]);
            ensure!(model.alpha == lambda, "{method} λ={lambda}: model keeps α = {}", model.alpha);
            let ulp = lambda * f64::EPSILON;
            for (t, &a) in trace.iter().enumerate() {
                let want = lambda * t as f64 / total as f64;
                ensure!((a - want).abs() <= 2.0 * ulp, "{method} λ={lambda}: α({t}) = {a}, linear value {want}");
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} runs: α(0)=0, α(T)=λ, linear within 2 ulp"))
}

/// Finite-difference step. Numeric derivatives are always taken in 64-bit,
/// where this balances stencil truncation against round-off.
const EPS: f64 = 1e-3;

/// Loss through a method's whole forward path.
struct FullPath<'a> {
    model: &'a Model<f64>,
    p: &'a Prepared,
    alpha: f64,
}

impl LossBuilder for FullPath<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> knit::Result<Var> {
        let m = self.model.cast::<S>();
        let acts = m.activations(g, self.p, self.alpha, None)?;
        let out = m.head(g, &acts, self.p)?;
        m.loss(g, out, self.p)
    }
}

pub fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = Shape {
        unresolved: 0.0,
        ..MODEL_SHAPE
    };
    let labels = LabelSpace {
        kind: TaskKind::Classification(3),
        classes: vec!["a".into(), "b".into(), "c".into()],
    };
    let mut lines = Vec::new();
    let (mut worst32, mut worst64) = (0f64, 0f64);
    for method in Method::ALL {
        let inst = instance(&mut rng, &shape);
        // Larger weights sharpen attention and spread gradient magnitudes
        // over more decades than 32-bit arithmetic resolves.
        let m = random_model::<f64>(&inst, method, labels.clone(), 0.3, &mut rng)?;
        let p = prepared(&m, &inst, Label::Text("b".into()))?;
        // Key biases only shift every logit of a row equally, so their
        // gradient is exactly zero.
        let subset: Vec<_> = m.params.ids().filter(|&id| !m.params.name(id).ends_with(".k.b")).collect();
        let loss = FullPath {
            model: &m,
            p: &p,
            alpha: 0.25,
        };
        let samples = 3 * subset.len();
        let r64 = gradient_check(&m.params, &loss, &subset, samples, EPS, 11).map_err(err)?;
        let r32 = gradient_check(&m.params.cast::<f32>(), &loss, &subset, samples, EPS, 12).map_err(err)?;
        ensure!(r64.max_rel_error <= 1e-6, "{method}: 64-bit max relative error {:e}", r64.max_rel_error);
        ensure!(r32.max_rel_error <= 1e-3, "{method}: 32-bit max relative error {:e}", r32.max_rel_error);
        worst64 = worst64.max(r64.max_rel_error);
        worst32 = worst32.max(r32.max_rel_error);
        lines.push(format!("{method} {:.1e}/{:.1e}", r64.max_rel_error, r32.max_rel_error));
    }
    Ok(format!(
        "max relative error f64 {worst64:.1e}, f32 {worst32:.1e}, eps {EPS:e} (per method f64/f32: {})",
        lines.join(", ")
    ))
}
