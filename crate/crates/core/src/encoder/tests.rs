use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::assemble::{AssembledInput, Layout, Segment};
use crate::numcore::{gradient_check, LossBuilder, Tensor};

fn cfg(vocab: usize, layers: usize, precision: Precision) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        d_model: 16,
        layers,
        heads: 2,
        ff: 24,
        max_positions: 32,
        dropout: 0.0,
        precision,
    }
}

fn net<S: Scalar>(c: &EncoderConfig, task: TaskKind, proj: Option<usize>, seed: u64) -> (Network, ParamStore<S>) {
    Network::init(c, task, proj, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Overwrites every parameter with noise so zero-initialised paths carry
/// gradient too.
fn randomize<S: Scalar>(store: &mut ParamStore<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = S::of(rng.gen_range(-0.5..0.5));
        }
    }
}

/// x of 5 tokens then two 3-token descriptions, anchored at x tokens 1 and 3.
fn two_segment_input() -> AssembledInput {
    let ids = vec![2, 5, 6, 7, 8, 9, 3, 10, 11, 3, 12, 13, 3];
    let t = ids.len();
    AssembledInput {
        tokens: ids.iter().map(|i| i.to_string()).collect(),
        ids,
        positions: (0..t).collect(),
        base_len: 7,
        segments: vec![
            Segment { entity: 0, anchor: 2, range: 7..10 },
            Segment { entity: 1, anchor: 4, range: 10..13 },
        ],
        x_positions: (1..6).collect(),
        layout: Layout::Append,
        unresolved: 0,
        dropped: 0,
    }
}

fn values<S: Scalar>(g: &Graph<'_, S>, acts: &LayerActivations) -> Vec<Tensor<S>> {
    acts.layers.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn zero_alpha_is_bit_identical() {
    let c = cfg(16, 2, Precision::F32);
    let (n, store) = net::<f32>(&c, TaskKind::Classification(2), Some(6), 1);
    let inp = two_segment_input();
    let mut g = Graph::frozen(&store);
    let plain = n.encoder.forward(&mut g, &inp.ids, None, &[], None).unwrap();
    let plain = values(&g, &plain);
    let mut g = Graph::frozen(&store);
    let h = g.input(Tensor::from_fn(&[2, 6], |i| i as f32 * 0.3 - 1.0));
    let inj = n.proj.as_ref().unwrap().injection(&mut g, h, vec![2, 4], 0.0).unwrap();
    let with = n.encoder.forward(&mut g, &inp.ids, None, &[inj], None).unwrap();
    for (a, b) in plain.iter().zip(values(&g, &with)) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn injection_touches_only_anchor_rows() {
    let c = cfg(16, 1, Precision::F64);
    let (n, mut store) = net::<f64>(&c, TaskKind::Classification(2), Some(6), 2);
    randomize(&mut store, 3);
    let inp = two_segment_input();
    let mut g = Graph::frozen(&store);
    let base = n.encoder.embed(&mut g, &inp.ids, &[]).unwrap();
    let h = g.input(Tensor::full(&[2, 6], 0.7));
    let inj = n.proj.as_ref().unwrap().injection(&mut g, h, vec![2, 4], 0.3).unwrap();
    let c0 = n.encoder.embed(&mut g, &inp.ids, &[inj]).unwrap();
    let (b, c) = (g.value(base), g.value(c0));
    for r in 0..inp.len() {
        let same = b.row(r) == c.row(r);
        assert_eq!(same, r != 2 && r != 4, "row {r}");
    }
}

#[test]
fn visibility_mask_leaves_first_layer_of_plain_rows_unchanged() {
    let c = cfg(16, 2, Precision::F64);
    let (n, store) = net::<f64>(&c, TaskKind::Classification(2), None, 4);
    let inp = two_segment_input();
    let mask = Arc::new(crate::assemble::build_visibility_mask(&inp).unwrap());
    let mut g = Graph::frozen(&store);
    let attn = n.encoder.forward(&mut g, &inp.ids, Some(&mask), &[], None).unwrap();
    let x_only = &inp.ids[..inp.base_len];
    let plain = n.encoder.forward(&mut g, x_only, None, &[], None).unwrap();
    let (a, p) = (g.value(attn.layers[1]), g.value(plain.layers[1]));
    for r in 0..inp.base_len {
        let diff = a.row(r).iter().zip(p.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if r == 2 || r == 4 {
            assert!(diff > 1e-6, "anchor row {r} should see its description");
        } else {
            assert!(diff <= 1e-6, "row {r} differs by {diff}");
        }
    }
}

#[test]
fn full_mask_equals_no_mask() {
    let c = cfg(16, 2, Precision::F32);
    let (n, store) = net::<f32>(&c, TaskKind::Classification(2), None, 5);
    let inp = two_segment_input();
    let full = Arc::new(AttnMask::full(inp.len()));
    let mut g = Graph::frozen(&store);
    let a = n.encoder.forward(&mut g, &inp.ids, Some(&full), &[], None).unwrap();
    let b = n.encoder.forward(&mut g, &inp.ids, None, &[], None).unwrap();
    assert_eq!(g.value(a.top()).data(), g.value(b.top()).data());
}

#[test]
fn kt_emb_reads_first_description_token() {
    let c = cfg(16, 2, Precision::F64);
    let (n, store) = net::<f64>(&c, TaskKind::Classification(2), None, 6);
    let desc = [10usize, 11, 12, 13];
    let mut g = Graph::frozen(&store);
    let h = n.encoder.derive_kt_emb(&mut g, &desc).unwrap();
    let acts = n.encoder.forward(&mut g, &[2, 10, 11, 12, 13, 3], None, &[], None).unwrap();
    assert_eq!(g.value(h).data(), g.value(acts.top()).row(1));
    let again = n.encoder.derive_kt_emb(&mut g, &desc).unwrap();
    assert_eq!(g.value(h).data(), g.value(again).data());
    let other = n.encoder.derive_kt_emb(&mut g, &[10, 11, 14, 13]).unwrap();
    assert!(g.value(h).max_abs_diff(g.value(other)) > 1e-9);
    assert!(n.encoder.derive_kt_emb(&mut g, &[]).is_err());
}

#[test]
fn projection_rejects_wrong_width() {
    let c = cfg(16, 1, Precision::F32);
    let (n, store) = net::<f32>(&c, TaskKind::Regression, Some(8), 7);
    let mut g = Graph::frozen(&store);
    let h = g.input(Tensor::zeros(&[1, 5]));
    assert!(matches!(
        n.proj.as_ref().unwrap().injection(&mut g, h, vec![1], 0.1),
        Err(Error::Shape(_))
    ));
}

#[test]
fn anneal_schedule() {
    let s = AnnealSchedule::new(0.2, 100).unwrap();
    assert_eq!(s.alpha(0).unwrap(), 0.0);
    assert!((s.alpha(100).unwrap() - 0.2).abs() < 1e-15);
    let s3 = AnnealSchedule::new(0.3, 100).unwrap();
    assert!((s3.alpha(50).unwrap() - 0.15).abs() < 1e-15);
    assert!(s.alpha(101).is_err());
    let mut prev = 0.0;
    for t in 0..=100 {
        let a = s.alpha(t).unwrap();
        assert!(a >= prev);
        prev = a;
    }
}

#[test]
fn zero_activations_give_zero_logits() {
    let c = cfg(16, 1, Precision::F64);
    let (n, store) = net::<f64>(&c, TaskKind::Classification(3), None, 8);
    let mut g = Graph::frozen(&store);
    let top = g.input(Tensor::zeros(&[4, 16]));
    let out = n.head.forward(&mut g, top, &[1, 2]).unwrap();
    assert_eq!(g.value(out).shape(), [1, 3]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    let narrow = g.input(Tensor::zeros(&[4, 8]));
    assert!(n.head.forward(&mut g, narrow, &[1]).is_err());
}

#[test]
fn tagging_output_aligned_to_input() {
    let c = cfg(16, 2, Precision::F64);
    let (n, mut store) = net::<f64>(&c, TaskKind::SequenceLabeling(4), None, 9);
    // Without position information attention is permutation-equivariant, so
    // reordering descriptions must leave every input row untouched.
    let pos = store.id("enc.pos").unwrap();
    store.get_mut(pos).data_mut().fill(0.0);
    let inp = two_segment_input();
    let mut swapped = inp.clone();
    swapped.ids = vec![2, 5, 6, 7, 8, 9, 3, 12, 13, 3, 10, 11, 3];
    swapped.segments = vec![
        Segment { entity: 1, anchor: 4, range: 7..10 },
        Segment { entity: 0, anchor: 2, range: 10..13 },
    ];
    let run = |inp: &AssembledInput| {
        let mask = Arc::new(crate::assemble::build_visibility_mask(inp).unwrap());
        let mut g = Graph::frozen(&store);
        let acts = n.encoder.forward(&mut g, &inp.ids, Some(&mask), &[], None).unwrap();
        let out = n.head.forward(&mut g, acts.top(), &inp.x_positions).unwrap();
        g.value(out).clone()
    };
    let a = run(&inp);
    assert_eq!(a.shape(), [5, 4]);
    assert!(a.max_abs_diff(&run(&swapped)) < 1e-12);
}

#[test]
fn bind_after_checkpoint_reload() {
    let c = cfg(16, 2, Precision::F32);
    let (n, store) = net::<f32>(&c, TaskKind::Classification(2), Some(4), 10);
    let bytes = crate::numcore::checkpoint::encode(&store);
    let mut back: ParamStore<f32> = crate::numcore::checkpoint::decode(&bytes).unwrap();
    let m = Network::bind(&mut back, &c, TaskKind::Classification(2), Some(4)).unwrap();
    let inp = two_segment_input();
    let mut g1 = Graph::frozen(&store);
    let a = n.encoder.forward(&mut g1, &inp.ids, None, &[], None).unwrap();
    let mut g2 = Graph::frozen(&back);
    let b = m.encoder.forward(&mut g2, &inp.ids, None, &[], None).unwrap();
    assert_eq!(g1.value(a.top()).data(), g2.value(b.top()).data());
    assert!(Network::bind(&mut back, &c, TaskKind::Classification(3), Some(4)).is_err());
    assert!(Network::bind(&mut back, &c, TaskKind::Classification(2), None).is_err());
}

struct EncoderLoss {
    net: Network,
    inp: AssembledInput,
    mask: Arc<AttnMask>,
    h: Vec<f64>,
    alpha: f64,
}

impl LossBuilder for EncoderLoss {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Result<Var> {
        let h = g.input(Tensor::new(vec![2, 6], self.h.iter().map(|&v| S::of(v)).collect())?);
        let inj = self
            .net
            .proj
            .as_ref()
            .unwrap()
            .injection(g, h, vec![2, 4], self.alpha)?;
        let acts = self.net.encoder.forward(g, &self.inp.ids, Some(&self.mask), &[inj], None)?;
        let logits = self.net.head.forward(g, acts.top(), &self.inp.x_positions)?;
        g.softmax_xent(logits, &[1])
    }
}

fn encoder_loss(seed: u64) -> (EncoderLoss, ParamStore<f64>) {
    let c = cfg(16, 2, Precision::F64);
    let (n, mut store) = net::<f64>(&c, TaskKind::Classification(2), Some(6), seed);
    randomize(&mut store, seed + 100);
    let inp = two_segment_input();
    let mask = Arc::new(crate::assemble::build_visibility_mask(&inp).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        EncoderLoss {
            net: n,
            inp,
            mask,
            h,
            alpha: 0.25,
        },
        store,
    )
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (loss, store) = encoder_loss(11);
    // Key biases shift every score in a row equally, so their gradient is
    // exactly zero and finite differences would only measure round-off.
    let all: Vec<_> = store.ids().filter(|&id| !store.name(id).ends_with(".k.b")).collect();
    let r64 = gradient_check(&store, &loss, &all, 64, 1e-4, 1).unwrap();
    assert!(r64.max_rel_error < 1e-6, "64-bit: {}", r64.max_rel_error);
    let s32 = store.cast::<f32>();
    let r32 = gradient_check(&s32, &loss, &all, 64, 1e-3, 1).unwrap();
    assert!(r32.max_rel_error <= 1e-3, "32-bit: {}", r32.max_rel_error);
}

#[test]
fn injected_vector_gradient_vanishes_at_zero_alpha() {
    let (mut loss, store) = encoder_loss(12);
    for (alpha, zero) in [(0.0, true), (0.25, false)] {
        loss.alpha = alpha;
        let mut g = Graph::new(&store);
        let h = g.leaf(Tensor::new(vec![2, 6], loss.h.clone()).unwrap());
        let inj = loss.net.proj.as_ref().unwrap().injection(&mut g, h, vec![2, 4], alpha).unwrap();
        let acts = loss.net.encoder.forward(&mut g, &loss.inp.ids, Some(&loss.mask), &[inj], None).unwrap();
        let logits = loss.net.head.forward(&mut g, acts.top(), &[]).unwrap();
        let l = g.softmax_xent(logits, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        let gh = grads.leaf(h).unwrap();
        assert_eq!(gh.data().iter().all(|&v| v == 0.0), zero, "alpha {alpha}");
    }
}

#[test]
fn config_validation() {
    let mut c = EncoderConfig::new(10);
    assert!(c.validate().is_ok());
    c.heads = 3;
    assert!(c.validate().is_err());
    c.heads = 4;
    c.layers = 0;
    assert!(c.validate().is_err());
}

