use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

/// Builds a scalar loss on a graph. Generic over precision so the same loss
/// can be differentiated at the model's precision and probed numerically at
/// 64 bits.
pub trait LossBuilder {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Denominator floor used for every sample.
    pub floor: f64,
    pub samples: Vec<GradSample>,
}

/// Smallest denominator as a fraction of the largest analytic gradient
/// entry over the checked parameters. Entries far below that are compared
/// against it instead of themselves, since neither precision resolves them.
pub const SCALE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval64<L: LossBuilder>(store: &ParamStore<f64>, loss: &L) -> Result<f64> {
    let mut g = Graph::frozen(store);
    let l = loss.build(&mut g)?;
    let v = g.value(l);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares backpropagated gradients against finite differences for
/// `samples` entries drawn round-robin from `subset`.
///
/// Analytic gradients are taken at the store's own precision. The numeric
/// side always runs in 64-bit on the same parameter values using the
/// fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, so the reported error
/// measures the backward pass rather than finite-difference round-off.
/// Differences are taken pairwise so a flat loss gives exactly zero.
/// Relative errors use the floor described at [`SCALE_FLOOR`].
pub fn gradient_check<S: Scalar, L: LossBuilder>(
    store: &ParamStore<S>,
    loss: &L,
    subset: &[ParamId],
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Invalid("gradient check step must be positive".into()));
    }
    if subset.is_empty() {
        return Err(Error::Invalid("gradient check needs at least one parameter".into()));
    }
    let grads = {
        let mut g = Graph::new(store);
        let l = loss.build(&mut g)?;
        g.backward(l)?
    };
    let scale = subset
        .iter()
        .filter_map(|&pid| grads.param(pid))
        .flat_map(|t| t.data().iter().map(|v| v.f64().abs()))
        .fold(0.0, f64::max);
    let floor = (SCALE_FLOOR * scale).max(1e-8);
    let mut probe = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let pid = subset[s % subset.len()];
        let n = probe.get(pid).len();
        let index = rng.gen_range(0..n);
        let analytic = grads
            .param(pid)
            .map_or(0.0, |t| t.data()[index].f64());
        let x0 = probe.get(pid).data()[index];
        let mut at = |delta: f64| -> Result<f64> {
            probe.get_mut(pid).data_mut()[index] = x0 + delta;
            eval64(&probe, loss)
        };
        let (p2, p1, m1, m2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
        probe.get_mut(pid).data_mut()[index] = x0;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let rel_error = relative_error(analytic, numeric, floor);
        out.push(GradSample {
            param: pid,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = out.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        floor,
        samples: out,
    })
}
