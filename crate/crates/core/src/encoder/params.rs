use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-limit, limit]`.
    Uniform(f64),
    /// Glorot uniform from the first two dimensions.
    Xavier,
}

/// Creates parameters on first use, or binds to existing ones of the same
/// name (checkpoint reload) after checking their shape.
pub(crate) struct Declare<'a, S: Scalar> {
    pub store: &'a mut ParamStore<S>,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub declared: usize,
}

impl<'a, S: Scalar> Declare<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Declare {
            store,
            rng,
            declared: 0,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.declared += 1;
        if let Some(id) = self.store.id(name) {
            let got = self.store.get(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
            return Ok(id);
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
        };
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, S::one()),
            Init::Uniform(l) => uniform(shape, n, l, rng),
            Init::Xavier => {
                let l = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                uniform(shape, n, l, rng)
            }
        };
        self.store.add(name, t)
    }
}

fn uniform<S: Scalar>(shape: &[usize], n: usize, limit: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let data = (0..n).map(|_| S::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}
