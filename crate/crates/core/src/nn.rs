//! Parameter layouts, initialization, and the small building blocks shared by
//! the networks.

use mvstr_tensor::{ParamStore, Params, Result as TResult, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter shapes; initialization follows this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// Weight `[out, in, k...]` with He init plus a zero bias `[out]`.
    pub fn conv(&mut self, prefix: &str, out: usize, inp: usize, kernel: &[usize]) {
        let mut shape = vec![out, inp];
        shape.extend_from_slice(kernel);
        let fan_in = inp * kernel.iter().product::<usize>();
        self.push(format!("{prefix}.weight"), &shape, Init::HeUniform { fan_in });
        self.push(format!("{prefix}.bias"), &[out], Init::Zeros);
    }

    /// Weight `[in, out]` applied as `x W + b`.
    pub fn linear(&mut self, prefix: &str, inp: usize, out: usize) {
        self.push(format!("{prefix}.weight"), &[inp, out], Init::HeUniform { fan_in: inp });
        self.push(format!("{prefix}.bias"), &[out], Init::Zeros);
    }

    pub fn norm(&mut self, prefix: &str, channels: usize) {
        self.push(format!("{prefix}.gamma"), &[channels], Init::Ones);
        self.push(format!("{prefix}.beta"), &[channels], Init::Zeros);
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws every parameter from one seeded stream, in layout order.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in &self.specs {
            let t = match s.init {
                Init::HeUniform { fan_in } => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(s.shape.clone(), -a, a, &mut rng)
                }
                Init::Uniform(a) => Tensor::uniform(s.shape.clone(), -a, a, &mut rng),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::ones(s.shape.clone()),
            };
            store.insert(s.name.clone(), t);
        }
        store
    }

    /// Checks that `store` holds exactly these names with these shapes.
    pub fn check<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), String> {
        for s in &self.specs {
            match store.get(&s.name) {
                None => return Err(format!("missing parameter {}", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(format!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape))
                }
                _ => {}
            }
        }
        if store.len() != self.specs.len() {
            let known: std::collections::BTreeSet<&str> = self.specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = store.names().filter(|n| !known.contains(n)).collect();
            return Err(format!("unexpected parameters {extra:?}"));
        }
        Ok(())
    }
}

/// `x W + b` over the last dim of a rank-2 or rank-3 input.
pub fn linear<'t, T: Scalar>(p: &Params<'t, T>, prefix: &str, x: Var<'t, T>) -> TResult<Var<'t, T>> {
    x.matmul(p.get(&format!("{prefix}.weight")))?
        .add(p.get(&format!("{prefix}.bias")))
}

/// Layer norm over `dim` with the affine pair stored under `prefix`.
pub fn norm<'t, T: Scalar>(p: &Params<'t, T>, prefix: &str, x: Var<'t, T>, dim: usize, eps: f64) -> TResult<Var<'t, T>> {
    x.layer_norm(dim, p.get(&format!("{prefix}.gamma")), p.get(&format!("{prefix}.beta")), eps)
}

/// 2-D convolution with the weight and, if present, the bias stored under `prefix`.
pub fn conv2d<'t, T: Scalar>(p: &Params<'t, T>, prefix: &str, x: Var<'t, T>, stride: usize) -> TResult<Var<'t, T>> {
    let w = p.get(&format!("{prefix}.weight"));
    let pad = w.shape()[2] / 2;
    x.conv2d(w, p.try_get(&format!("{prefix}.bias")), stride, pad)
}

pub fn conv3d<'t, T: Scalar>(p: &Params<'t, T>, prefix: &str, x: Var<'t, T>, stride: usize) -> TResult<Var<'t, T>> {
    let w = p.get(&format!("{prefix}.weight"));
    let pad = w.shape()[2] / 2;
    x.conv3d(w, p.try_get(&format!("{prefix}.bias")), [stride; 3], [pad; 3])
}
