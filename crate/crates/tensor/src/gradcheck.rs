//! Central-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{ParamStore, Params, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Relative finite-difference step: `h = step · max(1, |x|)`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Entries probed per tensor (all entries if the tensor is smaller).
    pub per_tensor: usize,
    /// When set, probe this many (tensor, entry) pairs drawn across all
    /// tensors instead of `per_tensor` from each.
    pub total: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            per_tensor: 48,
            total: None,
            seed: 7,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub tol: f64,
    pub probes: Vec<Probe>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err < self.tol && p.rel_err.is_finite())
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: {} probes, max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.probes.len(),
            self.max_rel_err(),
            self.tol
        )
    }
}

/// Checks `f` against central differences with respect to every tensor of
/// `store`. A non-scalar output is contracted with fixed random weights.
pub fn gradcheck_store<F>(name: &str, store: &ParamStore<f64>, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &Params<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut contraction: Option<Tensor<f64>> = None;

    let mut evaluate = |store: &ParamStore<f64>, want_grads: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let tape = Tape::new();
        let params = tape.bind(store);
        let out = f(&tape, &params)?;
        let loss = if out.value().numel() == 1 {
            out.reshape(&[])?
        } else {
            let w = contraction.get_or_insert_with(|| {
                let mut wrng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
                Tensor::uniform(out.shape(), -1.0, 1.0, &mut wrng)
            });
            out.mul_const(w)?.sum()
        };
        let value = loss.value().item();
        if !want_grads {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((value, Some(params.iter().map(|(_, v)| grads.get_or_zeros(v)).collect())))
    };

    let (_, grads) = evaluate(store, true)?;
    let grads = grads.expect("requested");
    let names: Vec<String> = store.names().map(str::to_string).collect();

    let mut picks: Vec<(usize, usize)> = Vec::new();
    match opts.total {
        Some(total) => {
            for _ in 0..total {
                let t = rng.gen_range(0..names.len());
                let n = store.get(&names[t]).expect("listed").numel();
                picks.push((t, rng.gen_range(0..n)));
            }
            picks.sort_unstable();
            picks.dedup();
        }
        None => {
            for (t, name) in names.iter().enumerate() {
                let n = store.get(name).expect("listed").numel();
                if n <= opts.per_tensor {
                    picks.extend((0..n).map(|i| (t, i)));
                } else {
                    let mut idx = sample(&mut rng, n, opts.per_tensor).into_vec();
                    idx.sort_unstable();
                    picks.extend(idx.into_iter().map(|i| (t, i)));
                }
            }
        }
    }

    let mut probes = Vec::with_capacity(picks.len());
    for (t, index) in picks {
        let name = &names[t];
        let base = store.get(name).expect("listed");
        let x = base.data()[index];
        let h = opts.step * x.abs().max(1.0);
        let mut shifted = |delta: f64| -> Result<f64> {
            let mut data = base.to_vec();
            data[index] = x + delta;
            let mut s = store.clone();
            s.insert(name.clone(), Tensor::new(base.shape().to_vec(), data)?);
            Ok(evaluate(&s, false)?.0)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let analytic = grads[t].data()[index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        probes.push(Probe {
            tensor: name.clone(),
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        tol: opts.tol,
        probes,
    })
}

/// [`gradcheck_store`] over a positional list of inputs.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    // Zero-padded names keep BTreeMap order equal to input order.
    let store: ParamStore<f64> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("input{i:03}"), t.clone()))
        .collect();
    gradcheck_store(
        name,
        &store,
        |tape, params| {
            let vars: Vec<Var<'_, f64>> = params.iter().map(|(_, v)| v).collect();
            f(tape, &vars)
        },
        opts,
    )
}
