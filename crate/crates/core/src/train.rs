//! Multi-scale depth loss, Adam, and the training loop.

use std::collections::BTreeMap;

use mvstr_tensor::{ParamStore, Scalar, Tape, Tensor, Var};

use crate::camera::CameraView;
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{Dataset, ViewPair};
use crate::synth::{render_scene, toy_specs, RenderedView};
use crate::pipeline::{ForwardOptions, Model};

/// Nearest-neighbour downsampling of `[H, W]` by an integer factor: output
/// pixel `(i, j)` takes input pixel `(i·f, j·f)`.
pub fn downsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(vec![h / factor, w / factor], |i| x.get(&[i[0] * factor, i[1] * factor]))
}

/// `Σ_m α_m · mean_{mask} smooth_l1(pred_m, gt_m)` with ground truth and mask
/// downsampled to each prediction's resolution. Ground truth outside the mask
/// never reaches the arithmetic.
pub fn multiscale_loss<'t, T: Scalar>(
    preds: &[Var<'t, T>],
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    weights: &[f64],
) -> Result<Var<'t, T>> {
    if preds.is_empty() || preds.len() != weights.len() {
        return Err(Error::Usage(format!("{} predictions for {} loss weights", preds.len(), weights.len())));
    }
    if gt.rank() != 2 || gt.shape() != mask.shape() {
        return Err(Error::Input(format!("gt {:?} and mask {:?} must be matching [H, W]", gt.shape(), mask.shape())));
    }
    let tape = preds[0].tape();
    let mut total: Option<Var<'t, T>> = None;
    for (pred, &alpha) in preds.iter().zip(weights) {
        let ps = pred.shape();
        if ps.len() != 2 || gt.shape()[0] % ps[0] != 0 || gt.shape()[0] / ps[0] != gt.shape()[1] / ps[1] {
            return Err(Error::Input(format!("prediction {ps:?} is not an integer downscale of {:?}", gt.shape())));
        }
        let f = gt.shape()[0] / ps[0];
        let m = downsample_nearest(mask, f).map(|v| if v > T::zero() { T::one() } else { T::zero() });
        let count = m.sum().to_f64();
        if count == 0.0 {
            return Err(Error::Usage(format!("empty ground-truth mask at {}×{}", ps[0], ps[1])));
        }
        let g = downsample_nearest(gt, f).zip_map(&m, |g, m| if m > T::zero() { g } else { T::zero() })?;
        let term = pred
            .smooth_l1(tape.constant(g))?
            .mul_const(&m)?
            .sum()
            .scale(alpha / count);
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut values: Vec<T> = param.to_vec();
            for (i, gi) in g.data().iter().enumerate() {
                let gi = Scalar::to_f64(*gi);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                values[i] = T::lit(Scalar::to_f64(values[i]) - lr * mhat / (vhat.sqrt() + self.eps));
            }
            *param = Tensor::new(param.shape().to_vec(), values)?;
        }
        Ok(())
    }
}

/// Learning rate during 1-based `epoch`: halved at each milestone reached.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let halvings = cfg.lr_halving_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr * 0.5f64.powi(halvings as i32)
}

/// One supervised example: reference first, then its sources.
#[derive(Debug, Clone)]
pub struct Sample<T: Scalar> {
    pub views: Vec<CameraView<T>>,
    /// `[H, W]`
    pub depth: Tensor<T>,
    /// `[H, W]`, nonzero where the depth is valid
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    /// One sample per pair, supervised by the reference's depth.
    pub fn from_pairs(views: &[RenderedView], pairs: &[ViewPair]) -> Result<Vec<Self>> {
        let find = |id: usize| {
            views
                .iter()
                .find(|v| v.view_id == id)
                .ok_or_else(|| Error::Input(format!("view {id} is not rendered")))
        };
        pairs
            .iter()
            .map(|pair| {
                let reference = find(pair.reference)?;
                let mut list = vec![reference.view()];
                for &id in &pair.sources {
                    list.push(find(id)?.view());
                }
                Ok(Sample {
                    views: list,
                    depth: reference.depth.cast(),
                    mask: reference.valid.cast(),
                })
            })
            .collect()
    }
}

/// One sample per index entry of a stored scene, keeping the first
/// `num_sources` sources of each. The mask is where the stored depth is positive.
pub fn samples_from_dataset<T: Scalar>(data: &Dataset, num_sources: usize) -> Result<Vec<Sample<T>>> {
    data.pairs
        .iter()
        .map(|pair| {
            let reference = data.view(pair.reference)?;
            let depth = reference
                .depth
                .as_ref()
                .ok_or_else(|| Error::Input(format!("{}: view {} has no depth", data.dir.display(), pair.reference)))?;
            let mut views = vec![reference.view()];
            for &id in pair.sources.iter().take(num_sources) {
                views.push(data.view(id)?.view());
            }
            Ok(Sample {
                views,
                depth: depth.cast(),
                mask: depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 }).cast(),
            })
        })
        .collect()
}

/// Each view of a scene as reference, with every other view as a source.
pub fn all_pairs(views: &[RenderedView]) -> Vec<ViewPair> {
    views
        .iter()
        .map(|r| ViewPair {
            reference: r.view_id,
            sources: views.iter().filter(|s| s.view_id != r.view_id).map(|s| s.view_id).collect(),
        })
        .collect()
}

/// The toy dataset: two scenes of three views each, every view used once as
/// the reference, giving six samples.
pub fn toy_samples<T: Scalar>(size: usize) -> Result<Vec<Sample<T>>> {
    let mut samples = Vec::new();
    for spec in toy_specs(size) {
        let views = render_scene(&spec)?;
        samples.extend(Sample::from_pairs(&views, &all_pairs(&views))?);
    }
    Ok(samples)
}

/// Mean absolute depth error over the mask, after downsampling the ground
/// truth to the prediction's resolution.
pub fn masked_mae(pred: &Tensor<f64>, depth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let factor = depth.shape()[0] / pred.shape()[0].max(1);
    if factor == 0 || depth.shape()[0] != pred.shape()[0] * factor || depth.shape()[1] != pred.shape()[1] * factor {
        return Err(Error::Input(format!("cannot compare a {:?} prediction with {:?} ground truth", pred.shape(), depth.shape())));
    }
    let (gt, m) = (downsample_nearest(depth, factor), downsample_nearest(mask, factor));
    let (mut err, mut count) = (0.0, 0usize);
    for ((&p, &g), &k) in pred.data().iter().zip(gt.data()).zip(m.data()) {
        if k > 0.0 {
            err += (p - g).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("mask selects no pixels".into()));
    }
    Ok(err / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} loss {} lr {}", self.step, self.loss, self.lr)
    }
}

/// Forward, loss and gradients for one sample.
pub fn loss_and_grads<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    sample: &Sample<T>,
    weights: &[f64],
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let params = tape.bind(store);
    let stages = model.forward(&params, &sample.views, &ForwardOptions::default())?;
    let preds: Vec<_> = stages.iter().map(|s| s.depth).collect();
    let loss = multiscale_loss(&preds, &sample.depth, &sample.mask, weights)?;
    let value = loss.value().item().to_f64();
    let grads = tape.backward(loss)?;
    Ok((value, grads.named(&params)))
}

/// Trains `store` in place, cycling through `samples` in order; one epoch is
/// one pass. Calls `on_step` after every step.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    store: &mut ParamStore<T>,
    samples: &[Sample<T>],
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    let model = Model::new(cfg);
    model.check_params(store)?;
    let t = &cfg.train;
    let total = t.max_steps.unwrap_or(usize::MAX).min(t.epochs * samples.len());
    let mut adam = Adam::new(t);
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let epoch = step / samples.len() + 1;
        let lr = learning_rate(t, epoch);
        let (loss, grads) = loss_and_grads(&model, store, &samples[step % samples.len()], &t.loss_weights)?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { step: step + 1, loss });
        }
        adam.update(store, &grads, lr)?;
        let entry = StepLog { step: step + 1, loss, lr };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
