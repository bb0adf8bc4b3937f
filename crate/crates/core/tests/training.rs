use std::collections::BTreeMap;

use mvstr_core::config::RunConfig;
use mvstr_core::pipeline::Model;
use mvstr_core::train::{learning_rate, loss_and_grads, multiscale_loss, toy_samples, train, Adam, Sample, StepLog};
use mvstr_core::verify::{perturbed_store, pipeline_check_config, small_scene};
use mvstr_core::Error;
use mvstr_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stage_preds(gt: &Tensor<f64>, offset: f64) -> Vec<Tensor<f64>> {
    [4, 2, 1]
        .iter()
        .map(|&f| {
            let (h, w) = (gt.shape()[0] / f, gt.shape()[1] / f);
            Tensor::from_fn(vec![h, w], |i| gt.get(&[i[0] * f, i[1] * f]) + offset)
        })
        .collect()
}

fn loss_value(preds: &[Tensor<f64>], gt: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64, Error> {
    let tape = Tape::new();
    let vars: Vec<_> = preds.iter().map(|p| tape.constant(p.clone())).collect();
    Ok(multiscale_loss(&vars, gt, mask, &[0.5, 1.0, 2.0])?.value().item())
}

#[test]
fn constant_error_of_two_gives_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = Tensor::from_fn(vec![16, 16], |_| rng.gen_range(2.0..4.0));
    let mask = Tensor::ones(vec![16, 16]);
    assert_eq!(loss_value(&stage_preds(&gt, 0.0), &gt, &mask).unwrap(), 0.0);
    let loss = loss_value(&stage_preds(&gt, 2.0), &gt, &mask).unwrap();
    assert!((loss - 5.25).abs() < 1e-12, "loss {loss}");
}

#[test]
fn ground_truth_outside_the_mask_is_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = Tensor::from_fn(vec![16, 16], |_| rng.gen_range(2.0..4.0));
    let mask = Tensor::from_fn(vec![16, 16], |i| ((i[0] / 4 + i[1] / 4) % 2) as f64);
    let preds: Vec<_> = stage_preds(&gt, 0.0).iter().map(|p| p.map(|x| x + 0.3 * (x * 7.0).sin())).collect();
    let base = loss_value(&preds, &gt, &mask).unwrap();
    assert!(base > 0.0);
    let noisy = gt.zip_map(&mask, |g, m| if m > 0.0 { g } else { f64::NAN }).unwrap();
    assert_eq!(loss_value(&preds, &noisy, &mask).unwrap().to_bits(), base.to_bits());
    let empty = Tensor::zeros(vec![16, 16]);
    assert!(matches!(loss_value(&preds, &gt, &empty), Err(Error::Usage(_))));
}

fn single_param(value: Vec<f64>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![value.len()], value).unwrap());
    store
}

#[test]
fn adam_zero_gradient_leaves_parameters_and_first_step_moves_by_lr() {
    let cfg = RunConfig::default().train;
    let mut store = single_param(vec![0.5, -1.0, 2.0]);
    let mut adam = Adam::new(&cfg);
    let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![3]))]);
    adam.update(&mut store, &zero, cfg.lr).unwrap();
    assert_eq!(store.get("w").unwrap().data(), &[0.5, -1.0, 2.0]);

    let mut store = single_param(vec![0.5, -1.0, 2.0]);
    let mut adam = Adam::new(&cfg);
    let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], vec![3.0, -0.01, 1e4]).unwrap())]);
    adam.update(&mut store, &g, cfg.lr).unwrap();
    let after = store.get("w").unwrap().data().to_vec();
    for (i, (before, sign)) in [(0.5, 1.0), (-1.0, -1.0), (2.0, 1.0)].iter().enumerate() {
        let step = before - after[i];
        assert!((step - sign * cfg.lr).abs() < 1e-6 * cfg.lr, "step {step}");
    }
}

#[test]
fn schedule_halves_at_each_milestone() {
    let cfg = RunConfig::default().train;
    let lrs: Vec<f64> = [1, 9, 10, 11, 12, 13, 14, 16].iter().map(|&e| learning_rate(&cfg, e)).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 1.25e-4]);
    let log = StepLog { step: 3, loss: 0.25, lr: 5e-4 };
    assert_eq!(log.to_string(), "step 3 loss 0.25 lr 0.0005");
}

#[test]
fn gradient_reaches_every_parameter() {
    let cfg = pipeline_check_config();
    let model = Model::new(&cfg);
    let store = perturbed_store(&model.layout(), 3);
    let scene = small_scene(16, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = Sample {
        views: scene
            .iter()
            .map(|v| {
                let mut view = v.view::<f64>();
                let noisy = view.image.data().iter().map(|x| (x + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
                view.image = Tensor::new(view.image.shape().to_vec(), noisy).unwrap();
                view
            })
            .collect(),
        depth: scene[0].depth.clone(),
        mask: scene[0].valid.clone(),
    };
    let (loss, grads) = loss_and_grads(&model, &store, &sample, &cfg.train.loss_weights).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let names: Vec<&str> = store.names().collect();
    assert_eq!(grads.len(), names.len());
    for name in names {
        let g = &grads[name];
        assert!(g.all_finite(), "{name} has a non-finite gradient");
        let zeros = g.data().iter().filter(|&&x| x == 0.0).count();
        assert!(zeros < g.numel(), "{name} gets no gradient");
    }
    for group in ["feat.", "pos", "tf0.s.", "tf0.cr.", "tf0.cs.", "fuse2.", "fuse3.", "unet1.", "unet2.", "unet3."] {
        assert!(grads.keys().any(|k| k.starts_with(group)), "no parameters in {group}");
    }
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model.feature_channels = [8, 8, 8];
    cfg.model.transformer_layers = 1;
    cfg.model.unet_base_channels = 4;
    cfg.model.image_size = [32, 32];
    cfg.cascade.hypotheses = [8, 4, 4];
    cfg.train.max_steps = Some(3);
    cfg
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let cfg = tiny_config();
    let samples = toy_samples::<f32>(32).unwrap();
    assert_eq!(samples.len(), 6);
    assert!(samples.iter().all(|s| s.views.len() == 1 + cfg.train.num_sources));
    let model = Model::new(&cfg);
    let run = || {
        let mut store = model.init::<f32>(cfg.seed);
        let mut seen = Vec::new();
        let log = train(&cfg, &mut store, &samples, |l| seen.push(l.step)).unwrap();
        (store, log, seen)
    };
    let (a, log_a, seen) = run();
    let (b, log_b, _) = run();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(log_a, log_b);
    for (name, t) in a.iter() {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(b.get(name).unwrap()), "{name} differs");
    }
    let init = model.init::<f32>(cfg.seed);
    assert!(a.iter().any(|(name, t)| t != init.get(name).unwrap()));
}

#[test]
fn non_finite_inputs_abort_training() {
    let cfg = tiny_config();
    let mut samples = toy_samples::<f32>(32).unwrap();
    samples.truncate(1);
    samples[0].views[1].image = samples[0].views[1].image.map(|_| f32::NAN);
    let mut store = Model::new(&cfg).init::<f32>(cfg.seed);
    let err = train(&cfg, &mut store, &samples, |_| {}).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}
