//! The gradient-check suite: every differentiable primitive and every
//! composite layer, checked against central differences in 64-bit.

use mvstr_tensor::gradcheck::{gradcheck, gradcheck_store, GradcheckOptions, GradcheckReport};
use mvstr_tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::cost::{build_cost_volume, SourceFeatures};
use crate::error::Result;
use crate::features::{extract_features, feature_layout, fuse_layout, fuse_upsampled};
use crate::hypotheses::{initial_hypotheses, DepthHypotheses};
use crate::nn::Layout;
use crate::pipeline::{ForwardOptions, Model};
use crate::regularize::{soft_argmin, unet3d, unet_layout, UNetConfig};
use crate::synth::{render_scene, Geometry, SceneSpec};
use crate::train::multiscale_loss;
use crate::transformer::{block_layout, layer_cr, layer_cs, layer_prefix, layer_s, transformer_layout, transformer_stack, LayerKind, StackConfig};

/// Tolerance for single operations.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for layers and pipelines built from many operations.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Replaces both tolerances when set.
    pub tol: Option<f64>,
    /// Only run checks whose name contains this string.
    pub filter: Option<String>,
}

type Check = (&'static str, bool, fn(&GradcheckOptions) -> Result<GradcheckReport>);

const CHECKS: &[Check] = &[
    ("matmul", true, check_matmul),
    ("batched_matmul", true, check_batched_matmul),
    ("conv2d", true, check_conv2d),
    ("conv3d", true, check_conv3d),
    ("layer_norm", true, check_layer_norm),
    ("softmax", true, check_softmax),
    ("grid_sample", true, check_grid_sample),
    ("resize_bilinear", true, check_resize),
    ("upsample_nearest", true, check_upsample),
    ("elementwise", true, check_elementwise),
    ("structural", true, check_structural),
    ("smooth_l1", true, check_smooth_l1),
    ("feature_net", false, check_feature_net),
    ("fuse_upsampled", false, check_fuse),
    ("layer_s", false, check_layer_s),
    ("layer_cr", false, check_layer_cr),
    ("layer_cs", false, check_layer_cs),
    ("transformer_stack", false, check_stack),
    ("build_cost_volume", false, check_cost_volume),
    ("unet3d+soft_argmin", false, check_unet_soft_argmin),
    ("multiscale_loss", false, check_multiscale_loss),
    ("full_pipeline", false, check_pipeline),
];

/// Names of all checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs the suite, one report per check.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for &(name, primitive, check) in CHECKS {
        if matches!(&opts.filter, Some(f) if !name.contains(f.as_str())) {
            continue;
        }
        let tol = opts.tol.unwrap_or(if primitive { PRIMITIVE_TOL } else { COMPOSITE_TOL });
        reports.push(check(&GradcheckOptions::with_tol(tol))?);
    }
    Ok(reports)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

fn check_matmul(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck("matmul", &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 5], 2)], |_, v| v[0].matmul(v[1]), o)?)
}

fn check_batched_matmul(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck(
        "batched_matmul",
        &[rand_tensor(&[2, 3, 4], 3), rand_tensor(&[4, 2], 4)],
        |_, v| v[0].matmul(v[1]),
        o,
    )?)
}

fn check_conv2d(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let inputs = [rand_tensor(&[1, 2, 5, 5], 5), rand_tensor(&[3, 2, 3, 3], 6), rand_tensor(&[3], 7)];
    Ok(gradcheck("conv2d", &inputs, |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1), o)?)
}

fn check_conv3d(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let inputs = [rand_tensor(&[1, 2, 4, 4, 4], 8), rand_tensor(&[2, 2, 3, 3, 3], 9), rand_tensor(&[2], 10)];
    Ok(gradcheck("conv3d", &inputs, |_, v| v[0].conv3d(v[1], Some(v[2]), [1; 3], [1; 3]), o)?)
}

fn check_layer_norm(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let inputs = [rand_tensor(&[2, 5, 3], 11), rand_tensor(&[5], 12), rand_tensor(&[5], 13)];
    Ok(gradcheck("layer_norm", &inputs, |_, v| v[0].layer_norm(1, v[1], v[2], 1e-5), o)?)
}

fn check_softmax(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck("softmax", &[rand_tensor(&[4, 3, 2], 14)], |_, v| v[0].softmax(0), o)?)
}

fn check_grid_sample(o: &GradcheckOptions) -> Result<GradcheckReport> {
    // Keep every coordinate away from integer values, where bilinear
    // interpolation has a kink.
    let mut r = rng(15);
    let grid = Tensor::from_fn(vec![1, 3, 4, 2], |i| {
        let limit = if i[3] == 0 { 4 } else { 3 };
        r.gen_range(0..limit) as f64 + r.gen_range(0.25..0.65)
    });
    let inputs = [rand_tensor(&[1, 2, 4, 5], 16), grid];
    Ok(gradcheck("grid_sample", &inputs, |_, v| Ok(v[0].grid_sample(v[1])?.0), o)?)
}

fn check_resize(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck("resize_bilinear", &[rand_tensor(&[1, 2, 3, 4], 17)], |_, v| v[0].resize_bilinear(6, 8), o)?)
}

fn check_upsample(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck(
        "upsample_nearest",
        &[rand_tensor(&[1, 2, 2, 3, 2], 18)],
        |_, v| v[0].upsample_nearest(&[2, 2, 2]),
        o,
    )?)
}

fn check_elementwise(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let b = rand_tensor(&[4], 20).map(|x| 1.5 + x * 0.5);
    let inputs = [rand_tensor(&[3, 4], 19), b];
    Ok(gradcheck(
        "elementwise",
        &inputs,
        |_, v| {
            let (a, b) = (v[0], v[1]);
            let s = a.add(b)?.mul(a)?.div(b)?;
            let e = a.exp().add(a.elu())?.add(a.relu().square())?;
            let m = s.sub(e)?.neg().scale(0.7).add_scalar(0.1);
            Var::concat(&[m.mean_dim(1)?, a.sum_dim(1)?, a.mean().reshape(&[1])?], 0)
        },
        o,
    )?)
}

fn check_structural(o: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(gradcheck(
        "structural",
        &[rand_tensor(&[2, 3, 4], 21)],
        |_, v| {
            let x = v[0].permute(&[2, 0, 1])?.pad(&[(1, 0), (0, 1), (2, 0)])?;
            x.narrow(0, 1, 3)?.transpose()?.reshape(&[3, 15])?.unsqueeze(0)?.squeeze(0)
        },
        o,
    )?)
}

fn check_smooth_l1(o: &GradcheckOptions) -> Result<GradcheckReport> {
    // Differences in both branches, none near the |d| = 1 switch.
    let a = Tensor::from_f64(vec![6], &[0.1, -0.4, 2.0, -3.0, 0.7, 5.0])?;
    let b = Tensor::from_f64(vec![6], &[0.3, 0.2, 0.1, 0.5, -0.1, 1.0])?;
    Ok(gradcheck("smooth_l1", &[a, b], |_, v| v[0].smooth_l1(v[1]), o)?)
}

/// Initialized parameters with every entry nudged by up to ±0.2.
pub fn perturbed_store(layout: &Layout, seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = layout.init(seed);
    // Perturb unit gammas and zero biases so every parameter affects the output generically.
    let mut r = rng(seed ^ 0xabc);
    for spec in &layout.specs {
        let t = store.get_mut(&spec.name).expect("initialized");
        let data = t.data().iter().map(|x| x + r.gen_range(-0.2..0.2)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }
    store
}

fn check_feature_net(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut layout = Layout::default();
    feature_layout(&mut layout, [4, 4, 4]);
    layout.push("image", &[2, 3, 8, 8], crate::nn::Init::Uniform(1.0));
    let store = perturbed_store(&layout, 30);
    let opts = GradcheckOptions { per_tensor: 12, ..o.clone() };
    Ok(gradcheck_store(
        "feature_net",
        &store,
        |_, p| {
            let f = extract_features(p, p.get("image"), [4, 4, 4], 1e-5)?;
            let parts = [f.f1.mean(), f.f2.square().mean(), f.f4.mul(f.f4)?.sum().scale(0.1)];
            Ok(Var::concat(&parts.map(|v| v.reshape(&[1]).expect("scalar")), 0)?)
        },
        &opts,
    )?)
}

fn check_fuse(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut layout = Layout::default();
    fuse_layout(&mut layout, "fuse", 3, 2, 4);
    layout.push("coarse", &[2, 3, 3, 4], crate::nn::Init::Uniform(1.0));
    layout.push("fine", &[2, 2, 6, 8], crate::nn::Init::Uniform(1.0));
    let store = perturbed_store(&layout, 31);
    Ok(gradcheck_store(
        "fuse_upsampled",
        &store,
        |_, p| Ok(fuse_upsampled(p, "fuse", p.get("coarse"), p.get("fine"))?),
        o,
    )?)
}

const TF_C: usize = 8;
const TF_J: usize = 12;
const HEADS: usize = 4;

fn block_store(kind: LayerKind, seqs: &[(&str, usize)], seed: u64) -> ParamStore<f64> {
    let mut layout = Layout::default();
    block_layout(&mut layout, &layer_prefix(0, kind), TF_C);
    for &(name, n) in seqs {
        layout.push(name, &[n, TF_J, TF_C], crate::nn::Init::Uniform(1.5));
    }
    perturbed_store(&layout, seed)
}

fn check_layer_s(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let store = block_store(LayerKind::S, &[("x", 2)], 32);
    let opts = GradcheckOptions { per_tensor: 16, ..o.clone() };
    Ok(gradcheck_store("layer_s", &store, |_, p| Ok(layer_s(p, 0, p.get("x"), HEADS, 1e-5)?), &opts)?)
}

fn check_layer_cr(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let store = block_store(LayerKind::Cr, &[("reference", 1), ("sources", 2)], 33);
    let opts = GradcheckOptions { per_tensor: 16, ..o.clone() };
    Ok(gradcheck_store(
        "layer_cr",
        &store,
        |_, p| Ok(layer_cr(p, 0, p.get("reference"), p.get("sources"), HEADS, 1e-5)?),
        &opts,
    )?)
}

fn check_layer_cs(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let store = block_store(LayerKind::Cs, &[("reference", 1), ("sources", 2)], 34);
    let opts = GradcheckOptions { per_tensor: 16, ..o.clone() };
    Ok(gradcheck_store(
        "layer_cs",
        &store,
        |_, p| Ok(layer_cs(p, 0, p.get("sources"), p.get("reference"), HEADS, 1e-5)?),
        &opts,
    )?)
}

fn check_stack(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let layers = 4;
    let mut layout = Layout::default();
    transformer_layout(&mut layout, 64, TF_C, layers);
    layout.push("features", &[3, TF_C, 8, 8], crate::nn::Init::Uniform(1.5));
    let store = perturbed_store(&layout, 35);
    let cfg = StackConfig {
        layers,
        heads: HEADS,
        eps: 1e-5,
        table_size: (8, 8),
    };
    let opts = GradcheckOptions { total: Some(160), ..o.clone() };
    Ok(gradcheck_store(
        "transformer_stack",
        &store,
        |_, p| Ok(transformer_stack(p, p.get("features"), &[4, 9, 2], &cfg)?),
        &opts,
    )?)
}

/// Two cameras 16×16 looking at a textured plane.
/// A tilted textured plane seen by `count` cameras at `size`×`size`.
pub fn small_scene(size: usize, count: usize) -> Result<Vec<crate::synth::RenderedView>> {
    let spec = SceneSpec {
        width: size,
        height: size,
        focal: size as f64,
        geometry: Geometry::Plane {
            point: [0.0, 0.0, 0.0],
            normal: [0.2, -0.1, -1.0],
        },
        rig: crate::synth::RigSpec {
            count,
            ..Default::default()
        },
        ..SceneSpec::default()
    };
    render_scene(&spec)
}

fn check_cost_volume(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let views = small_scene(8, 3)?;
    let (c, h, w) = (4, 8, 8);
    let mut layout = Layout::default();
    for name in ["ref", "src1", "src2"] {
        layout.push(name, &[c, h, w], crate::nn::Init::Uniform(1.0));
    }
    let store = perturbed_store(&layout, 36);
    let cam = &views[0].camera;
    let hyp = DepthHypotheses::broadcast(&initial_hypotheses(cam.depth_min, cam.depth_max, 5)?, h, w, 1);
    Ok(gradcheck_store(
        "build_cost_volume",
        &store,
        |_, p| {
            let sources = [
                SourceFeatures {
                    features: p.get("src2"),
                    camera: &views[2].camera,
                    view_id: 2,
                },
                SourceFeatures {
                    features: p.get("src1"),
                    camera: &views[1].camera,
                    view_id: 1,
                },
            ];
            Ok(build_cost_volume(p.get("ref"), cam, &sources, &hyp, 2)?.cost)
        },
        o,
    )?)
}

fn check_unet_soft_argmin(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = UNetConfig {
        base_channels: 4,
        levels: 2,
        eps: 1e-5,
    };
    let mut layout = Layout::default();
    unet_layout(&mut layout, "unet", 1, &cfg);
    layout.push("cost", &[1, 8, 8, 8], crate::nn::Init::Uniform(1.0));
    let store = perturbed_store(&layout, 37);
    let hyp: Tensor<f64> = DepthHypotheses::broadcast(&initial_hypotheses(1.0, 3.0, 8)?, 8, 8, 1).values;
    let opts = GradcheckOptions { per_tensor: 8, ..o.clone() };
    Ok(gradcheck_store(
        "unet3d+soft_argmin",
        &store,
        |_, p| {
            let logits = unet3d(p, "unet", p.get("cost"), &cfg)?;
            Ok(soft_argmin(logits, &hyp)?.depth)
        },
        &opts,
    )?)
}

fn check_multiscale_loss(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let gt = rand_tensor(&[8, 8], 40).map(|x| 2.0 + x);
    let mask = rand_tensor(&[8, 8], 41).map(|x| if x > -0.5 { 1.0 } else { 0.0 });
    // Predictions near the ground truth and far from it exercise both branches.
    let preds = [
        downsampled(&gt, 4).map(|x| x + 0.3),
        downsampled(&gt, 2).map(|x| x - 1.7),
        gt.zip_map(&rand_tensor(&[8, 8], 42), |g, r| g + 0.4 * r)?,
    ];
    Ok(gradcheck(
        "multiscale_loss",
        &preds,
        |_, v| Ok(multiscale_loss(v, &gt, &mask, &[0.5, 1.0, 2.0])?),
        o,
    )?)
}

fn downsampled(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    crate::train::downsample_nearest(x, f)
}

/// Configuration of the pipeline check: a 16×16 two-view problem.
pub fn pipeline_check_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.feature_channels = [4, 4, 8];
    cfg.model.transformer_layers = 1;
    cfg.model.groups = 4;
    cfg.model.unet_base_channels = 4;
    cfg.model.image_size = [16, 16];
    cfg.cascade.hypotheses = [8, 4, 4];
    cfg
}

fn check_pipeline(o: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = pipeline_check_config();
    let model = Model::new(&cfg);
    let store = perturbed_store(&model.layout(), 38);
    let scene = small_scene(16, 2)?;
    let views: Vec<_> = scene.iter().map(|v| v.view::<f64>()).collect();
    let (gt, mask) = (scene[0].depth.clone(), scene[0].valid.clone());

    // Hypotheses for stages 2 and 3 follow the detached previous depth; pin
    // them so the perturbed evaluations sample the same depths.
    let tape = Tape::new();
    let params = tape.bind(&store);
    let centers: Vec<Tensor<f64>> = model
        .forward(&params, &views, &ForwardOptions::default())?
        .iter()
        .filter_map(|s| s.center.clone())
        .collect();
    let fixed = ForwardOptions { centers: Some(centers) };
    let opts = GradcheckOptions { total: Some(40), ..o.clone() };
    Ok(gradcheck_store(
        "full_pipeline",
        &store,
        |_, p| {
            let stages = model.forward(p, &views, &fixed)?;
            let preds: Vec<_> = stages.iter().map(|s| s.depth).collect();
            Ok(multiscale_loss(&preds, &gt, &mask, &cfg.train.loss_weights)?)
        },
        &opts,
    )?)
}
