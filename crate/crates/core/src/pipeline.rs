//! The full network: features, transformer stack, and the three-stage
//! cascade of cost volumes, U-Nets and depth regression.

use mvstr_tensor::{ParamStore, Params, Scalar, Tape, Tensor, Var};

use crate::camera::CameraView;
use crate::config::{CascadeConfig, ModelConfig, RunConfig, STAGES};
use crate::cost::{build_cost_volume, SourceFeatures};
use crate::error::{Error, Result};
use crate::features::{extract_features, feature_layout, fuse_layout, fuse_upsampled};
use crate::hypotheses::{initial_hypotheses, refine_hypotheses, DepthHypotheses};
use crate::nn::Layout;
use crate::regularize::{confidence, soft_argmin, unet3d, unet_layout, UNetConfig};
use crate::transformer::{transformer_layout, transformer_stack, StackConfig};

/// Resolution factor of each stage, coarsest first.
pub const STAGE_SCALES: [usize; STAGES] = [4, 2, 1];

/// Hypotheses may not leave `[LOW·depth_min, HIGH·depth_max]`.
pub const RANGE_MARGIN: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub model: ModelConfig,
    pub cascade: CascadeConfig,
}

/// Per-stage result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct StageOutput<'t, T: Scalar> {
    /// `[h, w]`
    pub depth: Var<'t, T>,
    /// `[D, h, w]`
    pub prob: Var<'t, T>,
    /// `[h, w]`, in `[0, 1]`
    pub confidence: Tensor<T>,
    pub hypotheses: DepthHypotheses,
    /// Upsampled previous depth the hypotheses were centered on (stages 2+).
    pub center: Option<Tensor<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Fixed hypothesis centers for stages 2 and 3, replacing the upsampled
    /// previous depth. Lets finite differences see a fixed sampling pattern.
    pub centers: Option<Vec<Tensor<f64>>>,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            model: cfg.model.clone(),
            cascade: cfg.cascade.clone(),
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.model.unet_base_channels,
            levels: self.model.unet_levels,
            eps: self.model.norm_eps,
        }
    }

    pub fn stack_config(&self) -> StackConfig {
        let [h, w] = self.model.image_size;
        StackConfig {
            layers: self.model.transformer_layers,
            heads: self.model.heads,
            eps: self.model.norm_eps,
            table_size: (h / 4, w / 4),
        }
    }

    /// Feature width consumed by each stage's cost volume.
    pub fn stage_channels(&self) -> [usize; STAGES] {
        let [c1, c2, c4] = self.model.feature_channels;
        [c4, c2, c1]
    }

    pub fn layout(&self) -> Layout {
        let m = &self.model;
        let [c1, c2, c4] = m.feature_channels;
        let mut layout = Layout::default();
        feature_layout(&mut layout, m.feature_channels);
        let (h, w) = self.stack_config().table_size;
        transformer_layout(&mut layout, h * w, c4, m.transformer_layers);
        fuse_layout(&mut layout, "fuse2", c4, c2, c2);
        fuse_layout(&mut layout, "fuse3", c2, c1, c1);
        let unet = self.unet_config();
        for s in 0..STAGES {
            unet_layout(&mut layout, &format!("unet{}", s + 1), m.groups, &unet);
        }
        layout
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        self.layout().init(seed)
    }

    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        self.layout().check(store).map_err(Error::Config)
    }

    /// Runs the cascade on `views`, where `views[0]` is the reference.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Params<'t, T>,
        views: &[CameraView<T>],
        opts: &ForwardOptions,
    ) -> Result<Vec<StageOutput<'t, T>>> {
        let (reference, sources) = views
            .split_first()
            .filter(|(_, s)| !s.is_empty())
            .ok_or_else(|| Error::Usage("need a reference view and at least one source".into()))?;
        let (h, w) = (reference.height(), reference.width());
        if views.iter().any(|v| v.height() != h || v.width() != w) {
            return Err(Error::Input("all views must share one resolution".into()));
        }
        let tape = p.get(crate::transformer::POS).tape();
        let mut pixels = Vec::with_capacity(views.len() * 3 * h * w);
        for v in views {
            pixels.extend_from_slice(v.image.data());
        }
        let images = tape.constant(Tensor::new(vec![views.len(), 3, h, w], pixels)?);

        let m = &self.model;
        let pyramid = extract_features(p, images, m.feature_channels, m.norm_eps)?;
        let ids: Vec<usize> = views.iter().map(|v| v.view_id).collect();
        let t4 = transformer_stack(p, pyramid.f4, &ids, &self.stack_config())?;
        let fused2 = fuse_upsampled(p, "fuse2", t4, pyramid.f2)?;
        let fused3 = fuse_upsampled(p, "fuse3", fused2, pyramid.f1)?;
        let stage_features = [t4, fused2, fused3];

        let cam = &reference.camera;
        let (dmin, dmax) = (cam.depth_min, cam.depth_max);
        let base_interval = (dmax - dmin) / (self.cascade.hypotheses[0] - 1) as f64;
        let bounds = (RANGE_MARGIN.0 * dmin, RANGE_MARGIN.1 * dmax);
        let unet = self.unet_config();

        let mut outputs: Vec<StageOutput<'t, T>> = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let scale = STAGE_SCALES[s];
            let (sh, sw) = (h / scale, w / scale);
            let d = self.cascade.hypotheses[s];
            let (hyp, center) = match outputs.last() {
                None => (DepthHypotheses::broadcast(&initial_hypotheses(dmin, dmax, d)?, sh, sw, 1), None),
                Some(prev) => {
                    let center = match &opts.centers {
                        Some(c) => c.get(s - 1).cloned().ok_or_else(|| Error::Usage(format!("no fixed center for stage {}", s + 1)))?,
                        None => upsample_depth(&prev.depth.value().cast::<f64>(), sh, sw),
                    };
                    if center.shape() != [sh, sw] {
                        return Err(Error::Input(format!("stage {} center must be {sh}×{sw}", s + 1)));
                    }
                    let interval = base_interval * self.cascade.interval_ratios[s];
                    (refine_hypotheses(&center, d, interval, bounds, s + 1)?, Some(center))
                }
            };

            let factor = 1.0 / scale as f64;
            let ref_cam = cam.scaled(factor);
            let src_cams: Vec<_> = sources.iter().map(|v| v.camera.scaled(factor)).collect();
            let feats = stage_features[s];
            let c = feats.shape()[1];
            let view_feat = |i: usize| -> Result<Var<'t, T>> { Ok(feats.narrow(0, i, 1)?.reshape(&[c, sh, sw])?) };
            let src_inputs = sources
                .iter()
                .zip(&src_cams)
                .enumerate()
                .map(|(i, (v, camera))| {
                    Ok(SourceFeatures {
                        features: view_feat(i + 1)?,
                        camera,
                        view_id: v.view_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let volume = build_cost_volume(view_feat(0)?, &ref_cam, &src_inputs, &hyp, m.groups)?;
            let logits = unet3d(p, &format!("unet{}", s + 1), volume.cost, &unet)?;
            let reg = soft_argmin(logits, &hyp.values.cast::<T>())?;
            outputs.push(StageOutput {
                depth: reg.depth,
                confidence: confidence(&reg.prob.value()),
                prob: reg.prob,
                hypotheses: hyp,
                center,
            });
        }
        Ok(outputs)
    }
}

/// Depth maps of an inference run, detached from the tape.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// One `[H/s, W/s]` map per stage, coarsest first.
    pub depths: Vec<Tensor<f64>>,
    /// Finest-stage confidence, `[H, W]`.
    pub confidence: Tensor<f64>,
}

impl Prediction {
    pub fn depth(&self) -> &Tensor<f64> {
        self.depths.last().expect("a prediction has at least one stage")
    }
}

impl Model {
    /// Forward pass without gradients.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, views: &[CameraView<T>]) -> Result<Prediction> {
        let tape = Tape::new();
        let params = tape.bind(store);
        let stages = self.forward(&params, views, &ForwardOptions::default())?;
        let confidence = stages.last().map(|s| s.confidence.cast()).unwrap_or_else(|| Tensor::zeros(vec![0, 0]));
        Ok(Prediction {
            depths: stages.iter().map(|s| s.depth.value().cast()).collect(),
            confidence,
        })
    }
}

/// Bilinear resize of a depth map with the same sampling convention as the
/// feature upsampling: output pixel `i` reads input position `i·in/out`.
pub fn upsample_depth(depth: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let d = depth.data();
    Tensor::from_fn(vec![out_h, out_w], |i| {
        let y = (i[0] as f64 * sy).min((h - 1) as f64);
        let x = (i[1] as f64 * sx).min((w - 1) as f64);
        let (y0, x0) = ((y.floor() as usize).min(h.saturating_sub(2)), (x.floor() as usize).min(w.saturating_sub(2)));
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
