//! End-to-end frame classifier.
//!
//! Per frame, HGA turns the patch grid and landmarks into `M` region tokens,
//! which are flattened and projected to the visual feature `x_v` (`D`).
//! Audio features are projected to `x_a` (`D`). The temporal part is either a
//! stack of residual AG-SSM layers `x <- x + AgSsm(x, x_a)` or, for the
//! framewise baseline, `x <- x_v + silu(W [x_v ; x_a] + b)`. A linear head
//! produces one logit per class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ag_ssm::{self, AgSsmContext, AgSsmParams};
use crate::asl::{asl_loss_logits, AslConfig};
use crate::error::{Error, Result};
use crate::hga::{self, map_landmarks_to_patches, FrameDims, GridDims, HgaContext, HgaParams, RoiSpec};
use crate::params::{Linear, Parameters};
use crate::rng::Rng;
use crate::synth::{SynthConfig, SynthSample};
use crate::tensor::{sigmoid, silu, silu_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    AgSsm,
    Framewise,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ag-ssm" => Ok(Self::AgSsm),
            "framewise" => Ok(Self::Framewise),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (ag-ssm | framewise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub state_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of each HGA region token.
    pub region_dim: usize,
}

/// Input geometry, taken from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d_v: usize,
    pub d_a: usize,
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl DataDims {
    pub fn of(cfg: &SynthConfig) -> Self {
        Self {
            d_v: cfg.d_v,
            d_a: cfg.d_a,
            classes: cfg.classes,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            frame_h: cfg.frame_h,
            frame_w: cfg.frame_w,
        }
    }

    fn grid(&self) -> GridDims {
        GridDims {
            h_patches: self.grid_h,
            w_patches: self.grid_w,
        }
    }

    fn frame(&self) -> FrameDims {
        FrameDims {
            height: self.frame_h,
            width: self.frame_w,
        }
    }

    fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Temporal {
    AgSsm(Vec<AgSsmParams>),
    Framewise(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hga: HgaParams,
    /// `M * region_dim -> D`
    pub vis: Linear,
    /// `D_a -> D`
    pub aud: Linear,
    pub temporal: Temporal,
    /// `D -> C`
    pub head: Linear,
}

fn prefixed<'a>(prefix: &'a str, f: &'a mut dyn FnMut(&str, &Tensor)) -> impl FnMut(&str, &Tensor) + 'a {
    move |name, t| f(&format!("{prefix}.{name}"), t)
}

fn prefixed_mut<'a>(prefix: &'a str, f: &'a mut dyn FnMut(&str, &mut Tensor)) -> impl FnMut(&str, &mut Tensor) + 'a {
    move |name, t| f(&format!("{prefix}.{name}"), t)
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hga.visit(&mut prefixed("hga", f));
        self.vis.visit(&mut prefixed("vis", f));
        self.aud.visit(&mut prefixed("aud", f));
        match &self.temporal {
            Temporal::AgSsm(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    let p = format!("ag_ssm{i}");
                    l.visit(&mut prefixed(&p, f));
                }
            }
            Temporal::Framewise(mix) => mix.visit(&mut prefixed("mix", f)),
        }
        self.head.visit(&mut prefixed("head", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hga.visit_mut(&mut prefixed_mut("hga", f));
        self.vis.visit_mut(&mut prefixed_mut("vis", f));
        self.aud.visit_mut(&mut prefixed_mut("aud", f));
        match &mut self.temporal {
            Temporal::AgSsm(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    let p = format!("ag_ssm{i}");
                    l.visit_mut(&mut prefixed_mut(&p, f));
                }
            }
            Temporal::Framewise(mix) => mix.visit_mut(&mut prefixed_mut("mix", f)),
        }
        self.head.visit_mut(&mut prefixed_mut("head", f));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub roi: RoiSpec,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, dims: DataDims, roi: RoiSpec, rng: &mut Rng) -> Result<Self> {
        if config.d_model == 0 || config.state_dim == 0 || config.region_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if config.kind == ModelKind::AgSsm && config.layers == 0 {
            return Err(Error::Config("an ag-ssm model needs at least one layer".into()));
        }
        let d = config.d_model;
        let hga = HgaParams::init(dims.d_v, config.heads, dims.d_v, config.region_dim, rng)?;
        let vis = Linear::init(d, roi.len() * config.region_dim, 1.0, rng);
        let aud = Linear::init(d, dims.d_a, 1.0, rng);
        let temporal = match config.kind {
            ModelKind::AgSsm => Temporal::AgSsm(
                (0..config.layers)
                    .map(|_| AgSsmParams::init(d, config.state_dim, rng))
                    .collect(),
            ),
            ModelKind::Framewise => Temporal::Framewise(Linear::init(d, 2 * d, 2.0, rng)),
        };
        let head = Linear::init(dims.classes, d, 1.0, rng);
        Ok(Self {
            config,
            dims,
            roi,
            params: ModelParams {
                hga,
                vis,
                aud,
                temporal,
                head,
            },
        })
    }

    /// Parameter count per top-level module, in traversal order.
    pub fn module_param_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.params.visit(&mut |name, t| {
            let module = name.split('.').next().unwrap_or(name).to_string();
            match out.last_mut() {
                Some((m, n)) if *m == module => *n += t.len(),
                _ => out.push((module, t.len())),
            }
        });
        out
    }

    fn check_sample(&self, s: &SynthSample, len: usize) -> Result<()> {
        let d = &self.dims;
        let ok = s.patch_tokens.len() == len * d.num_patches() * d.d_v
            && s.audio.len() == len * d.d_a
            && s.labels.len() == len * d.classes
            && s.landmarks.len() == len * hga::NUM_LANDMARKS * 2;
        if !ok {
            return Err(Error::shape(
                "model",
                "sample tensors do not match the model's input dimensions",
            ));
        }
        Ok(())
    }
}

enum TemporalTrace {
    AgSsm(Vec<AgSsmContext>),
    Framewise { cat: Vec<f64>, pre: Vec<f64> },
}

/// Saved activations of one sequence.
pub struct Trace {
    len: usize,
    hga: Vec<HgaContext>,
    regions: Vec<f64>,
    audio: Vec<f64>,
    temporal: TemporalTrace,
    head_in: Vec<f64>,
}

/// Window `[start, start + len)` of a sample.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub sample: &'a SynthSample,
    pub start: usize,
    pub len: usize,
}

impl<'a> Window<'a> {
    pub fn full(sample: &'a SynthSample, frames: usize) -> Self {
        Self {
            sample,
            start: 0,
            len: frames,
        }
    }
}

/// Logits `[len, C]` and the trace needed for [`backward`].
pub fn forward(model: &Model, w: Window<'_>) -> Result<(Vec<f64>, Trace)> {
    let dims = &model.dims;
    let total = w.sample.labels.len() / dims.classes.max(1);
    model.check_sample(w.sample, total)?;
    if w.len == 0 || w.start + w.len > total {
        return Err(Error::InvalidArgument(format!(
            "window {}..{} outside a {total}-frame sequence",
            w.start,
            w.start + w.len
        )));
    }
    let (n_v, d_v, d_a, d) = (dims.num_patches(), dims.d_v, dims.d_a, model.config.d_model);
    let m_dim = model.roi.len() * model.config.region_dim;
    let p = &model.params;

    let mut regions = Vec::with_capacity(w.len * m_dim);
    let mut hga_ctx = Vec::with_capacity(w.len);
    for t in w.start..w.start + w.len {
        let tokens: Vec<f64> = w.sample.patch_tokens[t * n_v * d_v..(t + 1) * n_v * d_v]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let sets = map_landmarks_to_patches(&w.sample.landmark_set(t), &model.roi, dims.grid(), dims.frame())?;
        let (out, ctx) = hga::forward_raw(&tokens, n_v, &sets, &p.hga)?;
        regions.extend_from_slice(&out);
        hga_ctx.push(ctx);
    }
    let x_v = p.vis.forward_rows(&regions, w.len);
    let audio: Vec<f64> = w.sample.audio[w.start * d_a..(w.start + w.len) * d_a]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let x_a = p.aud.forward_rows(&audio, w.len);

    let (head_in, temporal) = match &p.temporal {
        Temporal::AgSsm(layers) => {
            let mut x = x_v.clone();
            let mut ctxs = Vec::with_capacity(layers.len());
            for l in layers {
                let (y, ctx) = ag_ssm::forward_raw(&x, &x_a, w.len, l)?;
                crate::tensor::axpy(1.0, &y, &mut x);
                ctxs.push(ctx);
            }
            (x, TemporalTrace::AgSsm(ctxs))
        }
        Temporal::Framewise(mix) => {
            let mut cat = Vec::with_capacity(w.len * 2 * d);
            for t in 0..w.len {
                cat.extend_from_slice(&x_v[t * d..(t + 1) * d]);
                cat.extend_from_slice(&x_a[t * d..(t + 1) * d]);
            }
            let pre = mix.forward_rows(&cat, w.len);
            let x: Vec<f64> = x_v.iter().zip(&pre).map(|(v, &z)| v + silu(z)).collect();
            (x, TemporalTrace::Framewise { cat, pre })
        }
    };
    let logits = p.head.forward_rows(&head_in, w.len);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model logits".into()));
    }
    Ok((
        logits,
        Trace {
            len: w.len,
            hga: hga_ctx,
            regions,
            audio,
            temporal,
            head_in,
        },
    ))
}

/// Accumulates parameter gradients of `<d_logits, logits>` into `grads`.
pub fn backward(model: &Model, trace: &Trace, d_logits: &[f64], grads: &mut ModelParams) -> Result<()> {
    let p = &model.params;
    let (len, d, rd) = (trace.len, model.config.d_model, model.config.region_dim);
    if d_logits.len() != len * model.dims.classes {
        return Err(Error::shape("model backward", "logit gradient length"));
    }
    let mut dx = p.head.backward_rows(&trace.head_in, d_logits, len, &mut grads.head);
    let mut dx_a = vec![0.0; len * d];
    match (&trace.temporal, &p.temporal, &mut grads.temporal) {
        (TemporalTrace::AgSsm(ctxs), Temporal::AgSsm(layers), Temporal::AgSsm(g_layers)) => {
            for ((ctx, l), gl) in ctxs.iter().zip(layers).zip(g_layers.iter_mut()).rev() {
                let g = ag_ssm::ag_ssm_backward(ctx, l, &dx)?;
                gl.add_assign(&g.params);
                crate::tensor::axpy(1.0, &g.x_v, &mut dx);
                crate::tensor::axpy(1.0, &g.x_a, &mut dx_a);
            }
        }
        (TemporalTrace::Framewise { cat, pre }, Temporal::Framewise(mix), Temporal::Framewise(g_mix)) => {
            let d_pre: Vec<f64> = dx.iter().zip(pre).map(|(g, &z)| g * silu_grad(z)).collect();
            let d_cat = mix.backward_rows(cat, &d_pre, len, g_mix);
            for t in 0..len {
                crate::tensor::axpy(1.0, &d_cat[t * 2 * d..t * 2 * d + d], &mut dx[t * d..(t + 1) * d]);
                dx_a[t * d..(t + 1) * d].copy_from_slice(&d_cat[t * 2 * d + d..(t + 1) * 2 * d]);
            }
        }
        _ => {
            return Err(Error::shape(
                "model backward",
                "gradient buffer does not match the model kind",
            ))
        }
    }
    p.aud.backward_rows(&trace.audio, &dx_a, len, &mut grads.aud);
    let d_regions = p.vis.backward_rows(&trace.regions, &dx, len, &mut grads.vis);
    let m_dim = model.roi.len() * rd;
    for (t, ctx) in trace.hga.iter().enumerate() {
        hga::hga_backward_into(
            ctx,
            &p.hga,
            &d_regions[t * m_dim..(t + 1) * m_dim],
            &mut grads.hga,
            false,
        )?;
    }
    Ok(())
}

fn window_labels(w: &Window<'_>, classes: usize) -> Vec<f64> {
    w.sample.labels[w.start * classes..(w.start + w.len) * classes]
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

/// Mean loss over a batch of windows and the matching gradient. Windows are
/// processed concurrently; per-window gradients are summed in input order.
pub fn batch_loss_and_grad(model: &Model, windows: &[Window<'_>], loss: &AslConfig) -> Result<(f64, ModelParams)> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let classes = model.dims.classes;
    let per: Vec<Result<(f64, ModelParams)>> = windows
        .par_iter()
        .map(|w| {
            let (logits, trace) = forward(model, *w)?;
            let (l, dl) = asl_loss_logits(&logits, &window_labels(w, classes), classes, loss)?;
            let mut g = crate::params::zeros_like(&model.params);
            backward(model, &trace, &dl, &mut g)?;
            Ok((l, g))
        })
        .collect();
    let scale = 1.0 / windows.len() as f64;
    let mut total = 0.0;
    let mut grads = crate::params::zeros_like(&model.params);
    for (i, r) in per.into_iter().enumerate() {
        let (l, g) = r.map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} (batch item {i})")),
            other => other,
        })?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss of batch item {i}")));
        }
        total += l;
        grads.add_assign(&g);
    }
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Per-frame class probabilities `[frames, C]`.
pub fn predict(model: &Model, sample: &SynthSample) -> Result<Vec<f64>> {
    let frames = sample.labels.len() / model.dims.classes.max(1);
    let (logits, _) = forward(model, Window::full(sample, frames))?;
    Ok(logits.into_iter().map(sigmoid).collect())
}
