//! Landmark-guided alignment of local and global patch features.
//!
//! For each frame the patch grid `F_v` (`[N_v, D_v]`) and the 68 facial
//! landmarks produce one token per region of interest:
//!
//! 1. landmarks of region `m` are clamped into the frame and mapped onto the
//!    patch grid, giving a patch index set `P_m`;
//! 2. `f_loc_m` is the mean of the patches in `P_m`, `f_glob` the mean of all
//!    patches;
//! 3. `f_hat_m` is multi-head cross-attention with query `W_Q f_loc_m` over
//!    keys `F_v W_K` and values `F_v W_V` (scaled by `1/sqrt(d_k)`), followed
//!    by an output projection;
//! 4. `f_tilde_m = MLP([f_hat_m ; f_loc_m ; f_glob])`, hidden width `D_v`,
//!    activation after the first layer only.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Linear, Parameters};
use crate::rng::Rng;
use crate::tensor::{
    axpy, dot, matmul_at_into, matmul_bt_into, matmul_into, silu, silu_grad, softmax_in_place, Tensor,
};

pub const NUM_LANDMARKS: usize = 68;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub h_patches: usize,
    pub w_patches: usize,
}

impl GridDims {
    pub fn num_patches(&self) -> usize {
        self.h_patches * self.w_patches
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates".into()));
        }
        Ok(Self { points })
    }

    /// From interleaved `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(xy: &[f64]) -> Result<Self> {
        if xy.len() % 2 != 0 {
            return Err(Error::shape("LandmarkSet::from_flat", "odd coordinate count"));
        }
        Self::new(xy.chunks_exact(2).map(|p| (p[0], p[1])).collect())
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub landmarks: Vec<usize>,
}

/// Named landmark groups; order defines the output row order of HGA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSpec {
    regions: Vec<Region>,
}

impl RoiSpec {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Config("RoI spec has no regions".into()));
        }
        for r in &regions {
            if r.landmarks.is_empty() {
                return Err(Error::Config(format!("region {:?} is empty", r.name)));
            }
            if let Some(&i) = r.landmarks.iter().find(|&&i| i >= NUM_LANDMARKS) {
                return Err(Error::Config(format!(
                    "region {:?} references landmark {i}, valid range is 0..{}",
                    r.name,
                    NUM_LANDMARKS - 1
                )));
            }
        }
        Ok(Self { regions })
    }

    /// Seven regions over the 68-point layout: both eyebrows, both eyes,
    /// nose, mouth and jaw line.
    pub fn default_68() -> Self {
        let r = |name: &str, lo: usize, hi: usize| Region {
            name: name.to_string(),
            landmarks: (lo..=hi).collect(),
        };
        Self {
            regions: vec![
                r("left_eyebrow", 22, 26),
                r("right_eyebrow", 17, 21),
                r("left_eye", 42, 47),
                r("right_eye", 36, 41),
                r("nose", 27, 35),
                r("mouth", 48, 67),
                r("jaw", 0, 16),
            ],
        }
    }

    /// Parses `name: 1 2 5-9, 12` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut regions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("line {}: expected `name: indices`", lineno + 1)))?;
            let mut landmarks = Vec::new();
            for tok in rest.split(|c: char| c == ',' || c.is_whitespace()) {
                if tok.is_empty() {
                    continue;
                }
                let bad = || Error::Config(format!("line {}: bad index {tok:?}", lineno + 1));
                if let Some((lo, hi)) = tok.split_once('-') {
                    let lo: usize = lo.parse().map_err(|_| bad())?;
                    let hi: usize = hi.parse().map_err(|_| bad())?;
                    if lo > hi {
                        return Err(bad());
                    }
                    landmarks.extend(lo..=hi);
                } else {
                    landmarks.push(tok.parse().map_err(|_| bad())?);
                }
            }
            regions.push(Region {
                name: name.trim().to_string(),
                landmarks,
            });
        }
        Self::new(regions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

impl fmt::Display for RoiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.regions {
            let idx: Vec<String> = r.landmarks.iter().map(|i| i.to_string()).collect();
            writeln!(f, "{}: {}", r.name, idx.join(" "))?;
        }
        Ok(())
    }
}

/// Patch tokens of one frame, `[h_patches * w_patches, D_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub dims: GridDims,
    pub tokens: Tensor,
}

impl PatchGrid {
    pub fn new(dims: GridDims, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != dims.num_patches() {
            return Err(Error::shape(
                "PatchGrid::new",
                format!(
                    "grid {}x{} needs [{}, D_v] tokens, got {:?}",
                    dims.h_patches,
                    dims.w_patches,
                    dims.num_patches(),
                    tokens.shape()
                ),
            ));
        }
        Ok(Self { dims, tokens })
    }

    pub fn num_patches(&self) -> usize {
        self.dims.num_patches()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Patch index of a pixel coordinate after clamping into the frame.
pub fn patch_index(x: f64, y: f64, grid: GridDims, frame: FrameDims) -> usize {
    let xc = x.clamp(0.0, (frame.width - 1) as f64);
    let yc = y.clamp(0.0, (frame.height - 1) as f64);
    let cell_w = frame.width as f64 / grid.w_patches as f64;
    let cell_h = frame.height as f64 / grid.h_patches as f64;
    let col = ((xc / cell_w).floor() as usize).min(grid.w_patches - 1);
    let row = ((yc / cell_h).floor() as usize).min(grid.h_patches - 1);
    row * grid.w_patches + col
}

/// Patch index sets `P_1..P_M`, each sorted and deduplicated.
pub fn map_landmarks_to_patches(
    landmarks: &LandmarkSet,
    roi: &RoiSpec,
    grid: GridDims,
    frame: FrameDims,
) -> Result<Vec<Vec<usize>>> {
    if grid.h_patches == 0 || grid.w_patches == 0 || frame.height == 0 || frame.width == 0 {
        return Err(Error::InvalidArgument(
            "grid and frame dimensions must be positive".into(),
        ));
    }
    roi.regions
        .iter()
        .map(|r| {
            let mut set = Vec::with_capacity(r.landmarks.len());
            for &k in &r.landmarks {
                let &(x, y) = landmarks.points.get(k).ok_or_else(|| {
                    Error::shape(
                        "map_landmarks_to_patches",
                        format!("region {:?} needs landmark {k}, only {} given", r.name, landmarks.len()),
                    )
                })?;
                set.push(patch_index(x, y, grid, frame));
            }
            set.sort_unstable();
            set.dedup();
            Ok(set)
        })
        .collect()
}

fn mean_rows(tokens: &[f64], dim: usize, rows: impl Iterator<Item = usize>) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; dim];
    let mut count = 0;
    for r in rows {
        axpy(1.0, &tokens[r * dim..(r + 1) * dim], &mut acc);
        count += 1;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    (acc, count)
}

/// Mean of the selected patch tokens.
pub fn pool_local(grid: &PatchGrid, patches: &[usize]) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("empty patch set".into()));
    }
    if let Some(&p) = patches.iter().find(|&&p| p >= grid.num_patches()) {
        return Err(Error::InvalidArgument(format!(
            "patch index {p} out of range for {} patches",
            grid.num_patches()
        )));
    }
    Ok(mean_rows(grid.tokens.data(), grid.dim(), patches.iter().copied()).0)
}

/// Global average pooling over all patches.
pub fn pool_global(grid: &PatchGrid) -> Vec<f64> {
    mean_rows(grid.tokens.data(), grid.dim(), 0..grid.num_patches()).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    /// Linear MLP, for constructed-weight tests.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgaParams {
    pub heads: usize,
    pub activation: Activation,
    /// `[D_v, D_v]` each, stored `[out, in]`, heads stacked along `out`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub out: Linear,
    /// `3 D_v -> hidden`
    pub mlp_in: Linear,
    /// `hidden -> D`
    pub mlp_out: Linear,
}

impl HgaParams {
    pub fn init(d_v: usize, heads: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_v % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide D_v = {d_v}")));
        }
        let square = |rng: &mut Rng| {
            let std = (1.0 / d_v as f64).sqrt();
            Tensor::matrix(d_v, d_v, (0..d_v * d_v).map(|_| std * rng.normal()).collect()).expect("square")
        };
        Ok(Self {
            heads,
            activation: Activation::Silu,
            w_q: square(rng),
            w_k: square(rng),
            w_v: square(rng),
            out: Linear::init(d_v, d_v, 1.0, rng),
            mlp_in: Linear::init(hidden, 3 * d_v, 2.0, rng),
            mlp_out: Linear::init(d_out, hidden, 1.0, rng),
        })
    }

    pub fn d_v(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.d_v() / self.heads
    }

    pub fn d_out(&self) -> usize {
        self.mlp_out.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d_v = self.d_v();
        if self.heads == 0 || d_v % self.heads != 0 {
            return Err(Error::shape(
                "HgaParams",
                format!("{} heads vs D_v = {d_v}", self.heads),
            ));
        }
        for (name, t) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if t.shape() != [d_v, d_v] {
                return Err(Error::shape("HgaParams", format!("{name} has shape {:?}", t.shape())));
            }
        }
        if self.out.in_dim() != d_v
            || self.out.out_dim() != d_v
            || self.mlp_in.in_dim() != 3 * d_v
            || self.mlp_out.in_dim() != self.mlp_in.out_dim()
        {
            return Err(Error::shape("HgaParams", "projection/MLP dimensions are inconsistent"));
        }
        Ok(())
    }
}

impl Parameters for HgaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("out.weight", &self.out.weight);
        f("out.bias", &self.out.bias);
        f("mlp_in.weight", &self.mlp_in.weight);
        f("mlp_in.bias", &self.mlp_in.bias);
        f("mlp_out.weight", &self.mlp_out.weight);
        f("mlp_out.bias", &self.mlp_out.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("out.weight", &mut self.out.weight);
        f("out.bias", &mut self.out.bias);
        f("mlp_in.weight", &mut self.mlp_in.weight);
        f("mlp_in.bias", &mut self.mlp_in.bias);
        f("mlp_out.weight", &mut self.mlp_out.weight);
        f("mlp_out.bias", &mut self.mlp_out.bias);
    }
}

/// Result of attending with one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    /// Output after projection, `[D_v]`.
    pub output: Vec<f64>,
    /// Attention weights, `[heads, N_v]`.
    pub weights: Vec<f64>,
    q: Vec<f64>,
    concat: Vec<f64>,
}

/// Shared per-frame key/value projections.
struct KeyValues {
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project_kv(tokens: &[f64], n_v: usize, params: &HgaParams) -> KeyValues {
    let d_v = params.d_v();
    let mut k = vec![0.0; n_v * d_v];
    matmul_bt_into(tokens, params.w_k.data(), &mut k, n_v, d_v, d_v);
    let mut v = vec![0.0; n_v * d_v];
    matmul_bt_into(tokens, params.w_v.data(), &mut v, n_v, d_v, d_v);
    KeyValues { k, v }
}

fn attend(query: &[f64], kv: &KeyValues, n_v: usize, params: &HgaParams) -> Attended {
    let (d_v, heads, dk) = (params.d_v(), params.heads, params.head_dim());
    let mut q = vec![0.0; d_v];
    matmul_bt_into(query, params.w_q.data(), &mut q, 1, d_v, d_v);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = vec![0.0; heads * n_v];
    let mut concat = vec![0.0; d_v];
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        let w = &mut weights[h * n_v..(h + 1) * n_v];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = scale * dot(qh, &kv.k[i * d_v + h * dk..i * d_v + (h + 1) * dk]);
        }
        softmax_in_place(w);
        let oh = &mut concat[h * dk..(h + 1) * dk];
        for (i, &wi) in w.iter().enumerate() {
            axpy(wi, &kv.v[i * d_v + h * dk..i * d_v + (h + 1) * dk], oh);
        }
    }
    let output = params.out.forward_rows(&concat, 1);
    Attended {
        output,
        weights,
        q,
        concat,
    }
}

/// Multi-head cross-attention of one query over all patch tokens.
pub fn mhca(query: &[f64], keys_values: &Tensor, params: &HgaParams) -> Result<Attended> {
    params.validate()?;
    let d_v = params.d_v();
    if query.len() != d_v || keys_values.shape().len() != 2 || keys_values.shape()[1] != d_v {
        return Err(Error::shape(
            "mhca",
            format!(
                "query {} and tokens {:?} vs D_v = {d_v}",
                query.len(),
                keys_values.shape()
            ),
        ));
    }
    let n_v = keys_values.shape()[0];
    if n_v == 0 {
        return Err(Error::InvalidArgument("no patches to attend over".into()));
    }
    let kv = project_kv(keys_values.data(), n_v, params);
    Ok(attend(query, &kv, n_v, params))
}

struct Fused {
    cat: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn fuse(f_hat: &[f64], f_loc: &[f64], f_glob: &[f64], params: &HgaParams) -> Fused {
    let mut cat = Vec::with_capacity(3 * f_hat.len());
    cat.extend_from_slice(f_hat);
    cat.extend_from_slice(f_loc);
    cat.extend_from_slice(f_glob);
    let pre = params.mlp_in.forward_rows(&cat, 1);
    let hidden: Vec<f64> = pre.iter().map(|&x| params.activation.apply(x)).collect();
    let out = params.mlp_out.forward_rows(&hidden, 1);
    Fused { cat, pre, hidden, out }
}

/// `MLP([f_hat ; f_loc ; f_glob])`.
pub fn fuse_region(f_hat: &[f64], f_loc: &[f64], f_glob: &[f64], params: &HgaParams) -> Result<Vec<f64>> {
    let d_v = params.d_v();
    if f_hat.len() != d_v || f_loc.len() != d_v || f_glob.len() != d_v {
        return Err(Error::shape(
            "fuse_region",
            format!(
                "inputs of length {}, {}, {} vs D_v = {d_v}",
                f_hat.len(),
                f_loc.len(),
                f_glob.len()
            ),
        ));
    }
    Ok(fuse(f_hat, f_loc, f_glob, params).out)
}

struct RegionTrace {
    patches: Vec<usize>,
    f_loc: Vec<f64>,
    attended: Attended,
    fused: Fused,
}

/// Saved forward state of one frame.
pub struct HgaContext {
    tokens: Vec<f64>,
    n_v: usize,
    kv: KeyValues,
    regions: Vec<RegionTrace>,
}

impl HgaContext {
    /// Attention weights of region `m`, `[heads, N_v]`.
    pub fn attention(&self, m: usize) -> &[f64] {
        &self.regions[m].attended.weights
    }

    pub fn patch_sets(&self) -> Vec<Vec<usize>> {
        self.regions.iter().map(|r| r.patches.clone()).collect()
    }
}

/// Aligned region tokens `[M, D]` for one frame.
pub fn hga_forward(
    grid: &PatchGrid,
    landmarks: &LandmarkSet,
    roi: &RoiSpec,
    frame: FrameDims,
    params: &HgaParams,
) -> Result<(Tensor, HgaContext)> {
    let sets = map_landmarks_to_patches(landmarks, roi, grid.dims, frame)?;
    hga_forward_sets(grid, &sets, params)
}

/// [`hga_forward`] with precomputed patch sets.
pub fn hga_forward_sets(grid: &PatchGrid, sets: &[Vec<usize>], params: &HgaParams) -> Result<(Tensor, HgaContext)> {
    params.validate()?;
    if grid.dim() != params.d_v() {
        return Err(Error::shape(
            "hga_forward",
            format!("tokens have D_v = {}, params expect {}", grid.dim(), params.d_v()),
        ));
    }
    let (out, ctx) = forward_raw(grid.tokens.data(), grid.num_patches(), sets, params)?;
    Ok((Tensor::matrix(sets.len(), params.d_out(), out)?, ctx))
}

/// Slice-level forward used by the model; `tokens` is `[n_v, D_v]`.
pub fn forward_raw(
    tokens: &[f64],
    n_v: usize,
    sets: &[Vec<usize>],
    params: &HgaParams,
) -> Result<(Vec<f64>, HgaContext)> {
    let d_v = params.d_v();
    let kv = project_kv(tokens, n_v, params);
    let (f_glob, _) = mean_rows(tokens, d_v, 0..n_v);
    let mut out = Vec::with_capacity(sets.len() * params.d_out());
    let mut regions = Vec::with_capacity(sets.len());
    for set in sets {
        if set.is_empty() || set.iter().any(|&p| p >= n_v) {
            return Err(Error::InvalidArgument(format!(
                "patch set {set:?} is empty or out of range for {n_v} patches"
            )));
        }
        let (f_loc, _) = mean_rows(tokens, d_v, set.iter().copied());
        let attended = attend(&f_loc, &kv, n_v, params);
        let fused = fuse(&attended.output, &f_loc, &f_glob, params);
        out.extend_from_slice(&fused.out);
        regions.push(RegionTrace {
            patches: set.clone(),
            f_loc,
            attended,
            fused,
        });
    }
    Ok((
        out,
        HgaContext {
            tokens: tokens.to_vec(),
            n_v,
            kv,
            regions,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct HgaGrads {
    pub params: HgaParams,
    /// `[N_v, D_v]`, present when requested.
    pub tokens: Option<Vec<f64>>,
}

/// Gradients of `<upstream, F_V_align>`; `grads` accumulates parameter
/// gradients across calls. Returns the patch-token gradient when asked.
pub fn hga_backward_into(
    ctx: &HgaContext,
    params: &HgaParams,
    upstream: &[f64],
    grads: &mut HgaParams,
    want_tokens: bool,
) -> Result<Option<Vec<f64>>> {
    let (d_v, heads, dk, d_out) = (params.d_v(), params.heads, params.head_dim(), params.d_out());
    let n_v = ctx.n_v;
    if upstream.len() != ctx.regions.len() * d_out {
        return Err(Error::shape(
            "hga_backward",
            format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                ctx.regions.len() * d_out
            ),
        ));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dk_all = vec![0.0; n_v * d_v];
    let mut dv_all = vec![0.0; n_v * d_v];
    let mut d_glob = vec![0.0; d_v];
    let mut d_tokens = want_tokens.then(|| vec![0.0; n_v * d_v]);

    for (m, r) in ctx.regions.iter().enumerate() {
        let g_out = &upstream[m * d_out..(m + 1) * d_out];
        let d_hidden = params
            .mlp_out
            .backward_rows(&r.fused.hidden, g_out, 1, &mut grads.mlp_out);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&r.fused.pre)
            .map(|(g, &x)| g * params.activation.grad(x))
            .collect();
        let d_cat = params.mlp_in.backward_rows(&r.fused.cat, &d_pre, 1, &mut grads.mlp_in);
        let d_hat = &d_cat[..d_v];
        let mut d_loc = d_cat[d_v..2 * d_v].to_vec();
        axpy(1.0, &d_cat[2 * d_v..], &mut d_glob);

        let d_concat = params.out.backward_rows(&r.attended.concat, d_hat, 1, &mut grads.out);
        let mut dq = vec![0.0; d_v];
        let mut d_alpha = vec![0.0; n_v];
        for h in 0..heads {
            let hs = h * dk..(h + 1) * dk;
            let w = &r.attended.weights[h * n_v..(h + 1) * n_v];
            let doh = &d_concat[hs.clone()];
            for i in 0..n_v {
                let row = i * d_v + h * dk;
                d_alpha[i] = dot(doh, &ctx.kv.v[row..row + dk]);
                axpy(w[i], doh, &mut dv_all[row..row + dk]);
            }
            let mean: f64 = dot(w, &d_alpha);
            let qh = &r.attended.q[hs.clone()];
            for i in 0..n_v {
                let ds = w[i] * (d_alpha[i] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let row = i * d_v + h * dk;
                axpy(ds, &ctx.kv.k[row..row + dk], &mut dq[hs.clone()]);
                axpy(ds, qh, &mut dk_all[row..row + dk]);
            }
        }
        matmul_at_into(&dq, &r.f_loc, grads.w_q.data_mut(), d_v, 1, d_v);
        matmul_into(&dq, params.w_q.data(), &mut d_loc, 1, d_v, d_v);

        if let Some(dt) = d_tokens.as_mut() {
            let inv = 1.0 / r.patches.len() as f64;
            for &p in &r.patches {
                axpy(inv, &d_loc, &mut dt[p * d_v..(p + 1) * d_v]);
            }
        }
    }

    matmul_at_into(&dk_all, &ctx.tokens, grads.w_k.data_mut(), d_v, n_v, d_v);
    matmul_at_into(&dv_all, &ctx.tokens, grads.w_v.data_mut(), d_v, n_v, d_v);
    if let Some(dt) = d_tokens.as_mut() {
        matmul_into(&dk_all, params.w_k.data(), dt, n_v, d_v, d_v);
        matmul_into(&dv_all, params.w_v.data(), dt, n_v, d_v, d_v);
        let inv = 1.0 / n_v as f64;
        for p in 0..n_v {
            axpy(inv, &d_glob, &mut dt[p * d_v..(p + 1) * d_v]);
        }
    }
    Ok(d_tokens)
}

/// Gradients for all parameters and the patch tokens.
pub fn hga_backward(ctx: &HgaContext, params: &HgaParams, upstream: &[f64]) -> Result<HgaGrads> {
    let mut grads = crate::params::zeros_like(params);
    let tokens = hga_backward_into(ctx, params, upstream, &mut grads, true)?;
    Ok(HgaGrads { params: grads, tokens })
}
