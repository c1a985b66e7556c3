//! Audio-guided selective scan layer.
//!
//! Per frame `t` with visual feature `x_v` and audio feature `x_a` (both `D`):
//!
//! ```text
//! s_t   = W_s [x_v ; x_a] + b_s                       descriptor, D
//! Δ_t   = softplus(delta_base + W_Δ s_t)              per channel, D
//! B_t   = W_B s_t,  C_t = W_C s_t                     shared across channels, N
//! u_t   = x_v ⊙ σ(W_g x_a)                            audio gate, D
//! h_t,d = exp(Δ_t,d a_d) ⊙ h_t-1,d + zoh(Δ_t,d, a_d) B_t u_t,d
//! y_t,d = <C_t, h_t,d>
//! ```
//!
//! with `a_d = -exp(a_log[d])` and `h_0 = 0`. Each of the `D` channels owns an
//! `N`-dimensional state and is scanned independently.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng::Rng;
use crate::ssm::{scan_backward_with_states, scan_with_states, zoh_gain, zoh_gain_derivative, Steps};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, sigmoid, softplus, softplus_inverse, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AgSsmParams {
    /// `[D, 2D]`, visual half first.
    pub w_s: Tensor,
    pub b_s: Tensor,
    /// `[D, D]`
    pub w_delta: Tensor,
    /// Per-channel offset inside the softplus, `[D]`.
    pub delta_base: Tensor,
    /// `[N, D]`
    pub w_b: Tensor,
    /// `[N, D]`
    pub w_c: Tensor,
    /// `[D, D]`
    pub w_g: Tensor,
    /// `[D, N]`, evolution rates are `-exp(a_log)`.
    pub a_log: Tensor,
}

impl AgSsmParams {
    pub fn zeros(d_model: usize, state_dim: usize) -> Self {
        Self {
            w_s: Tensor::zeros(&[d_model, 2 * d_model]),
            b_s: Tensor::zeros(&[d_model]),
            w_delta: Tensor::zeros(&[d_model, d_model]),
            delta_base: Tensor::zeros(&[d_model]),
            w_b: Tensor::zeros(&[state_dim, d_model]),
            w_c: Tensor::zeros(&[state_dim, d_model]),
            w_g: Tensor::zeros(&[d_model, d_model]),
            a_log: Tensor::zeros(&[d_model, state_dim]),
        }
    }

    /// Random initialization: `a = -(1..=N)` per channel and `Δ` spread
    /// log-uniformly over `[dt_min, dt_max]` through `delta_base`.
    pub fn init(d_model: usize, state_dim: usize, rng: &mut Rng) -> Self {
        Self::init_with_dt(d_model, state_dim, 1e-2, 2e-1, rng)
    }

    pub fn init_with_dt(d_model: usize, state_dim: usize, dt_min: f64, dt_max: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d_model, state_dim);
        let gauss = |t: &mut Tensor, std: f64, rng: &mut Rng| {
            t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        };
        let d = d_model as f64;
        gauss(&mut p.w_s, (1.0 / (2.0 * d)).sqrt(), rng);
        gauss(&mut p.w_delta, 0.1 / d.sqrt(), rng);
        gauss(&mut p.w_b, (1.0 / d).sqrt(), rng);
        gauss(&mut p.w_c, (1.0 / d).sqrt(), rng);
        gauss(&mut p.w_g, (1.0 / d).sqrt(), rng);
        for v in p.delta_base.data_mut() {
            let dt = (dt_min.ln() + rng.uniform() * (dt_max.ln() - dt_min.ln())).exp();
            *v = softplus_inverse(dt);
        }
        for row in 0..d_model {
            for n in 0..state_dim {
                p.a_log.data_mut()[row * state_dim + n] = ((n + 1) as f64).ln();
            }
        }
        p
    }

    pub fn d_model(&self) -> usize {
        self.b_s.len()
    }

    pub fn state_dim(&self) -> usize {
        self.w_b.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d_model(), self.state_dim());
        let expect: [(&str, &Tensor, Vec<usize>); 8] = [
            ("w_s", &self.w_s, vec![d, 2 * d]),
            ("b_s", &self.b_s, vec![d]),
            ("w_delta", &self.w_delta, vec![d, d]),
            ("delta_base", &self.delta_base, vec![d]),
            ("w_b", &self.w_b, vec![n, d]),
            ("w_c", &self.w_c, vec![n, d]),
            ("w_g", &self.w_g, vec![d, d]),
            ("a_log", &self.a_log, vec![d, n]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "AgSsmParams",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            t.ensure_finite(name)?;
        }
        Ok(())
    }
}

impl Parameters for AgSsmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_s", &self.w_s);
        f("b_s", &self.b_s);
        f("w_delta", &self.w_delta);
        f("delta_base", &self.delta_base);
        f("w_b", &self.w_b);
        f("w_c", &self.w_c);
        f("w_g", &self.w_g);
        f("a_log", &self.a_log);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_s", &mut self.w_s);
        f("b_s", &mut self.b_s);
        f("w_delta", &mut self.w_delta);
        f("delta_base", &mut self.delta_base);
        f("w_b", &mut self.w_b);
        f("w_c", &mut self.w_c);
        f("w_g", &mut self.w_g);
        f("a_log", &mut self.a_log);
    }
}

fn check_len(op: &'static str, what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::shape(
            op,
            format!("{what} has length {}, expected {expected}", v.len()),
        ));
    }
    Ok(())
}

/// `s_t = W_s [x_v ; x_a] + b_s`.
pub fn fuse_descriptor(x_v: &[f64], x_a: &[f64], params: &AgSsmParams) -> Result<Vec<f64>> {
    let d = params.d_model();
    check_len("fuse_descriptor", "x_v", x_v, d)?;
    check_len("fuse_descriptor", "x_a", x_a, d)?;
    let mut cat = Vec::with_capacity(2 * d);
    cat.extend_from_slice(x_v);
    cat.extend_from_slice(x_a);
    let mut s = params.b_s.data().to_vec();
    matmul_bt_into(&cat, params.w_s.data(), &mut s, 1, 2 * d, d);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    /// Pre-softplus logits, `[D]`.
    pub logit: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// `Δ_t`, `B_t`, `C_t` from the descriptor.
pub fn synthesize_params(s: &[f64], params: &AgSsmParams) -> Result<Synthesized> {
    let (d, n) = (params.d_model(), params.state_dim());
    check_len("synthesize_params", "s", s, d)?;
    let mut logit = params.delta_base.data().to_vec();
    matmul_bt_into(s, params.w_delta.data(), &mut logit, 1, d, d);
    let delta: Vec<f64> = logit.iter().map(|&z| softplus(z)).collect();
    let mut b = vec![0.0; n];
    matmul_bt_into(s, params.w_b.data(), &mut b, 1, d, n);
    let mut c = vec![0.0; n];
    matmul_bt_into(s, params.w_c.data(), &mut c, 1, d, n);
    if delta.iter().chain(&b).chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("synthesized SSM parameters".into()));
    }
    if let Some(i) = delta.iter().position(|&v| v <= 0.0) {
        // softplus underflow for logits below about -745
        return Err(Error::NonFinite(format!("step size underflow in channel {i}")));
    }
    Ok(Synthesized { logit, delta, b, c })
}

/// `x_v ⊙ σ(W_g x_a)`.
pub fn audio_gate(x_v: &[f64], x_a: &[f64], w_g: &Tensor) -> Result<Vec<f64>> {
    let d = x_v.len();
    check_len("audio_gate", "x_a", x_a, d)?;
    if w_g.shape() != [d, d] {
        return Err(Error::shape(
            "audio_gate",
            format!("w_g has shape {:?}, expected [{d}, {d}]", w_g.shape()),
        ));
    }
    let mut q = vec![0.0; d];
    matmul_bt_into(x_a, w_g.data(), &mut q, 1, d, d);
    Ok(x_v.iter().zip(&q).map(|(&v, &qi)| v * sigmoid(qi)).collect())
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AgSsmContext {
    len: usize,
    x_v: Vec<f64>,
    x_a: Vec<f64>,
    cat: Vec<f64>,
    s: Vec<f64>,
    logit: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    gate: Vec<f64>,
    channels: Vec<ChannelTrace>,
}

#[derive(Debug, Clone)]
struct ChannelTrace {
    steps: Steps,
    input: Vec<f64>,
    states: Vec<f64>,
}

impl AgSsmContext {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Step sizes `[T, D]` used in the forward pass.
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

/// Runs the layer over a `[T, D]` visual and a `[T, D]` audio sequence.
pub fn ag_ssm_forward(x_v_seq: &Tensor, x_a_seq: &Tensor, params: &AgSsmParams) -> Result<(Tensor, AgSsmContext)> {
    let d = params.d_model();
    if x_v_seq.shape().len() != 2 || x_v_seq.shape()[1] != d {
        return Err(Error::shape(
            "ag_ssm_forward",
            format!("visual sequence shape {:?}, expected [T, {d}]", x_v_seq.shape()),
        ));
    }
    if x_a_seq.shape() != x_v_seq.shape() {
        return Err(Error::shape(
            "ag_ssm_forward",
            format!(
                "visual {:?} and audio {:?} sequences are not time-aligned",
                x_v_seq.shape(),
                x_a_seq.shape()
            ),
        ));
    }
    let (y, ctx) = forward_raw(x_v_seq.data(), x_a_seq.data(), x_v_seq.shape()[0], params)?;
    Ok((Tensor::matrix(ctx.len, d, y)?, ctx))
}

/// Slice-level forward; `x_v`, `x_a` are `[T, D]` row-major.
pub fn forward_raw(x_v: &[f64], x_a: &[f64], len: usize, params: &AgSsmParams) -> Result<(Vec<f64>, AgSsmContext)> {
    let (d, n) = (params.d_model(), params.state_dim());
    check_len("ag_ssm_forward", "x_v", x_v, len * d)?;
    check_len("ag_ssm_forward", "x_a", x_a, len * d)?;

    let mut cat = vec![0.0; len * 2 * d];
    for t in 0..len {
        cat[t * 2 * d..t * 2 * d + d].copy_from_slice(&x_v[t * d..(t + 1) * d]);
        cat[t * 2 * d + d..(t + 1) * 2 * d].copy_from_slice(&x_a[t * d..(t + 1) * d]);
    }
    let mut s = Vec::with_capacity(len * d);
    for _ in 0..len {
        s.extend_from_slice(params.b_s.data());
    }
    matmul_bt_into(&cat, params.w_s.data(), &mut s, len, 2 * d, d);

    let mut logit = Vec::with_capacity(len * d);
    for _ in 0..len {
        logit.extend_from_slice(params.delta_base.data());
    }
    matmul_bt_into(&s, params.w_delta.data(), &mut logit, len, d, d);
    let delta: Vec<f64> = logit.iter().map(|&z| softplus(z)).collect();
    if delta.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite("ag_ssm step sizes".into()));
    }

    let mut b = vec![0.0; len * n];
    matmul_bt_into(&s, params.w_b.data(), &mut b, len, d, n);
    let mut c = vec![0.0; len * n];
    matmul_bt_into(&s, params.w_c.data(), &mut c, len, d, n);

    let mut q = vec![0.0; len * d];
    matmul_bt_into(x_a, params.w_g.data(), &mut q, len, d, d);
    let gate: Vec<f64> = q.iter().map(|&v| sigmoid(v)).collect();
    let u: Vec<f64> = x_v.iter().zip(&gate).map(|(v, g)| v * g).collect();

    let a_log = params.a_log.data();
    let channels: Vec<Result<ChannelTrace>> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let a_row: Vec<f64> = a_log[ch * n..(ch + 1) * n].iter().map(|l| -l.exp()).collect();
            let mut a_bar = vec![0.0; len * n];
            let mut b_bar = vec![0.0; len * n];
            for t in 0..len {
                let dt = delta[t * d + ch];
                for i in 0..n {
                    let z = dt * a_row[i];
                    a_bar[t * n + i] = z.exp();
                    b_bar[t * n + i] = zoh_gain(z) * dt * b[t * n + i];
                }
            }
            let steps = Steps::new(len, n, a_bar, b_bar, c.clone())?;
            let input: Vec<f64> = (0..len).map(|t| u[t * d + ch]).collect();
            let (_, states) = scan_with_states(&steps, &input, &vec![0.0; n])?;
            Ok(ChannelTrace { steps, input, states })
        })
        .collect();
    let channels = channels.into_iter().collect::<Result<Vec<_>>>()?;

    let mut y = vec![0.0; len * d];
    for (ch, trace) in channels.iter().enumerate() {
        for t in 0..len {
            y[t * d + ch] = crate::tensor::dot(&c[t * n..(t + 1) * n], &trace.states[t * n..(t + 1) * n]);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ag_ssm output".into()));
    }
    Ok((
        y,
        AgSsmContext {
            len,
            x_v: x_v.to_vec(),
            x_a: x_a.to_vec(),
            cat,
            s,
            logit,
            delta,
            b,
            gate,
            channels,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct AgSsmGrads {
    pub params: AgSsmParams,
    /// `[T, D]`
    pub x_v: Vec<f64>,
    /// `[T, D]`
    pub x_a: Vec<f64>,
}

/// Analytic gradients of `<upstream, y>` with respect to every parameter and
/// both input sequences.
pub fn ag_ssm_backward(ctx: &AgSsmContext, params: &AgSsmParams, upstream: &[f64]) -> Result<AgSsmGrads> {
    let (d, n, len) = (params.d_model(), params.state_dim(), ctx.len);
    check_len("ag_ssm_backward", "upstream gradient", upstream, len * d)?;
    if ctx.channels.len() != d {
        return Err(Error::shape(
            "ag_ssm_backward",
            format!("context has {} channels, params {d}", ctx.channels.len()),
        ));
    }
    let mut g = AgSsmParams::zeros(d, n);
    let a_log = params.a_log.data();

    struct ChannelGrad {
        du: Vec<f64>,
        d_delta: Vec<f64>,
        d_a_log: Vec<f64>,
        d_b: Vec<f64>,
        d_c: Vec<f64>,
    }

    let per_channel: Vec<Result<ChannelGrad>> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let trace = &ctx.channels[ch];
            let dy: Vec<f64> = (0..len).map(|t| upstream[t * d + ch]).collect();
            let sg = scan_backward_with_states(&trace.steps, &trace.input, &vec![0.0; n], &trace.states, &dy)?;
            let a_row: Vec<f64> = a_log[ch * n..(ch + 1) * n].iter().map(|l| -l.exp()).collect();
            let mut d_delta = vec![0.0; len];
            let mut d_a = vec![0.0; n];
            let mut d_b = vec![0.0; len * n];
            for t in 0..len {
                let dt = ctx.delta[t * d + ch];
                let mut acc = 0.0;
                for i in 0..n {
                    let k = t * n + i;
                    let a = a_row[i];
                    let z = dt * a;
                    let a_bar = trace.steps.a_bar[k];
                    let bt = ctx.b[k];
                    let ga = sg.a_bar[k];
                    let gb = sg.b_bar[k];
                    // d(a_bar)/dΔ = a e^z,  d(b_bar)/dΔ = B e^z
                    acc += ga * a * a_bar + gb * bt * a_bar;
                    d_a[i] += ga * dt * a_bar + gb * dt * dt * bt * zoh_gain_derivative(z);
                    d_b[k] = gb * dt * zoh_gain(z);
                }
                d_delta[t] = acc;
            }
            let d_a_log = d_a.iter().zip(&a_row).map(|(g, a)| g * a).collect();
            Ok(ChannelGrad {
                du: sg.x,
                d_delta,
                d_a_log,
                d_b,
                d_c: sg.c,
            })
        })
        .collect();

    let mut du = vec![0.0; len * d];
    let mut d_logit = vec![0.0; len * d];
    let mut d_b = vec![0.0; len * n];
    let mut d_c = vec![0.0; len * n];
    for (ch, res) in per_channel.into_iter().enumerate() {
        let cg = res?;
        for t in 0..len {
            du[t * d + ch] = cg.du[t];
            d_logit[t * d + ch] = cg.d_delta[t] * sigmoid(ctx.logit[t * d + ch]);
        }
        g.a_log.data_mut()[ch * n..(ch + 1) * n].copy_from_slice(&cg.d_a_log);
        crate::tensor::axpy(1.0, &cg.d_b, &mut d_b);
        crate::tensor::axpy(1.0, &cg.d_c, &mut d_c);
    }

    for t in 0..len {
        crate::tensor::axpy(1.0, &d_logit[t * d..(t + 1) * d], g.delta_base.data_mut());
    }
    matmul_at_into(&d_logit, &ctx.s, g.w_delta.data_mut(), d, len, d);
    matmul_at_into(&d_b, &ctx.s, g.w_b.data_mut(), n, len, d);
    matmul_at_into(&d_c, &ctx.s, g.w_c.data_mut(), n, len, d);
    let mut ds = vec![0.0; len * d];
    matmul_into(&d_logit, params.w_delta.data(), &mut ds, len, d, d);
    matmul_into(&d_b, params.w_b.data(), &mut ds, len, n, d);
    matmul_into(&d_c, params.w_c.data(), &mut ds, len, n, d);

    matmul_at_into(&ds, &ctx.cat, g.w_s.data_mut(), d, len, 2 * d);
    for t in 0..len {
        crate::tensor::axpy(1.0, &ds[t * d..(t + 1) * d], g.b_s.data_mut());
    }
    let mut d_cat = vec![0.0; len * 2 * d];
    matmul_into(&ds, params.w_s.data(), &mut d_cat, len, d, 2 * d);

    let mut dx_v = vec![0.0; len * d];
    let mut dx_a = vec![0.0; len * d];
    for t in 0..len {
        dx_v[t * d..(t + 1) * d].copy_from_slice(&d_cat[t * 2 * d..t * 2 * d + d]);
        dx_a[t * d..(t + 1) * d].copy_from_slice(&d_cat[t * 2 * d + d..(t + 1) * 2 * d]);
    }

    // gate: u = x_v ⊙ σ(q), q = W_g x_a
    let mut dq = vec![0.0; len * d];
    for k in 0..len * d {
        let gk = ctx.gate[k];
        dx_v[k] += du[k] * gk;
        dq[k] = du[k] * ctx.x_v[k] * gk * (1.0 - gk);
    }
    matmul_at_into(&dq, &ctx.x_a, g.w_g.data_mut(), d, len, d);
    matmul_into(&dq, params.w_g.data(), &mut dx_a, len, d, d);

    Ok(AgSsmGrads {
        params: g,
        x_v: dx_v,
        x_a: dx_a,
    })
}
