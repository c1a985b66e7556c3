//! The gradient-check suite: every analytic backward pass against central
//! differences, at small random sizes derived from one seed.

use crate::ag_ssm::{ag_ssm_backward, ag_ssm_forward, AgSsmParams};
use crate::asl::{asl_loss, asl_loss_logits, AslConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::hga::{hga_backward, hga_forward_sets, GridDims, HgaParams, PatchGrid};
use crate::model::{batch_loss_and_grad, DataDims, Model, ModelConfig, ModelKind, Window};
use crate::params::Parameters;
use crate::rng::Rng;
use crate::ssm::{discretize_zoh, scan_backward, scan_sequential, zoh_gain, zoh_gain_derivative, Steps};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{dot, sigmoid, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: &'static str,
    pub report: GradCheckReport,
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn check_scan(rng: &mut Rng) -> Result<GradCheckReport> {
    let (len, n) = (16, 4);
    let steps = Steps::new(
        len,
        n,
        (0..len * n).map(|_| rng.uniform_range(0.05, 0.99)).collect(),
        normals(rng, len * n),
        normals(rng, len * n),
    )?;
    let x = normals(rng, len);
    let h0 = normals(rng, n);
    let w = normals(rng, len);
    let g = scan_backward(&steps, &x, &h0, &w)?;
    let obj = |s: &Steps, x: &[f64], h0: &[f64]| dot(&scan_sequential(s, x, h0).expect("valid scan").y, &w);

    let mut r = grad_check(
        |v| {
            let mut s = steps.clone();
            s.a_bar.copy_from_slice(v);
            obj(&s, &x, &h0)
        },
        &steps.a_bar,
        &g.a_bar,
        DEFAULT_EPS,
    )?;
    r = r.merge(grad_check(
        |v| {
            let mut s = steps.clone();
            s.b_bar.copy_from_slice(v);
            obj(&s, &x, &h0)
        },
        &steps.b_bar,
        &g.b_bar,
        DEFAULT_EPS,
    )?);
    r = r.merge(grad_check(
        |v| {
            let mut s = steps.clone();
            s.c.copy_from_slice(v);
            obj(&s, &x, &h0)
        },
        &steps.c,
        &g.c,
        DEFAULT_EPS,
    )?);
    r = r.merge(grad_check(|v| obj(&steps, v, &h0), &x, &g.x, DEFAULT_EPS)?);
    r = r.merge(grad_check(|v| obj(&steps, &x, v), &h0, &g.h0, DEFAULT_EPS)?);
    Ok(r)
}

/// Derivatives of the discretized pair with respect to `(delta, a, b)`.
fn check_zoh(rng: &mut Rng) -> Result<GradCheckReport> {
    let n = 4;
    let a: Vec<f64> = (0..n).map(|_| -rng.uniform_range(0.1, 4.0)).collect();
    let b = normals(rng, n);
    let delta = rng.uniform_range(0.01, 0.5);
    let wa = normals(rng, n);
    let wb = normals(rng, n);
    let obj = |x: &[f64]| {
        let (ab, bb) = discretize_zoh(&x[1..=n], &x[n + 1..], x[0]).expect("valid discretization");
        dot(&ab, &wa) + dot(&bb, &wb)
    };
    let mut x = vec![delta];
    x.extend_from_slice(&a);
    x.extend_from_slice(&b);
    let mut grad = vec![0.0; 1 + 2 * n];
    for i in 0..n {
        let z = delta * a[i];
        let ab = z.exp();
        grad[0] += wa[i] * a[i] * ab + wb[i] * b[i] * ab;
        grad[1 + i] = wa[i] * delta * ab + wb[i] * delta * delta * b[i] * zoh_gain_derivative(z);
        grad[1 + n + i] = wb[i] * delta * zoh_gain(z);
    }
    grad_check(obj, &x, &grad, DEFAULT_EPS)
}

fn check_ag_ssm(rng: &mut Rng) -> Result<GradCheckReport> {
    let (d, n, len) = (3, 2, 8);
    let mut p = AgSsmParams::init(d, n, rng);
    p.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal()));
    let xv = Tensor::matrix(len, d, normals(rng, len * d))?;
    let xa = Tensor::matrix(len, d, normals(rng, len * d))?;
    let w = normals(rng, len * d);
    let (_, ctx) = ag_ssm_forward(&xv, &xa, &p)?;
    let g = ag_ssm_backward(&ctx, &p, &w)?;
    let obj = |p: &AgSsmParams, xv: &Tensor, xa: &Tensor| dot(ag_ssm_forward(xv, xa, p).expect("valid").0.data(), &w);
    let mut r = grad_check(
        |v| {
            let mut q = p.clone();
            q.load_flat(v).expect("same layout");
            obj(&q, &xv, &xa)
        },
        &p.flatten(),
        &g.params.flatten(),
        DEFAULT_EPS,
    )?;
    r = r.merge(grad_check(
        |v| obj(&p, &Tensor::matrix(len, d, v.to_vec()).expect("shape"), &xa),
        xv.data(),
        &g.x_v,
        DEFAULT_EPS,
    )?);
    r = r.merge(grad_check(
        |v| obj(&p, &xv, &Tensor::matrix(len, d, v.to_vec()).expect("shape")),
        xa.data(),
        &g.x_a,
        DEFAULT_EPS,
    )?);
    Ok(r)
}

fn check_hga(rng: &mut Rng) -> Result<GradCheckReport> {
    let dims = GridDims {
        h_patches: 4,
        w_patches: 4,
    };
    let (d_v, d_out) = (8, 5);
    let mut p = HgaParams::init(d_v, 2, d_v, d_out, rng)?;
    p.visit_mut(&mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    });
    let grid = PatchGrid::new(dims, Tensor::matrix(16, d_v, normals(rng, 16 * d_v))?)?;
    let mut a: Vec<usize> = (0..16).collect();
    rng.shuffle(&mut a);
    let sets = vec![a[..3].to_vec(), a[3..7].to_vec()];
    let w = normals(rng, 2 * d_out);
    let (_, ctx) = hga_forward_sets(&grid, &sets, &p)?;
    let g = hga_backward(&ctx, &p, &w)?;
    let obj = |p: &HgaParams, grid: &PatchGrid| dot(hga_forward_sets(grid, &sets, p).expect("valid").0.data(), &w);
    let r = grad_check(
        |v| {
            let mut q = p.clone();
            q.load_flat(v).expect("same layout");
            obj(&q, &grid)
        },
        &p.flatten(),
        &g.params.flatten(),
        DEFAULT_EPS,
    )?;
    let tokens = g.tokens.expect("requested");
    Ok(r.merge(grad_check(
        |v| {
            obj(
                &p,
                &PatchGrid::new(dims, Tensor::matrix(16, d_v, v.to_vec()).expect("shape")).expect("grid"),
            )
        },
        grid.tokens.data(),
        &tokens,
        DEFAULT_EPS,
    )?))
}

/// Random point at least `1e-3` away from the `p = m` kink.
fn away_from_kink(rng: &mut Rng, margin: f64) -> f64 {
    loop {
        let p = rng.uniform_range(0.01, 0.99);
        if (p - margin).abs() > 1e-3 {
            return p;
        }
    }
}

fn check_asl(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfgs = [AslConfig::default(), AslConfig::bce(), AslConfig::focal(2.0)];
    let mut total: Option<GradCheckReport> = None;
    for cfg in cfgs {
        for _ in 0..100 {
            let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let p = away_from_kink(rng, cfg.margin);
            let (_, g) = asl_loss(&[p], &[y], &cfg)?;
            let r = grad_check(|v| asl_loss(v, &[y], &cfg).expect("valid").0, &[p], &g, DEFAULT_EPS)?;
            total = Some(match total {
                Some(t) => t.merge(r),
                None => r,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

fn check_asl_logits(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = AslConfig::default();
    let mut total: Option<GradCheckReport> = None;
    for _ in 0..200 {
        let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        let p = away_from_kink(rng, cfg.margin);
        let z = (p / (1.0 - p)).ln();
        debug_assert!((sigmoid(z) - p).abs() < 1e-12);
        let (_, g) = asl_loss_logits(&[z], &[y], 1, &cfg)?;
        let r = grad_check(
            |v| asl_loss_logits(v, &[y], 1, &cfg).expect("valid").0,
            &[z],
            &g,
            DEFAULT_EPS,
        )?;
        total = Some(match total {
            Some(t) => t.merge(r),
            None => r,
        });
    }
    Ok(total.expect("non-empty"))
}

fn check_model(rng: &mut Rng, kind: ModelKind) -> Result<GradCheckReport> {
    let data = generate(&SynthConfig {
        frames: 6,
        num_sequences: 2,
        classes: 3,
        prevalence_head: 0.4,
        prevalence_tail: 0.2,
        mean_duration: 2.0,
        audio_lag: 1,
        grid_h: 2,
        grid_w: 3,
        d_v: 4,
        d_a: 3,
        seed: rng.next_u64(),
        ..SynthConfig::default()
    })?;
    let cfg = ModelConfig {
        kind,
        d_model: 4,
        state_dim: 3,
        layers: 2,
        heads: 2,
        region_dim: 3,
    };
    let roi = crate::hga::RoiSpec::parse("brows: 17-26\neyes: 36-47\nmouth: 48-67\n")?;
    let model = Model::init(cfg, DataDims::of(&data.config), roi, rng)?;
    let windows: Vec<Window> = data.samples.iter().map(|s| Window::full(s, 6)).collect();
    let loss = AslConfig::bce();
    let (_, g) = batch_loss_and_grad(&model, &windows, &loss)?;
    grad_check(
        |v| {
            let mut m = model.clone();
            m.params.load_flat(v).expect("same layout");
            batch_loss_and_grad(&m, &windows, &loss).expect("valid").0
        },
        &model.params.flatten(),
        &g.flatten(),
        DEFAULT_EPS,
    )
}

/// Runs every check; each operation gets its own stream of `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let rng = |k: u64| Rng::with_stream(seed, k);
    Ok(vec![
        CheckResult {
            op: "ssm_core.zoh_discretize",
            report: check_zoh(&mut rng(0))?,
        },
        CheckResult {
            op: "ssm_core.scan_backward",
            report: check_scan(&mut rng(1))?,
        },
        CheckResult {
            op: "ag_ssm.ag_ssm_backward",
            report: check_ag_ssm(&mut rng(2))?,
        },
        CheckResult {
            op: "hga.hga_backward",
            report: check_hga(&mut rng(3))?,
        },
        CheckResult {
            op: "asl_metrics.asl_loss",
            report: check_asl(&mut rng(4))?,
        },
        CheckResult {
            op: "asl_metrics.asl_loss_logits",
            report: check_asl_logits(&mut rng(5))?,
        },
        CheckResult {
            op: "model.backward[ag-ssm]",
            report: check_model(&mut rng(6), ModelKind::AgSsm)?,
        },
        CheckResult {
            op: "model.backward[framewise]",
            report: check_model(&mut rng(7), ModelKind::Framewise)?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in 0..5 {
            for c in gradient_suite(seed).unwrap() {
                assert!(c.report.passes(1e-4), "seed {seed} {} {:?}", c.op, c.report);
                assert!(c.report.checked > 0);
            }
        }
    }

    #[test]
    fn impossible_tolerance_fails() {
        let results = gradient_suite(0).unwrap();
        assert!(results.iter().any(|c| !c.report.passes(1e-12)));
    }
}
