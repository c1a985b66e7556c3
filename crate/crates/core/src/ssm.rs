//! Diagonal state space recurrence.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h` with diagonal `A` are
//! discretized with the zero-order hold rule
//!
//! ```text
//! a_bar = exp(Δ a)
//! b_bar = (exp(Δ a) - 1) / (Δ a) · Δ b
//! ```
//!
//! and scanned left to right as `h_t = a_bar_t ⊙ h_{t-1} + b_bar_t x_t`,
//! `y_t = <c_t, h_t>`. Every timestep may carry its own `(a_bar, b_bar, c)`,
//! which is what makes the scan *selective*.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Below this `|Δa|` the ZOH input gain switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSsm {
    a_diag: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ContinuousSsm {
    pub fn new(a_diag: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let n = a_diag.len();
        if n == 0 {
            return Err(Error::InvalidArgument("state dimension must be at least 1".into()));
        }
        if b.len() != n || c.len() != n {
            return Err(Error::shape(
                "ContinuousSsm::new",
                format!("a has {n} entries, b {}, c {}", b.len(), c.len()),
            ));
        }
        if let Some(i) = a_diag.iter().position(|&a| !(a < 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "a_diag[{i}] = {} is not negative",
                a_diag[i]
            )));
        }
        if b.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ContinuousSsm parameters".into()));
        }
        Ok(Self { a_diag, b, c })
    }

    /// Stable parameterization `a = -exp(a_log)`.
    pub fn from_log(a_log: &[f64], b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        Self::new(a_log.iter().map(|l| -l.exp()).collect(), b, c)
    }

    pub fn state_dim(&self) -> usize {
        self.a_diag.len()
    }

    pub fn a_diag(&self) -> &[f64] {
        &self.a_diag
    }

    pub fn discretize(&self, delta: f64) -> Result<DiscreteStep> {
        let (a_bar, b_bar) = discretize_zoh(&self.a_diag, &self.b, delta)?;
        Ok(DiscreteStep {
            a_bar,
            b_bar,
            c: self.c.clone(),
        })
    }
}

/// One timestep's discrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

/// `φ(z) = (e^z - 1) / z`, continuous at zero.
#[inline]
pub fn zoh_gain(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// `φ'(z)`; the direct form cancels badly near zero, hence the wider series band.
#[inline]
pub fn zoh_gain_derivative(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Elementwise zero-order hold.
pub fn discretize_zoh(a_diag: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {delta}"
        )));
    }
    if a_diag.len() != b.len() {
        return Err(Error::shape(
            "discretize_zoh",
            format!("a has {} entries, b has {}", a_diag.len(), b.len()),
        ));
    }
    if a_diag.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretize_zoh input".into()));
    }
    let mut a_bar = Vec::with_capacity(a_diag.len());
    let mut b_bar = Vec::with_capacity(a_diag.len());
    for (&a, &bi) in a_diag.iter().zip(b) {
        let z = delta * a;
        a_bar.push(z.exp());
        b_bar.push(zoh_gain(z) * delta * bi);
    }
    Ok((a_bar, b_bar))
}

/// Packed per-timestep parameters, `[T, N]` row-major each.
#[derive(Debug, Clone, PartialEq)]
pub struct Steps {
    len: usize,
    state_dim: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl Steps {
    pub fn new(len: usize, state_dim: usize, a_bar: Vec<f64>, b_bar: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let expected = len * state_dim;
        if state_dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be at least 1".into()));
        }
        if a_bar.len() != expected || b_bar.len() != expected || c.len() != expected {
            return Err(Error::shape(
                "Steps::new",
                format!(
                    "expected {expected} entries per parameter, got a_bar {}, b_bar {}, c {}",
                    a_bar.len(),
                    b_bar.len(),
                    c.len()
                ),
            ));
        }
        Ok(Self {
            len,
            state_dim,
            a_bar,
            b_bar,
            c,
        })
    }

    pub fn from_steps(steps: &[DiscreteStep]) -> Result<Self> {
        let n = steps.first().map(|s| s.a_bar.len()).unwrap_or(1);
        let mut a_bar = Vec::with_capacity(steps.len() * n);
        let mut b_bar = Vec::with_capacity(steps.len() * n);
        let mut c = Vec::with_capacity(steps.len() * n);
        for s in steps {
            a_bar.extend_from_slice(&s.a_bar);
            b_bar.extend_from_slice(&s.b_bar);
            c.extend_from_slice(&s.c);
        }
        Self::new(steps.len(), n, a_bar, b_bar, c)
    }

    /// The same step repeated `len` times.
    pub fn constant(step: &DiscreteStep, len: usize) -> Result<Self> {
        Self::from_steps(&vec![step.clone(); len])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn row(v: &[f64], t: usize, n: usize) -> &[f64] {
        &v[t * n..(t + 1) * n]
    }

    pub fn step(&self, t: usize) -> DiscreteStep {
        let n = self.state_dim;
        DiscreteStep {
            a_bar: Self::row(&self.a_bar, t, n).to_vec(),
            b_bar: Self::row(&self.b_bar, t, n).to_vec(),
            c: Self::row(&self.c, t, n).to_vec(),
        }
    }

    /// Sub-range `[start, end)` of the timesteps.
    pub fn slice(&self, start: usize, end: usize) -> Steps {
        let n = self.state_dim;
        Steps {
            len: end - start,
            state_dim: n,
            a_bar: self.a_bar[start * n..end * n].to_vec(),
            b_bar: self.b_bar[start * n..end * n].to_vec(),
            c: self.c[start * n..end * n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub h_final: Vec<f64>,
}

/// Latent state at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState {
    pub h: Vec<f64>,
    pub t: usize,
}

fn check_scan_inputs(steps: &Steps, x: &[f64], h0: &[f64]) -> Result<()> {
    if x.len() != steps.len() {
        return Err(Error::shape(
            "scan",
            format!("{} steps but {} inputs", steps.len(), x.len()),
        ));
    }
    if h0.len() != steps.state_dim() {
        return Err(Error::shape(
            "scan",
            format!("state dim {} but h0 has {}", steps.state_dim(), h0.len()),
        ));
    }
    Ok(())
}

/// Reference left-to-right recurrence.
pub fn scan_sequential(steps: &Steps, x: &[f64], h0: &[f64]) -> Result<ScanOutput> {
    check_scan_inputs(steps, x, h0)?;
    let n = steps.state_dim();
    let mut h = h0.to_vec();
    let mut y = Vec::with_capacity(steps.len());
    for (t, &xt) in x.iter().enumerate() {
        let a = &steps.a_bar[t * n..(t + 1) * n];
        let b = &steps.b_bar[t * n..(t + 1) * n];
        for i in 0..n {
            h[i] = a[i] * h[i] + b[i] * xt;
        }
        y.push(dot(&steps.c[t * n..(t + 1) * n], &h));
    }
    Ok(ScanOutput { y, h_final: h })
}

/// Like [`scan_sequential`] but also returns every state `h_1..h_T`, `[T, N]`.
pub fn scan_with_states(steps: &Steps, x: &[f64], h0: &[f64]) -> Result<(ScanOutput, Vec<f64>)> {
    check_scan_inputs(steps, x, h0)?;
    let n = steps.state_dim();
    let mut states = vec![0.0; steps.len() * n];
    let mut y = Vec::with_capacity(steps.len());
    for (t, &xt) in x.iter().enumerate() {
        let (done, rest) = states.split_at_mut(t * n);
        let prev: &[f64] = if t == 0 { h0 } else { &done[(t - 1) * n..] };
        let cur = &mut rest[..n];
        let a = &steps.a_bar[t * n..(t + 1) * n];
        let b = &steps.b_bar[t * n..(t + 1) * n];
        for i in 0..n {
            cur[i] = a[i] * prev[i] + b[i] * xt;
        }
        y.push(dot(&steps.c[t * n..(t + 1) * n], cur));
    }
    let h_final = if steps.is_empty() {
        h0.to_vec()
    } else {
        states[(steps.len() - 1) * n..].to_vec()
    };
    Ok((ScanOutput { y, h_final }, states))
}

/// Per-chunk summary: cumulative decay and zero-state response at every step.
struct ChunkLocal {
    decay: Vec<f64>,
    local: Vec<f64>,
}

fn chunk_local(steps: &Steps, x: &[f64], start: usize, end: usize) -> ChunkLocal {
    let n = steps.state_dim();
    let len = end - start;
    let mut decay = vec![0.0; len * n];
    let mut local = vec![0.0; len * n];
    for k in 0..len {
        let t = start + k;
        let a = &steps.a_bar[t * n..(t + 1) * n];
        let b = &steps.b_bar[t * n..(t + 1) * n];
        let xt = x[t];
        if k == 0 {
            decay[..n].copy_from_slice(a);
            for i in 0..n {
                local[i] = b[i] * xt;
            }
        } else {
            let (prev, cur) = decay.split_at_mut(k * n);
            let prev = &prev[(k - 1) * n..];
            for i in 0..n {
                cur[i] = a[i] * prev[i];
            }
            let (prev, cur) = local.split_at_mut(k * n);
            let prev = &prev[(k - 1) * n..];
            for i in 0..n {
                cur[i] = a[i] * prev[i] + b[i] * xt;
            }
        }
    }
    ChunkLocal { decay, local }
}

/// Chunked scan with the same semantics as [`scan_sequential`].
///
/// Each chunk first computes, independently of every other chunk, the running
/// product of its decays and its zero-initial-state response. A short serial
/// pass then threads the carried state through chunk boundaries, and outputs
/// are assembled as `h_t = decay_t ⊙ h_in + local_t`. The independent chunk
/// work runs on the rayon pool.
pub fn scan_chunked(steps: &Steps, x: &[f64], h0: &[f64], chunk: usize) -> Result<ScanOutput> {
    check_scan_inputs(steps, x, h0)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    let n = steps.state_dim();
    let total = steps.len();
    let bounds: Vec<(usize, usize)> = (0..total).step_by(chunk).map(|s| (s, (s + chunk).min(total))).collect();
    let locals: Vec<ChunkLocal> = bounds.par_iter().map(|&(s, e)| chunk_local(steps, x, s, e)).collect();

    let mut carries = Vec::with_capacity(bounds.len());
    let mut h_in = h0.to_vec();
    for (cl, &(s, e)) in locals.iter().zip(&bounds) {
        let last = (e - s - 1) * n;
        let next: Vec<f64> = (0..n)
            .map(|i| cl.decay[last + i] * h_in[i] + cl.local[last + i])
            .collect();
        carries.push(std::mem::replace(&mut h_in, next));
    }

    let mut y = vec![0.0; total];
    let mut y_chunks: Vec<&mut [f64]> = Vec::with_capacity(bounds.len());
    let mut rest = y.as_mut_slice();
    for &(s, e) in &bounds {
        let (head, tail) = rest.split_at_mut(e - s);
        y_chunks.push(head);
        rest = tail;
    }
    y_chunks
        .into_par_iter()
        .zip(locals.par_iter())
        .zip(carries.par_iter())
        .zip(bounds.par_iter())
        .for_each(|(((ys, cl), carry), &(s, _))| {
            let mut h = vec![0.0; n];
            for (k, yk) in ys.iter_mut().enumerate() {
                for i in 0..n {
                    h[i] = cl.decay[k * n + i] * carry[i] + cl.local[k * n + i];
                }
                let t = s + k;
                *yk = dot(&steps.c[t * n..(t + 1) * n], &h);
            }
        });
    Ok(ScanOutput { y, h_final: h_in })
}

/// Gradients of a scalar objective through [`scan_sequential`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
    pub h0: Vec<f64>,
}

/// Backpropagation through time given `dL/dy`.
pub fn scan_backward(steps: &Steps, x: &[f64], h0: &[f64], grad_y: &[f64]) -> Result<ScanGrads> {
    let (_, states) = scan_with_states(steps, x, h0)?;
    scan_backward_with_states(steps, x, h0, &states, grad_y)
}

/// [`scan_backward`] reusing the states saved by [`scan_with_states`].
pub fn scan_backward_with_states(
    steps: &Steps,
    x: &[f64],
    h0: &[f64],
    states: &[f64],
    grad_y: &[f64],
) -> Result<ScanGrads> {
    check_scan_inputs(steps, x, h0)?;
    let n = steps.state_dim();
    let len = steps.len();
    if grad_y.len() != len {
        return Err(Error::shape(
            "scan_backward",
            format!("{len} steps but {} output gradients", grad_y.len()),
        ));
    }
    if states.len() != len * n {
        return Err(Error::shape(
            "scan_backward",
            format!("expected {} saved state entries, got {}", len * n, states.len()),
        ));
    }
    let mut g = ScanGrads {
        a_bar: vec![0.0; len * n],
        b_bar: vec![0.0; len * n],
        c: vec![0.0; len * n],
        x: vec![0.0; len],
        h0: vec![0.0; n],
    };
    // carry = dL/dh_t arriving from step t+1
    let mut carry = vec![0.0; n];
    let mut dh = vec![0.0; n];
    for t in (0..len).rev() {
        let r = t * n..(t + 1) * n;
        let h_t = &states[r.clone()];
        let h_prev = if t == 0 { h0 } else { &states[(t - 1) * n..t * n] };
        let c = &steps.c[r.clone()];
        let a = &steps.a_bar[r.clone()];
        let b = &steps.b_bar[r.clone()];
        let gy = grad_y[t];
        for i in 0..n {
            dh[i] = c[i] * gy + carry[i];
            g.c[t * n + i] = gy * h_t[i];
            g.a_bar[t * n + i] = dh[i] * h_prev[i];
            g.b_bar[t * n + i] = dh[i] * x[t];
            carry[i] = a[i] * dh[i];
        }
        g.x[t] = dot(&dh, b);
    }
    g.h0 = carry;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;

    pub(crate) fn random_steps(rng: &mut Rng, len: usize, n: usize) -> Steps {
        let a_bar = (0..len * n).map(|_| rng.uniform_range(0.05, 0.99)).collect();
        let b_bar = (0..len * n).map(|_| rng.normal()).collect();
        let c = (0..len * n).map(|_| rng.normal()).collect();
        Steps::new(len, n, a_bar, b_bar, c).unwrap()
    }

    fn random_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.normal()).collect()
    }

    #[test]
    fn zoh_closed_form() {
        let (a, b) = discretize_zoh(&[-1.0], &[1.0], 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((a[0] - e).abs() < 1e-12);
        assert!((b[0] - (1.0 - e)).abs() < 1e-12);
        assert!((a[0] - 0.367879).abs() < 1e-6);
        assert!((b[0] - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn zoh_small_step_limit() {
        let delta = 1e-8;
        for (a, b) in [(-1.0, 1.0), (-5.0, -3.0), (-0.01, 2.5)] {
            let (ab, bb) = discretize_zoh(&[a], &[b], delta).unwrap();
            assert!((ab[0] - 1.0).abs() < 1e-7);
            assert!((bb[0] - delta * b).abs() < 1e-14);
        }
    }

    #[test]
    fn zoh_removable_singularity() {
        let (a, b) = discretize_zoh(&[0.0], &[2.0], 0.5).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn zoh_rejects_bad_step() {
        assert!(discretize_zoh(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize_zoh(&[-1.0], &[1.0], -0.1).is_err());
        assert!(discretize_zoh(&[-1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn zoh_gain_is_continuous_across_threshold() {
        for z in [-2e-6, -1e-6, -0.5e-6, -1e-4, -1.01e-4, -0.99e-4] {
            let series = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
            assert!((zoh_gain(z) - series).abs() < 1e-15);
            let dseries = 0.5 + z / 3.0 + z * z / 8.0;
            assert!((zoh_gain_derivative(z) - dseries).abs() < 1e-11);
        }
    }

    #[test]
    fn continuous_ssm_requires_negative_a() {
        assert!(ContinuousSsm::new(vec![-1.0, 0.0], vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(ContinuousSsm::new(vec![], vec![], vec![]).is_err());
        let ssm = ContinuousSsm::from_log(&[0.0, 1.0], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let step = ssm.discretize(0.3).unwrap();
        assert!(step.a_bar.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn memoryless_scan() {
        let mut rng = Rng::new(2);
        let mut steps = random_steps(&mut rng, 10, 3);
        steps.a_bar.iter_mut().for_each(|a| *a = 0.0);
        let x = random_vec(&mut rng, 10);
        let out = scan_sequential(&steps, &x, &[0.7, -0.2, 1.1]).unwrap();
        for t in 0..10 {
            let s = steps.step(t);
            let expected = dot(&s.c, &s.b_bar) * x[t];
            assert!((out.y[t] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn single_step_scan() {
        let step = DiscreteStep {
            a_bar: vec![0.5, 0.25],
            b_bar: vec![2.0, -1.0],
            c: vec![0.5, 3.0],
        };
        let steps = Steps::from_steps(&[step]).unwrap();
        let out = scan_sequential(&steps, &[1.5], &[0.0, 0.0]).unwrap();
        assert!((out.y[0] - (0.5 * 2.0 - 3.0) * 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_scan_matches_geometric_series() {
        let (a, b, c) = (0.9, 0.7, 1.3);
        let len = 50;
        let step = DiscreteStep {
            a_bar: vec![a],
            b_bar: vec![b],
            c: vec![c],
        };
        let steps = Steps::constant(&step, len).unwrap();
        let out = scan_sequential(&steps, &vec![1.0; len], &[0.0]).unwrap();
        let closed = c * b * (1.0 - a.powi(len as i32)) / (1.0 - a);
        assert!((out.y[len - 1] - closed).abs() < 1e-12);
    }

    #[test]
    fn scan_rejects_mismatches() {
        let mut rng = Rng::new(4);
        let steps = random_steps(&mut rng, 5, 2);
        assert!(scan_sequential(&steps, &[0.0; 4], &[0.0; 2]).is_err());
        assert!(scan_sequential(&steps, &[0.0; 5], &[0.0; 3]).is_err());
        assert!(scan_chunked(&steps, &[0.0; 5], &[0.0; 2], 0).is_err());
        assert!(scan_backward(&steps, &[0.0; 5], &[0.0; 2], &[0.0; 4]).is_err());
    }

    #[test]
    fn chunk_of_one_is_bitwise_sequential() {
        let mut rng = Rng::new(5);
        let steps = random_steps(&mut rng, 300, 4);
        let x = random_vec(&mut rng, 300);
        let h0 = random_vec(&mut rng, 4);
        let seq = scan_sequential(&steps, &x, &h0).unwrap();
        let chk = scan_chunked(&steps, &x, &h0, 1).unwrap();
        assert_eq!(seq, chk);
    }

    #[test]
    fn single_chunk_matches_sequential() {
        let mut rng = Rng::new(6);
        let steps = random_steps(&mut rng, 200, 4);
        let x = random_vec(&mut rng, 200);
        let h0 = random_vec(&mut rng, 4);
        let seq = scan_sequential(&steps, &x, &h0).unwrap();
        for chunk in [200, 1000] {
            let chk = scan_chunked(&steps, &x, &h0, chunk).unwrap();
            assert!(max_abs_diff(&seq.y, &chk.y) < 1e-10);
            assert!(max_abs_diff(&seq.h_final, &chk.h_final) < 1e-10);
        }
    }

    #[test]
    fn long_chunked_scan_matches_sequential() {
        let mut rng = Rng::new(8);
        let steps = random_steps(&mut rng, 2048, 8);
        let x = random_vec(&mut rng, 2048);
        let h0 = vec![0.0; 8];
        let seq = scan_sequential(&steps, &x, &h0).unwrap();
        let chk = scan_chunked(&steps, &x, &h0, 64).unwrap();
        assert!(max_abs_diff(&seq.y, &chk.y) < 1e-6);
    }

    #[test]
    fn empty_sequence() {
        let steps = Steps::new(0, 2, vec![], vec![], vec![]).unwrap();
        let out = scan_chunked(&steps, &[], &[1.0, 2.0], 4).unwrap();
        assert!(out.y.is_empty());
        assert_eq!(out.h_final, vec![1.0, 2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let (len, n) = (16, 4);
        let steps = random_steps(&mut rng, len, n);
        let x = random_vec(&mut rng, len);
        let h0 = random_vec(&mut rng, n);
        let w = random_vec(&mut rng, len);
        let g = scan_backward(&steps, &x, &h0, &w).unwrap();
        let objective = |s: &Steps, x: &[f64], h0: &[f64]| {
            let out = scan_sequential(s, x, h0).unwrap();
            dot(&out.y, &w)
        };

        let r = grad_check(
            |v| {
                let mut s = steps.clone();
                s.a_bar.copy_from_slice(v);
                objective(&s, &x, &h0)
            },
            &steps.a_bar,
            &g.a_bar,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "a_bar {r:?}");
        let r = grad_check(
            |v| {
                let mut s = steps.clone();
                s.b_bar.copy_from_slice(v);
                objective(&s, &x, &h0)
            },
            &steps.b_bar,
            &g.b_bar,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "b_bar {r:?}");
        let r = grad_check(
            |v| {
                let mut s = steps.clone();
                s.c.copy_from_slice(v);
                objective(&s, &x, &h0)
            },
            &steps.c,
            &g.c,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "c {r:?}");
        let r = grad_check(|v| objective(&steps, v, &h0), &x, &g.x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "x {r:?}");
        let r = grad_check(|v| objective(&steps, &x, v), &h0, &g.h0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "h0 {r:?}");
    }

    #[test]
    fn backward_zero_upstream_and_unreachable_h0() {
        let mut rng = Rng::new(10);
        let mut steps = random_steps(&mut rng, 6, 3);
        let x = random_vec(&mut rng, 6);
        let h0 = random_vec(&mut rng, 3);
        let g = scan_backward(&steps, &x, &h0, &[0.0; 6]).unwrap();
        for v in [&g.a_bar, &g.b_bar, &g.c, &g.x, &g.h0] {
            assert!(v.iter().all(|&e| e == 0.0));
        }
        steps.a_bar.iter_mut().for_each(|a| *a = 0.0);
        let w = random_vec(&mut rng, 6);
        let g = scan_backward(&steps, &x, &h0, &w).unwrap();
        assert!(g.h0.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn long_stable_scan_stays_bounded() {
        let ssm = ContinuousSsm::from_log(&[-1.0, 0.0, 1.0, 2.0], vec![1.0; 4], vec![1.0; 4]).unwrap();
        let step = ssm.discretize(0.05).unwrap();
        let len = 100_000;
        let steps = Steps::constant(&step, len).unwrap();
        let mut rng = Rng::new(11);
        let x: Vec<f64> = (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let (out, states) = scan_with_states(&steps, &x, &[0.0; 4]).unwrap();
        // |h| <= sup|b_bar x| / (1 - a_bar)
        let bound = (0..4)
            .map(|i| step.b_bar[i].abs() / (1.0 - step.a_bar[i]))
            .fold(0.0, f64::max);
        assert!(states.iter().all(|h| h.abs() <= bound + 1e-9));
        assert!(out.y.iter().all(|y| y.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scan_composes_across_split(seed in any::<u64>(), len in 2usize..40, split in 0usize..40) {
            let split = split % len;
            let mut rng = Rng::new(seed);
            let steps = random_steps(&mut rng, len, 3);
            let x = random_vec(&mut rng, len);
            let h0 = random_vec(&mut rng, 3);
            let whole = scan_sequential(&steps, &x, &h0).unwrap();
            let first = scan_sequential(&steps.slice(0, split), &x[..split], &h0).unwrap();
            let second = scan_sequential(&steps.slice(split, len), &x[split..], &first.h_final).unwrap();
            let mut joined = first.y.clone();
            joined.extend_from_slice(&second.y);
            prop_assert_eq!(joined, whole.y);
            prop_assert_eq!(second.h_final, whole.h_final);
        }

        #[test]
        fn scan_is_linear_in_input(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let len = 64;
            let steps = random_steps(&mut rng, len, 4);
            let x1 = random_vec(&mut rng, len);
            let x2 = random_vec(&mut rng, len);
            let zero = vec![0.0; 4];
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
            let y = scan_sequential(&steps, &mix, &zero).unwrap().y;
            let y1 = scan_sequential(&steps, &x1, &zero).unwrap().y;
            let y2 = scan_sequential(&steps, &x2, &zero).unwrap().y;
            for t in 0..len {
                prop_assert!((y[t] - (alpha * y1[t] + beta * y2[t])).abs() < 1e-9);
            }
        }

        #[test]
        fn chunked_equals_sequential_for_all_chunk_sizes(seed in any::<u64>(), len in 1usize..300) {
            let mut rng = Rng::new(seed);
            let steps = random_steps(&mut rng, len, 4);
            let x = random_vec(&mut rng, len);
            let h0 = random_vec(&mut rng, 4);
            let seq = scan_sequential(&steps, &x, &h0).unwrap();
            for chunk in [1, 2, 7, 64, len, len + 5] {
                let chk = scan_chunked(&steps, &x, &h0, chunk).unwrap();
                prop_assert!(max_abs_diff(&seq.y, &chk.y) < 1e-9);
                prop_assert!(max_abs_diff(&seq.h_final, &chk.h_final) < 1e-9);
            }
        }
    }
}
