//! Wall-clock scaling of the AG-SSM forward pass against full self-attention.

use std::collections::TryReserveError;
use std::time::Instant;

use agssm_core::ag_ssm::{ag_ssm_forward, AgSsmParams};
use agssm_core::rng::Rng;
use agssm_core::tensor::{matmul_into, Tensor};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub d_model: usize,
    pub state_dim: usize,
    pub runs: usize,
    pub attention: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Timing {
    Ms(f64),
    OutOfMemory,
}

impl Timing {
    fn to_json(&self) -> Value {
        match self {
            Timing::Ms(ms) => json!(ms),
            Timing::OutOfMemory => json!("oom"),
        }
    }

    fn ms(&self) -> Option<f64> {
        match self {
            Timing::Ms(ms) => Some(*ms),
            Timing::OutOfMemory => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub length: usize,
    pub ag_ssm: Timing,
    pub attention: Option<Timing>,
}

impl BenchRow {
    pub fn to_json(&self) -> Value {
        json!({
            "length": self.length,
            "ag_ssm_ms": self.ag_ssm.to_json(),
            "attention_ms": self.attention.as_ref().map(Timing::to_json),
        })
    }
}

fn try_vec(n: usize) -> Result<Vec<f64>, TryReserveError> {
    let mut v = Vec::new();
    v.try_reserve_exact(n)?;
    v.resize(n, 0.0);
    Ok(v)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Result<Vec<f64>, TryReserveError> {
    let mut v = try_vec(rows * cols)?;
    v.iter_mut().for_each(|x| *x = rng.normal());
    Ok(v)
}

fn median_ms(runs: usize, mut f: impl FnMut() -> Result<(), TryReserveError>) -> Timing {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        if f().is_err() {
            return Timing::OutOfMemory;
        }
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Timing::Ms(times[times.len() / 2])
}

/// Single-head softmax self-attention over `x: [t, d]`. Scores are computed
/// one query row at a time, so memory stays `O(t d)` while work is `O(t^2 d)`.
pub fn self_attention(x: &[f64], t: usize, d: usize, proj: &[Vec<f64>; 3]) -> Result<Vec<f64>, TryReserveError> {
    let mut q = try_vec(t * d)?;
    let mut k = try_vec(t * d)?;
    let mut v = try_vec(t * d)?;
    matmul_into(x, &proj[0], &mut q, t, d, d);
    matmul_into(x, &proj[1], &mut k, t, d, d);
    matmul_into(x, &proj[2], &mut v, t, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = try_vec(t * d)?;
    let mut scores = try_vec(t)?;
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let wgt = s / total;
            for (o, vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += wgt * vj;
            }
        }
    }
    Ok(out)
}

pub fn run(lengths: &[usize], s: &BenchSettings) -> Vec<BenchRow> {
    let mut rng = Rng::new(s.seed);
    let params = AgSsmParams::init(s.d_model, s.state_dim, &mut rng);
    let proj: [Vec<f64>; 3] = std::array::from_fn(|_| {
        (0..s.d_model * s.d_model)
            .map(|_| rng.normal() / (s.d_model as f64).sqrt())
            .collect()
    });
    let d = s.d_model;
    lengths
        .iter()
        .map(|&t| {
            let inputs = random_matrix(t, d, &mut rng).and_then(|xv| Ok((xv, random_matrix(t, d, &mut rng)?)));
            let Ok((xv, xa)) = inputs else {
                return BenchRow {
                    length: t,
                    ag_ssm: Timing::OutOfMemory,
                    attention: s.attention.then_some(Timing::OutOfMemory),
                };
            };
            let xv_t = Tensor::matrix(t, d, xv.clone()).expect("shape");
            let xa_t = Tensor::matrix(t, d, xa).expect("shape");
            let ag_ssm = median_ms(s.runs, || {
                let out = ag_ssm_forward(&xv_t, &xa_t, &params).expect("valid inputs");
                std::hint::black_box(out);
                Ok(())
            });
            let attention = s.attention.then(|| {
                median_ms(s.runs, || {
                    std::hint::black_box(self_attention(&xv, t, d, &proj)?);
                    Ok(())
                })
            });
            BenchRow {
                length: t,
                ag_ssm,
                attention,
            }
        })
        .collect()
}

/// `time(2T) / time(T)` for every consecutive pair whose lengths double.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<Value> {
    rows.windows(2)
        .filter(|w| w[1].length == 2 * w[0].length)
        .map(|w| {
            let ratio = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b / a);
            json!({
                "from": w[0].length,
                "to": w[1].length,
                "ag_ssm": ratio(w[0].ag_ssm.ms(), w[1].ag_ssm.ms()),
                "attention": ratio(
                    w[0].attention.as_ref().and_then(Timing::ms),
                    w[1].attention.as_ref().and_then(Timing::ms),
                ),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense reference with the full score matrix.
    fn attention_oracle(x: &[f64], t: usize, d: usize, proj: &[Vec<f64>; 3]) -> Vec<f64> {
        let mm = |w: &[f64]| {
            let mut o = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    o[i * d + j] = (0..d).map(|k| x[i * d + k] * w[k * d + j]).sum();
                }
            }
            o
        };
        let (q, k, v) = (mm(&proj[0]), mm(&proj[1]), mm(&proj[2]));
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for c in 0..d {
                    out[i * d + c] += e[j] / z * v[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn streaming_attention_matches_dense() {
        let mut rng = Rng::new(5);
        let (t, d) = (13, 4);
        let x: Vec<f64> = (0..t * d).map(|_| rng.normal()).collect();
        let proj: [Vec<f64>; 3] = std::array::from_fn(|_| (0..d * d).map(|_| rng.normal()).collect());
        let got = self_attention(&x, t, d, &proj).unwrap();
        let want = attention_oracle(&x, t, d, &proj);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_row_per_length() {
        let s = BenchSettings {
            d_model: 4,
            state_dim: 2,
            runs: 3,
            attention: true,
            seed: 0,
        };
        let rows = run(&[8, 16, 32], &s);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| matches!(r.ag_ssm, Timing::Ms(_))));
        assert_eq!(doubling_ratios(&rows).len(), 2);
    }
}
