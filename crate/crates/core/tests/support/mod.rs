//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use petl_core::tensor::ParamStore;
use petl_core::{Result, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding are judged by absolute error instead.
pub const FD_FLOOR: f64 = 1e-4;

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(&normals(n, seed), shape).unwrap()
}

pub fn leaf(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = randn::<f64>(shape, seed);
    t.set_requires_grad(true);
    t
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (Scalar::to_f64(*x) - Scalar::to_f64(*y)).abs())
        .fold(0.0, f64::max)
}

pub fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| Scalar::to_f64(*v).to_bits()).collect()
}

/// Adds `scale · N(0, 1)` noise to every value in `store`.
pub fn perturb<T: Scalar>(store: &ParamStore<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter() {
        for v in p.tensor.data_mut().iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64(Scalar::to_f64(*v) + scale * e);
        }
    }
}

/// Reduces `y` to a scalar with fixed random weights, so that no gradient
/// vanishes by symmetry (a plain sum does after layer norm).
pub fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let w = Tensor::new(normals(y.numel(), seed), y.shape())?;
    Ok(y.mul(&w)?.sum())
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Central finite-difference check of `loss` against reverse mode, over every
/// element of every tensor in `wrt`.
pub fn gradcheck(wrt: &[Tensor<f64>], loss: impl Fn() -> Result<Tensor<f64>>) -> GradReport {
    for t in wrt {
        t.zero_grad();
    }
    loss().unwrap().backward().unwrap();
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (t, g) in wrt.iter().zip(&analytic) {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + FD_STEP;
            let up = loss().unwrap().item();
            t.data_mut()[i] = orig - FD_STEP;
            let down = loss().unwrap().item();
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(FD_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradReport { max_rel, checked }
}

/// Parameter tensors of a store, all switched to require gradients.
pub fn grad_leaves(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|p| {
            p.set_trainable(true);
            p.tensor.clone()
        })
        .collect()
}

/// Row-major matrix as nested rows, for the loop-based reference encoder.
pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor<f64>) -> Rows {
    let (_, c) = t.rows_cols();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn get(params: &ParamStore<f64>, name: &str) -> Vec<f64> {
    params.by_name(name).unwrap_or_else(|| panic!("missing {name}")).tensor.to_vec()
}

/// `x · Wᵀ + b` with `W: [d_out, d_in]`.
fn affine(x: &Rows, w: &[f64], b: &[f64]) -> Rows {
    let d_out = b.len();
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|o| b[o] + row.iter().zip(&w[o * row.len()..]).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * s * g[i] + b[i]).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention over explicitly concatenated key/value sequences.
pub fn ref_attention(q: &Rows, k: &Rows, v: &Rows, heads: usize) -> Rows {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (t, qt) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|ks| cols.clone().map(|c| qt[c] * ks[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (s, vs) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[t][c] += e[s] / z * vs[c];
                }
            }
        }
    }
    out
}

/// Loop-based post-LN transformer encoder reading its weights from the
/// registry. `prefix[l]`, when given, is prepended to layer `l`'s keys and
/// values before attention.
pub fn ref_transformer(params: &ParamStore<f64>, layers: usize, heads: usize, x: &Rows, prefix: Option<&[(Rows, Rows)]>) -> Rows {
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let lin = |x: &Rows, path: &str| affine(x, &get(params, &format!("{path}.weight")), &get(params, &format!("{path}.bias")));
    let ln = |x: &Rows, path: &str| norm(x, &get(params, &format!("{path}.weight")), &get(params, &format!("{path}.bias")));
    let mut h = x.clone();
    for l in 0..layers {
        let p = format!("layer.{l}");
        let q = lin(&h, &format!("{p}.attn.q"));
        let mut k = lin(&h, &format!("{p}.attn.k"));
        let mut v = lin(&h, &format!("{p}.attn.v"));
        if let Some(prefix) = prefix {
            let (pk, pv) = &prefix[l];
            k = pk.iter().chain(&k).cloned().collect();
            v = pv.iter().chain(&v).cloned().collect();
        }
        let a = lin(&ref_attention(&q, &k, &v, heads), &format!("{p}.attn.o"));
        let h1 = ln(&add(&h, &a), &format!("{p}.attn_norm"));
        let up: Rows = lin(&h1, &format!("{p}.ff.up"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = lin(&up, &format!("{p}.ff.down"));
        h = ln(&add(&h1, &f), &format!("{p}.ff_norm"));
    }
    h
}

pub fn rows_max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
