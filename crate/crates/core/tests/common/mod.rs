//! Reference implementations used as oracles by the integration tests.
//! Written for clarity, not speed; none of them call into the crate's math.
#![allow(dead_code)]

use vardro::model_kit::{Activation, ModelParams};

/// Best objective over every vertex of simplex ∩ box: each coordinate sits at
/// a bound except one pivot that takes the remaining mass.
pub fn vertex_max(l: &[f64], eps: &[f64]) -> f64 {
    let n = l.len();
    let a: Vec<f64> = eps.iter().map(|e| (-e).exp() / n as f64).collect();
    let b: Vec<f64> = eps.iter().map(|e| e.exp() / n as f64).collect();
    let mut best = f64::NEG_INFINITY;
    for pivot in 0..n {
        for mask in 0u32..(1 << n) {
            if mask & (1 << pivot) != 0 {
                continue;
            }
            let mut q: Vec<f64> = (0..n)
                .map(|i| if mask & (1 << i) != 0 { b[i] } else { a[i] })
                .collect();
            let rest: f64 = (0..n).filter(|&i| i != pivot).map(|i| q[i]).sum();
            q[pivot] = 1.0 - rest;
            if q[pivot] < a[pivot] - 1e-12 || q[pivot] > b[pivot] + 1e-12 {
                continue;
            }
            best = best.max(q.iter().zip(l).map(|(q, l)| q * l).sum());
        }
    }
    best
}

/// Logits and hidden pre-activations, computed with explicit index loops.
pub fn naive_forward(model: &ModelParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = model.architecture;
    let p = &model.params;
    let d = a.input_dim;
    let b = a.bias;
    let layer = |w: &[f64], input: &[f64], out: usize| -> Vec<f64> {
        let n = input.len();
        let mut z = vec![0.0; out];
        for k in 0..out {
            for j in 0..n {
                z[k] += w[k * n + j] * input[j];
            }
            if b {
                z[k] += w[out * n + k];
            }
        }
        z
    };
    match a.hidden {
        None => (layer(p, x, a.classes), Vec::new()),
        Some(h) => {
            let split = h * (d + usize::from(b));
            let pre = layer(&p[..split], x, h);
            let act: Vec<f64> = pre
                .iter()
                .map(|&z| match a.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => z.max(0.0),
                })
                .collect();
            (layer(&p[split..], &act, a.classes), pre)
        }
    }
}

/// Label-smoothed cross-entropy by the textbook formula, no max shift.
pub fn naive_loss(model: &ModelParams, x: &[f64], label: usize, smoothing: f64) -> f64 {
    let (z, _) = naive_forward(model, x);
    let k = z.len() as f64;
    let norm: f64 = z.iter().map(|v| v.exp()).sum();
    z.iter()
        .enumerate()
        .map(|(c, v)| {
            let y = if c == label {
                1.0 - smoothing + smoothing / k
            } else {
                smoothing / k
            };
            -y * (v.exp() / norm).ln()
        })
        .sum()
}

/// Central differences of `naive_loss` in every parameter.
pub fn numeric_gradient(
    model: &ModelParams,
    x: &[f64],
    label: usize,
    smoothing: f64,
    h: f64,
) -> Vec<f64> {
    let mut m = model.clone();
    (0..model.params.len())
        .map(|i| {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = naive_loss(&m, x, label, smoothing);
            m.params[i] = orig - h;
            let down = naive_loss(&m, x, label, smoothing);
            m.params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Maximizes `q * l0 + (1 - q) * l1` over a uniform grid of `q` subject to
/// `KL(q || uniform) <= rho` for two samples.
pub fn kl_grid_two(l0: f64, l1: f64, rho: f64, step: f64) -> f64 {
    let kl = |q: f64| {
        let t = |p: f64| if p > 0.0 { p * (2.0 * p).ln() } else { 0.0 };
        t(q) + t(1.0 - q)
    };
    let steps = (1.0 / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.5);
    for i in 0..=steps {
        let q = i as f64 * step;
        if kl(q) <= rho {
            let v = q * l0 + (1.0 - q) * l1;
            if v > best.0 {
                best = (v, q);
            }
        }
    }
    best.1
}
