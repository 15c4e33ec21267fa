use super::tensor::{dot, Tensor};

/// Variance floor for instance normalization.
pub const IN_EPS: f64 = 1e-5;

/// Probability floor applied before taking logs in [`kl_divergence`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Standardizes every channel of a `[T x D]` matrix over the time axis.
///
/// Population variance; the divisor is `sqrt(max(var, IN_EPS))`, so channels
/// with variance above the floor come out with exactly unit variance and
/// constant channels map to zero.
pub fn instance_normalize(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    if t == 0 {
        return out;
    }
    let n = t as f64;
    for c in 0..d {
        let mean = (0..t).map(|i| x.at(i, c)).sum::<f64>() / n;
        let var = (0..t).map(|i| (x.at(i, c) - mean).powi(2)).sum::<f64>() / n;
        let std = var.max(IN_EPS).sqrt();
        for i in 0..t {
            out.set(i, c, (x.at(i, c) - mean) / std);
        }
    }
    out
}

/// `softmax(x / temperature)`, max-shifted.
pub fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Cosine similarity of `a` against every row of `b`. Zero-norm operands give 0.
pub fn cosine_rows(a: &[f64], b: &Tensor) -> Vec<f64> {
    let na = dot(a, a).sqrt();
    (0..b.rows())
        .map(|i| {
            let row = b.row(i);
            let nb = dot(row, row).sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot(a, row) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// `KL(target || prediction)` with both distributions floored at [`PROB_FLOOR`].
pub fn kl_divergence(target: &[f64], prediction: &[f64]) -> f64 {
    let kl: f64 = target
        .iter()
        .zip(prediction)
        .map(|(&q, &p)| {
            let q = q.max(PROB_FLOOR);
            let p = p.max(PROB_FLOOR);
            q * (q.ln() - p.ln())
        })
        .sum();
    kl.max(0.0)
}
