//! K-means codebooks over teacher frames and the soft labels derived from them.

use std::path::Path;

use rand::Rng;

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::{softmax, sq_dist, Tensor};
use crate::rng;

/// Independent k-means++ restarts; the lowest-inertia run wins.
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Tensor,
    /// Sum of squared distances of the fitting samples to their nearest centroid.
    pub inertia: f64,
    /// Number of samples the inertia was summed over.
    pub num_samples: usize,
}

impl Codebook {
    pub fn new(centroids: Tensor, inertia: f64, num_samples: usize) -> Self {
        Self {
            centroids,
            inertia,
            num_samples,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Per-sample inertia, the distance scale of the soft labels.
    pub fn label_scale(&self) -> f64 {
        self.inertia / self.num_samples.max(1) as f64
    }

    fn sq_dists(&self, h: &[f64]) -> Vec<f64> {
        (0..self.num_clusters())
            .map(|i| sq_dist(h, self.centroids.row(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let inertia = Tensor::filled(&[1, 1], self.inertia);
        let count = Tensor::filled(&[1, 1], self.num_samples as f64);
        container::write(path, &[&self.centroids, &inertia, &count])
    }

    /// Loads a codebook file. A file without the sample-count tensor is
    /// treated as already per-sample (`num_samples = 1`).
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = container::read(path)?;
        if !(2..=3).contains(&tensors.len()) {
            return Err(Error::ContainerShape(format!(
                "codebook: expected 2 or 3 tensors, found {}",
                tensors.len()
            )));
        }
        container::expect_shape(&tensors[1], 1, 1, "codebook inertia")?;
        let num_samples = match tensors.get(2) {
            Some(t) => {
                container::expect_shape(t, 1, 1, "codebook sample count")?;
                t.data()[0] as usize
            }
            None => 1,
        };
        Ok(Self {
            inertia: tensors[1].data()[0],
            centroids: tensors[0].clone(),
            num_samples,
        })
    }
}

fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(i));
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp_init<R: Rng>(samples: &Tensor, n: usize, rng: &mut R) -> Tensor {
    let (m, d) = (samples.rows(), samples.cols());
    let mut centroids = Tensor::zeros(&[n, d]);
    centroids
        .row_mut(0)
        .copy_from_slice(samples.row(rng.random_range(0..m)));
    let mut dist: Vec<f64> = (0..m)
        .map(|i| sq_dist(samples.row(i), centroids.row(0)))
        .collect();
    for c in 1..n {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(samples.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(samples.row(i), centroids.row(c)));
        }
    }
    centroids
}

struct LloydRun {
    centroids: Tensor,
    inertia: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn lloyd(samples: &Tensor, mut centroids: Tensor, max_iters: usize, tol: f64) -> LloydRun {
    let (m, d) = (samples.rows(), samples.cols());
    let n = centroids.rows();
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut assign = Vec::with_capacity(m);
        let mut inertia = 0.0;
        for i in 0..m {
            let (c, dist) = nearest(samples.row(i), &centroids);
            assign.push((c, dist));
            inertia += dist;
        }
        history.push(inertia);

        let mut sums = Tensor::zeros(&[n, d]);
        let mut counts = vec![0usize; n];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(samples.row(i)) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; m];
        for c in 0..n {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // empty cluster: re-seed from the sample farthest from its centroid
                let far = assign
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                next.row_mut(c).copy_from_slice(samples.row(far));
            }
        }
        let shift = centroids.sq_dist(&next);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let centroids = transfer_refine(samples, centroids);
    let inertia = (0..m).map(|i| nearest(samples.row(i), &centroids).1).sum();
    history.push(inertia);
    LloydRun {
        centroids,
        inertia,
        history,
    }
}

/// Hartigan-style single-point transfers on the nearest-centroid partition.
///
/// Moving `x` from cluster `a` to `b` changes the total squared error by
/// `n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2`; points move while that is
/// negative. Lloyd stops at partitions where such moves still pay off.
fn transfer_refine(samples: &Tensor, centroids: Tensor) -> Tensor {
    let (m, d) = (samples.rows(), samples.cols());
    let n = centroids.rows();
    let mut assign: Vec<usize> = (0..m).map(|i| nearest(samples.row(i), &centroids).0).collect();
    let mut counts = vec![0usize; n];
    let mut sums = Tensor::zeros(&[n, d]);
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums.row_mut(a).iter_mut().zip(samples.row(i)) {
            *s += x;
        }
    }
    if counts.contains(&0) {
        return centroids;
    }
    let dist_to_mean = |x: &[f64], sums: &Tensor, c: usize, k: usize| -> f64 {
        x.iter()
            .zip(sums.row(c))
            .map(|(v, s)| (v - s / k as f64).powi(2))
            .sum()
    };
    for _ in 0..100 {
        let mut moved = false;
        for i in 0..m {
            let a = assign[i];
            if counts[a] < 2 {
                continue;
            }
            let x = samples.row(i);
            let na = counts[a] as f64;
            let out = na / (na - 1.0) * dist_to_mean(x, &sums, a, counts[a]);
            let mut best = (a, out);
            for b in (0..n).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost = nb / (nb + 1.0) * dist_to_mean(x, &sums, b, counts[b]);
                if cost < best.1 {
                    best = (b, cost);
                }
            }
            if best.0 != a && out - best.1 > 1e-12 * out.max(f64::MIN_POSITIVE) {
                let b = best.0;
                for (j, &v) in x.iter().enumerate() {
                    sums.row_mut(a)[j] -= v;
                    sums.row_mut(b)[j] += v;
                }
                counts[a] -= 1;
                counts[b] += 1;
                assign[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    // exact means from the final partition
    let mut out = Tensor::zeros(&[n, d]);
    let mut exact = Tensor::zeros(&[n, d]);
    for (i, &a) in assign.iter().enumerate() {
        for (s, &x) in exact.row_mut(a).iter_mut().zip(samples.row(i)) {
            *s += x;
        }
    }
    for c in 0..n {
        let inv = 1.0 / counts[c] as f64;
        for (dst, &s) in out.row_mut(c).iter_mut().zip(exact.row(c)) {
            *dst = s * inv;
        }
    }
    out
}

/// Lloyd's algorithm from k-means++ seeds, best of [`DEFAULT_RESTARTS`] runs.
pub fn fit_kmeans(samples: &Tensor, n: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Codebook> {
    fit_kmeans_restarts(samples, n, seed, max_iters, tol, DEFAULT_RESTARTS)
}

pub fn fit_kmeans_restarts(
    samples: &Tensor,
    n: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    restarts: usize,
) -> Result<Codebook> {
    let m = samples.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one cluster".into()));
    }
    if m < n {
        return Err(Error::TooFewSamples {
            samples: m,
            clusters: n,
        });
    }
    let mut best: Option<LloydRun> = None;
    for r in 0..restarts.max(1) {
        let mut g = rng::stream(seed, r as u64);
        let run = lloyd(samples, kmeans_pp_init(samples, n, &mut g), max_iters, tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    Ok(Codebook::new(best.centroids, best.inertia, m))
}

/// Distance-based soft label over all centroids:
/// `l(i) ∝ exp(-|h - c_i|^2 / (tau_prime * I))` with `I` the per-sample inertia.
pub fn soft_label(h: &[f64], cb: &Codebook, tau_prime: f64) -> Result<Vec<f64>> {
    let scale = cb.label_scale();
    if scale <= 0.0 {
        return Err(Error::ZeroInertia);
    }
    if !(tau_prime > 0.0) {
        return Err(Error::InvalidConfig(format!("tau_prime {tau_prime} must be > 0")));
    }
    let logits: Vec<f64> = cb.sq_dists(h).iter().map(|d| -d / scale).collect();
    Ok(softmax(&logits, tau_prime))
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn hard_label(h: &[f64], cb: &Codebook) -> usize {
    nearest(h, &cb.centroids).0
}
