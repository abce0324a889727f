use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BANDWIDTH_STEPS: usize = 200;
const P_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity.is_finite() && self.perplexity > 1.0) {
            return Err(Error::arg(format!(
                "perplexity must exceed 1, got {}",
                self.perplexity
            )));
        }
        if self.iterations == 0 || self.exaggeration_iters > self.iterations {
            return Err(Error::arg(format!(
                "need 1 <= exaggeration iterations ({}) <= iterations ({})",
                self.exaggeration_iters, self.iterations
            )));
        }
        if !(self.learning_rate > 0.0 && self.exaggeration >= 1.0) {
            return Err(Error::arg(
                "learning rate must be positive and exaggeration at least 1",
            ));
        }
        for m in [self.momentum, self.final_momentum] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::arg(format!("momentum {m} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// KL(P||Q) measured on the unexaggerated P when early exaggeration ends.
    pub kl_after_exaggeration: f64,
    pub final_kl: f64,
    pub config: TsneConfig,
}

impl Embedding {
    /// Fraction of points whose nearest other point in 2-D has the same label.
    pub fn nn_purity(&self) -> f64 {
        let n = self.coords.len();
        let mut same = 0;
        for i in 0..n {
            let nearest = (0..n).filter(|&j| j != i).min_by(|&a, &b| {
                sq_dist2(self.coords[i], self.coords[a])
                    .total_cmp(&sq_dist2(self.coords[i], self.coords[b]))
            });
            if nearest.is_some_and(|j| self.labels[j] == self.labels[i]) {
                same += 1;
            }
        }
        same as f64 / n as f64
    }
}

fn sq_dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Exact t-SNE of the rows of `features` (`[n, d]`) into 2-D.
pub fn tsne_embed(features: &Tensor, labels: &[usize], config: &TsneConfig) -> Result<Embedding> {
    config.validate()?;
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    if (n as f64) < 3.0 * config.perplexity {
        return Err(Error::arg(format!(
            "{n} points is too few for perplexity {} (need at least {})",
            config.perplexity,
            (3.0 * config.perplexity).ceil()
        )));
    }
    if d < 2 {
        return Err(Error::arg(format!(
            "feature dimension must be at least 2, got {d}"
        )));
    }
    if !features.all_finite() {
        return Err(Error::arg("features contain non-finite values"));
    }
    let dist = pairwise_sq_distances(features, n, d);
    if dist.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("all points are identical"));
    }
    let p = joint_probabilities(&dist, n, config.perplexity);

    let mut rng = SeededRng::new(config.seed);
    let mut y: Vec<f64> = (0..2 * n).map(|_| 1e-4 * rng.standard_normal()).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut kl_after_exaggeration = f64::NAN;

    for iter in 0..config.iterations {
        let exaggerating = iter < config.exaggeration_iters;
        let scale = if exaggerating {
            config.exaggeration
        } else {
            1.0
        };
        let momentum = if exaggerating {
            config.momentum
        } else {
            config.final_momentum
        };
        let z = student_kernel(&y, n, &mut num);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coef = (scale * p[i * n + j] - w / z) * w;
                gx += coef * (y[2 * i] - y[2 * j]);
                gy += coef * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(MIN_GAIN)
            };
            velocity[k] = momentum * velocity[k] - config.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        center(&mut y, n);
        if iter + 1 == config.exaggeration_iters {
            kl_after_exaggeration = kl_divergence(&p, &y, n, &mut num);
        }
    }
    let final_kl = kl_divergence(&p, &y, n, &mut num);
    if config.exaggeration_iters == 0 {
        kl_after_exaggeration = final_kl;
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(
            "t-SNE diverged to non-finite coordinates".into(),
        ));
    }
    Ok(Embedding {
        coords: y.chunks(2).map(|c| [c[0], c[1]]).collect(),
        labels: labels.to_vec(),
        kl_after_exaggeration,
        final_kl,
        config: config.clone(),
    })
}

fn pairwise_sq_distances(x: &Tensor, n: usize, d: usize) -> Vec<f64> {
    let data = x.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        let a = &data[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &data[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            dist[i * n + j] = s;
            dist[j * n + i] = s;
        }
    }
    dist
}

/// Symmetrized affinities with per-point Gaussian precision chosen so that
/// each conditional distribution has entropy `ln(perplexity)`.
fn joint_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..MAX_BANDWIDTH_STEPS {
            let h = conditional_row(d, i, beta, &mut row);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        conditional_row(d, i, beta, &mut row);
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] =
                    ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    p
}

/// Fills `row` with the conditional distribution of point `i` at precision
/// `beta` and returns its entropy in nats.
fn conditional_row(d: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let min = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r = if j == i {
            0.0
        } else {
            (-(d[j] - min) * beta).exp()
        };
        sum += *r;
    }
    let mut weighted = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r /= sum;
        if j != i {
            weighted += *r * (d[j] - min);
        }
    }
    sum.ln() + beta * weighted
}

fn student_kernel(y: &[f64], n: usize, num: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let w =
                1.0 / (1.0 + (y[2 * i] - y[2 * j]).powi(2) + (y[2 * i + 1] - y[2 * j + 1]).powi(2));
            num[i * n + j] = w;
            num[j * n + i] = w;
            z += 2.0 * w;
        }
    }
    z
}

fn kl_divergence(p: &[f64], y: &[f64], n: usize, num: &mut [f64]) -> f64 {
    let z = student_kernel(y, n, num);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[i * n + j] / z).max(P_FLOOR);
                kl += p[i * n + j] * (p[i * n + j] / q).ln();
            }
        }
    }
    kl
}

fn center(y: &mut [f64], n: usize) {
    for axis in 0..2 {
        let mean = (0..n).map(|i| y[2 * i + axis]).sum::<f64>() / n as f64;
        for i in 0..n {
            y[2 * i + axis] -= mean;
        }
    }
}
