//! Continual-learning metrics over the accuracy matrix `R`, where `R[k][i]` is
//! the accuracy on task `i` after training task `k` (zero-based here):
//!
//! ```text
//! BWT = 1/(n−1) Σ_{i<n−1} (R[n−1][i] − R[i][i])
//! FWT = 1/(n−1) Σ_{i≥1}   (R[i−1][i] − b[i])
//! F   = 1/(n−1) Σ_{i<n−1} (max_{k≥i} R[k][i] − R[n−1][i])
//! ```
//!
//! plus within-batch retrieval accuracy, alignment drift and a small PCA.

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Pair};
use crate::error::{Error, Result};
use crate::regularize::EncoderSnapshot;
use crate::tensor::Tensor;

/// Image-to-text top-1 accuracy with the chance level of the batches used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub accuracy: f64,
    pub chance: f64,
    pub batches: usize,
}

/// Retrieval accuracy from precomputed unit embeddings, in consecutive
/// batches of `batch` rows. A trailing partial batch is dropped unless it is
/// the only one.
pub fn retrieval_from_embeddings(v: &Tensor, t: &Tensor, batch: usize) -> Result<Retrieval> {
    if v.shape() != t.shape() || v.shape().len() != 2 {
        return Err(Error::dim("retrieval_accuracy", v.shape(), t.shape()));
    }
    let n = v.rows();
    if n == 0 || batch == 0 {
        return Err(Error::Input("retrieval needs at least one pair and batch >= 1".into()));
    }
    let size = batch.min(n);
    let batches = n / size;
    let mut correct_frac = 0.0;
    for b in 0..batches {
        let lo = b * size;
        let mut correct = 0usize;
        for i in lo..lo + size {
            let vi = v.row(i);
            let mut best = lo;
            let mut best_s = f64::NEG_INFINITY;
            for j in lo..lo + size {
                let s: f64 = vi.iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                if s > best_s {
                    best = j;
                    best_s = s;
                }
            }
            correct += usize::from(best == i);
        }
        correct_frac += correct as f64 / size as f64;
    }
    Ok(Retrieval {
        accuracy: correct_frac / batches as f64,
        chance: 1.0 / size as f64,
        batches,
    })
}

pub fn retrieval_accuracy(model: &DualEncoder, eval: &[Pair], batch: usize) -> Result<Retrieval> {
    if eval.is_empty() {
        return Err(Error::Input("retrieval needs a non-empty eval set".into()));
    }
    let (v, t) = model.embed_pairs(eval)?;
    retrieval_from_embeddings(&v, &t, batch)
}

fn check_square(r: &[Vec<f64>]) -> Result<usize> {
    let n = r.len();
    if n < 2 {
        return Err(Error::Input(format!("transfer metrics need n >= 2 tasks, got {n}")));
    }
    if r.iter().any(|row| row.len() != n) {
        return Err(Error::Input("accuracy matrix must be square".into()));
    }
    Ok(n)
}

pub fn backward_transfer(r: &[Vec<f64>]) -> Result<f64> {
    let n = check_square(r)?;
    let s: f64 = (0..n - 1).map(|i| r[n - 1][i] - r[i][i]).sum();
    Ok(s / (n - 1) as f64)
}

pub fn forward_transfer(r: &[Vec<f64>], baseline: &[f64]) -> Result<f64> {
    let n = check_square(r)?;
    if baseline.len() != n {
        return Err(Error::Input(format!(
            "baseline has {} entries, expected {n}",
            baseline.len()
        )));
    }
    let s: f64 = (1..n).map(|i| r[i - 1][i] - baseline[i]).sum();
    Ok(s / (n - 1) as f64)
}

pub fn forgetting_rate(r: &[Vec<f64>]) -> Result<f64> {
    let n = check_square(r)?;
    let s: f64 = (0..n - 1)
        .map(|i| {
            let best = (i..n).map(|k| r[k][i]).fold(f64::NEG_INFINITY, f64::max);
            best - r[n - 1][i]
        })
        .sum();
    Ok(s / (n - 1) as f64)
}

pub fn average_accuracy(r: &[Vec<f64>]) -> Result<f64> {
    let last = r.last().ok_or_else(|| Error::Input("empty accuracy matrix".into()))?;
    if last.is_empty() {
        return Err(Error::Input("empty accuracy matrix".into()));
    }
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Alignment change since the first snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Mean over probe pairs of `cos_then − cos_now` on true pairs.
    pub delta_cos: f64,
    /// Current over snapshot retrieval accuracy on the snapshot task's eval
    /// split; `None` when the snapshot accuracy is zero.
    pub retention: Option<f64>,
}

pub fn alignment_drift(snapshot: &EncoderSnapshot, model: &DualEncoder, eval: &[Pair], batch: usize) -> Result<Drift> {
    if snapshot.probe.is_empty() {
        return Err(Error::Input("snapshot probe batch is empty".into()));
    }
    let (v, t) = model.embed_pairs(&snapshot.probe)?;
    let n = snapshot.probe.len();
    let mut total = 0.0;
    for i in 0..n {
        let now: f64 = v.row(i).iter().zip(t.row(i)).map(|(a, b)| a * b).sum();
        total += snapshot.similarity.at(i, i) - now;
    }
    let then = retrieval_accuracy(&snapshot.encoder, eval, batch)?.accuracy;
    let retention = if then > 0.0 {
        Some(retrieval_accuracy(model, eval, batch)?.accuracy / then)
    } else {
        None
    };
    Ok(Drift {
        delta_cos: total / n as f64,
        retention,
    })
}

/// Top-k principal components of row data.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// N×k projections of the centered data.
    pub coords: Tensor,
    /// k×d unit component vectors (zero rows past the data rank).
    pub components: Tensor,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITER: usize = 200_000;

/// Principal components by power iteration with deflation on the covariance.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    if x.shape().len() != 2 {
        return Err(Error::dim("pca_project", x.shape(), &[]));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < k || k == 0 || k > d {
        return Err(Error::Input(format!(
            "pca_project needs 1 <= k <= min(N, d), got k={k}, N={n}, d={d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::with_capacity(k * d);
    let mut explained = Vec::with_capacity(k);
    for _ in 0..k {
        let (lambda, v) = power_iteration(&cov, d);
        if !(trace > 0.0) || lambda <= 1e-12 * trace {
            components.extend(std::iter::repeat_n(0.0, d));
            explained.push(0.0);
            continue;
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        components.extend_from_slice(&v);
        explained.push(lambda / trace);
    }
    let mut coords = Vec::with_capacity(n * k);
    for row in &centered {
        for c in 0..k {
            coords.push(
                row.iter()
                    .zip(&components[c * d..(c + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum(),
            );
        }
    }
    Ok(Pca {
        coords: Tensor::new(vec![n, k], coords)?,
        components: Tensor::new(vec![k, d], components)?,
        explained,
    })
}

fn power_iteration(m: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() / d as f64).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITER {
        let mut w = vec![0.0; d];
        for a in 0..d {
            w[a] = (0..d).map(|b| m[a * d + b] * v[b]).sum();
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let pivot = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Equal-width histogram over `[min, max]` as `(bin_left, count)` rows.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c))
        .collect()
}

/// Sample skewness `m3 / m2^{3/2}`; zero for constant data.
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 > 0.0 {
        m3 / m2.powf(1.5)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_alignment() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let r = retrieval_from_embeddings(&e, &e, 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.chance, 0.25);
    }

    #[test]
    fn identical_text_resolves_to_first_index() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
        let t = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        assert_eq!(retrieval_from_embeddings(&v, &t, 4).unwrap().accuracy, 0.25);
        assert_eq!(retrieval_from_embeddings(&v, &t, 2).unwrap().accuracy, 0.5);
    }

    #[test]
    fn small_eval_set_is_one_batch() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let r = retrieval_from_embeddings(&e, &e, 32).unwrap();
        assert_eq!((r.batches, r.chance), (1, 1.0 / 3.0));
    }

    #[test]
    fn transfer_hand_cases() {
        let r = vec![vec![0.9, 0.10], vec![0.8, 0.85]];
        assert!((backward_transfer(&r).unwrap() + 0.1).abs() < 1e-12);
        assert!((forward_transfer(&r, &[0.0, 0.03]).unwrap() - 0.07).abs() < 1e-12);
        assert!((average_accuracy(&r).unwrap() - 0.825).abs() < 1e-12);
        let r = vec![vec![0.9, 0.1], vec![0.6, 0.7]];
        assert!((forgetting_rate(&r).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_task_is_rejected() {
        assert!(backward_transfer(&[vec![0.5]]).is_err());
        assert!(forgetting_rate(&[vec![0.5, 0.2], vec![0.1]]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.1, 0.9, 1.0], 4);
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 5);
        assert_eq!(h[0], (0.0, 3));
        assert_eq!(h[3].1, 2);
    }
}
