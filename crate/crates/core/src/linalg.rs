//! Small dense-vector helpers over `[f64]`.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Sum of equal-length vectors, reduced as a balanced pairwise tree over the
/// given order. The result depends only on the order of `items`.
pub fn pairwise_sum(items: &[Vec<f64>], dim: usize) -> Vec<f64> {
    match items.len() {
        0 => vec![0.0; dim],
        1 => items[0].clone(),
        n => {
            let (l, r) = items.split_at(n / 2);
            let mut left = pairwise_sum(l, dim);
            let right = pairwise_sum(r, dim);
            for (a, b) in left.iter_mut().zip(&right) {
                *a += b;
            }
            left
        }
    }
}

/// Scalar counterpart of [`pairwise_sum`].
pub fn pairwise_sum_scalar(items: &[f64]) -> f64 {
    match items.len() {
        0 => 0.0,
        1 => items[0],
        n => {
            let (l, r) = items.split_at(n / 2);
            pairwise_sum_scalar(l) + pairwise_sum_scalar(r)
        }
    }
}

/// Per-coordinate sample mean and unbiased sample variance.
pub fn mean_and_variance(samples: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mut mean = pairwise_sum(samples, dim);
    if n == 0 {
        return (mean, vec![0.0; dim]);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    if n > 1 {
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        for v in &mut var {
            *v /= (n - 1) as f64;
        }
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let items: Vec<Vec<f64>> = (0..13).map(|i| vec![i as f64, -(i as f64) * 2.0]).collect();
        assert_eq!(pairwise_sum(&items, 2), vec![78.0, -156.0]);
        assert_eq!(pairwise_sum(&[], 3), vec![0.0; 3]);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let s = vec![vec![2.0, 3.0]; 5];
        let (m, v) = mean_and_variance(&s, 2);
        assert_eq!(m, vec![2.0, 3.0]);
        assert_eq!(v, vec![0.0, 0.0]);
    }
}
