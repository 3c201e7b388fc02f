//! Labelled datasets and the multinomial logistic-regression global model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::digest_f64;

/// Feature vectors with class labels in `0..classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, x: Vec<Vec<f64>>, y: Vec<usize>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Self::new_allow_empty(dim, classes, x, y)
    }

    /// Client shards may legitimately be empty under strong label skew.
    pub(crate) fn new_allow_empty(
        dim: usize,
        classes: usize,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
    ) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension {
                context: "dataset labels",
                expected: x.len(),
                actual: y.len(),
            });
        }
        for xi in &x {
            if xi.len() != dim {
                return Err(Error::Dimension {
                    context: "dataset sample",
                    expected: dim,
                    actual: xi.len(),
                });
            }
        }
        if let Some(bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::validation(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self { dim, classes, x, y })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.x[i], self.y[i])
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &c in &self.y {
            h[c] += 1;
        }
        h
    }

    /// Concatenates datasets with matching shapes.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or(Error::Empty("dataset list"))?;
        let mut out = first.clone();
        for p in iter {
            if p.dim != out.dim || p.classes != out.classes {
                return Err(Error::validation(
                    "cannot concatenate datasets of different shape",
                ));
            }
            out.x.extend(p.x.iter().cloned());
            out.y.extend_from_slice(&p.y);
        }
        Ok(out)
    }

    pub fn digest(&self) -> u64 {
        let mut flat: Vec<f64> = Vec::with_capacity(self.x.len() * (self.dim + 1));
        for (xi, &yi) in self.x.iter().zip(&self.y) {
            flat.extend_from_slice(xi);
            flat.push(yi as f64);
        }
        digest_f64(&flat)
    }

    pub(crate) fn into_parts(self) -> (Vec<Vec<f64>>, Vec<usize>) {
        (self.x, self.y)
    }
}

/// Multinomial logistic regression: weights `W` (classes x dim, row-major)
/// followed by one bias per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub dim: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

pub fn model_param_len(dim: usize, classes: usize) -> usize {
    classes * (dim + 1)
}

impl GlobalModel {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            params: vec![0.0; model_param_len(dim, classes)],
        }
    }

    pub fn new(dim: usize, classes: usize, params: Vec<f64>) -> Result<Self> {
        let m = Self { dim, classes, params };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = model_param_len(self.dim, self.classes);
        if self.params.len() != expected {
            return Err(Error::Dimension {
                context: "global model",
                expected,
                actual: self.params.len(),
            });
        }
        crate::error::ensure_finite(&self.params, || "global model parameters".into())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let bias = &self.params[self.classes * d..];
        (0..self.classes)
            .map(|c| {
                let w = &self.params[c * d..(c + 1) * d];
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c]
            })
            .collect()
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        z.iter()
            .enumerate()
            .fold(0, |best, (c, v)| if *v > z[best] { c } else { best })
    }

    /// Cross-entropy of one sample and, if `grad` is given, accumulates its
    /// gradient scaled by `weight`.
    pub(crate) fn sample_loss(&self, x: &[f64], y: usize, grad: Option<(&mut [f64], f64)>) -> f64 {
        let z = self.logits(x);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum_exp.ln();
        if let Some((g, weight)) = grad {
            let d = self.dim;
            for c in 0..self.classes {
                let p = (z[c] - lse).exp();
                let delta = weight * (p - if c == y { 1.0 } else { 0.0 });
                let row = &mut g[c * d..(c + 1) * d];
                for (gj, xj) in row.iter_mut().zip(x) {
                    *gj += delta * xj;
                }
                g[self.classes * d + c] += delta;
            }
        }
        lse - z[y]
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if data.dim() != self.dim || data.classes() != self.classes {
            return Err(Error::validation(format!(
                "model expects dim {} / {} classes, dataset has dim {} / {} classes",
                self.dim,
                self.classes,
                data.dim(),
                data.classes()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient over a subset of sample indices.
    pub fn loss_and_grad(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        if indices.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        let mut g = vec![0.0; self.params.len()];
        let w = 1.0 / indices.len() as f64;
        let mut loss = 0.0;
        for &i in indices {
            let (x, y) = data.sample(i);
            loss += self.sample_loss(x, y, Some((&mut g, w)));
        }
        Ok((loss * w, g))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let hits = data
            .features()
            .iter()
            .zip(data.labels())
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Mean cross-entropy `F(w, U)` over a dataset.
pub fn eval_loss(model: &GlobalModel, data: &Dataset) -> Result<f64> {
    model.check_data(data)?;
    let total: f64 = data
        .features()
        .iter()
        .zip(data.labels())
        .map(|(x, &y)| model.sample_loss(x, y, None))
        .sum();
    Ok(total / data.len() as f64)
}

/// A triggered evaluation set whose labels are all the attacker's target.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedSet {
    pub data: Dataset,
    pub target_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackdoorMetrics {
    /// Loss `F(w, U')` on the triggered samples relabelled to the target.
    pub loss: f64,
    /// Fraction of triggered samples classified as the target.
    pub accuracy: f64,
}

pub fn eval_backdoor_metrics(model: &GlobalModel, poisoned: &PoisonedSet) -> Result<BackdoorMetrics> {
    let loss = eval_loss(model, &poisoned.data)?;
    let hits = poisoned
        .data
        .features()
        .iter()
        .filter(|x| model.predict(x) == poisoned.target_label)
        .count();
    Ok(BackdoorMetrics {
        loss,
        accuracy: hits as f64 / poisoned.data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            2,
            3,
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0], vec![0.5, 0.5]],
            vec![0, 1, 2, 1],
        )
        .unwrap()
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let data = Dataset::new(3, 10, vec![vec![0.3, -1.0, 2.0]; 4], vec![0, 3, 9, 5]).unwrap();
        let m = GlobalModel::zeros(3, 10);
        assert!((eval_loss(&m, &data).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_model_has_tiny_loss() {
        let data = Dataset::new(1, 2, vec![vec![1.0]], vec![1]).unwrap();
        let m = GlobalModel::new(1, 2, vec![0.0, 40.0, 0.0, 0.0]).unwrap();
        assert!(eval_loss(&m, &data).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy();
        let m = GlobalModel::new(2, 3, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.05, -0.1, 0.0]).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (_, g) = m.loss_and_grad(&data, &idx).unwrap();
        let h = 1e-6;
        for (k, gk) in g.iter().enumerate() {
            let mut p = m.clone();
            p.params[k] += h;
            let up = eval_loss(&p, &data).unwrap();
            p.params[k] -= 2.0 * h;
            let down = eval_loss(&p, &data).unwrap();
            assert!(((up - down) / (2.0 * h) - gk).abs() < 1e-8);
        }
    }

    #[test]
    fn ties_predict_lowest_index() {
        let m = GlobalModel::zeros(2, 4);
        assert_eq!(m.predict(&[1.0, 2.0]), 0);
    }

    #[test]
    fn backdoor_accuracy_extremes() {
        let data = toy();
        let always_two = GlobalModel::new(2, 3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let target2 = PoisonedSet {
            data: data.clone(),
            target_label: 2,
        };
        assert_eq!(
            eval_backdoor_metrics(&always_two, &target2).unwrap().accuracy,
            1.0
        );
        let target0 = PoisonedSet {
            data,
            target_label: 0,
        };
        assert_eq!(
            eval_backdoor_metrics(&always_two, &target0).unwrap().accuracy,
            0.0
        );
        assert_eq!(
            eval_backdoor_metrics(&GlobalModel::zeros(2, 3), &target0)
                .unwrap()
                .accuracy,
            1.0
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Dataset::new(2, 2, vec![], vec![]).is_err());
        assert!(Dataset::new(2, 2, vec![vec![1.0]], vec![0]).is_err());
        assert!(Dataset::new(1, 2, vec![vec![1.0]], vec![2]).is_err());
        assert!(GlobalModel::new(2, 2, vec![0.0; 5]).is_err());
        assert!(eval_loss(&GlobalModel::zeros(3, 3), &toy()).is_err());
    }
}
