//! Shallow linear learners trained by primal SGD: a one-vs-rest hinge-loss
//! SVM for classification and an epsilon-insensitive SVR for regression.
//!
//! Both use the step size `eta0 / (1 + lambda * eta0 * t)`. After every
//! epoch the average of that epoch's iterates is scored on the full
//! regularized objective, and the best candidate so far (starting from the
//! zero model) is the one kept and returned.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkit::{Checkpoint, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { lambda: 1e-4, epochs: 20, eta0: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        SvrConfig { lambda: 1e-4, epsilon: 0.1, epochs: 20, eta0: 0.1, seed: 0 }
    }
}

/// One weight row and bias per output (class score or regression target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub epochs: usize,
    pub lambda: f64,
    pub epsilon: Option<f64>,
    /// Regularized training objective of the averaged weights after each
    /// epoch, one series per output.
    pub objective: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    /// Index of the highest score (first on ties).
    pub fn predict_class(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.weights[0], x) + self.bias[0]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        let (o, f) = (self.weights.len(), self.features());
        let w = Tensor::from_vec(&[o, f], self.weights.concat()).expect("rectangular weights");
        ck.push(format!("{prefix}.weight"), w);
        ck.push(format!("{prefix}.bias"), Tensor::vector(self.bias.clone()));
        let hyper = vec![self.epochs as f64, self.lambda, self.epsilon.unwrap_or(f64::NAN)];
        ck.push(format!("{prefix}.hyper"), Tensor::vector(hyper));
    }

    pub fn load_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let w = ck.require(&format!("{prefix}.weight"))?;
        let b = ck.require(&format!("{prefix}.bias"))?;
        let h = ck.require(&format!("{prefix}.hyper"))?;
        if w.shape().len() != 2 || b.len() != w.shape()[0] || h.len() != 3 {
            return Err(Error::Data(format!("checkpoint linear model `{prefix}` is inconsistent")));
        }
        let f = w.shape()[1];
        Ok(LinearModel {
            weights: w.data().chunks(f.max(1)).map(<[f64]>::to_vec).take(w.shape()[0]).collect(),
            bias: b.data().to_vec(),
            epochs: h.data()[0] as usize,
            lambda: h.data()[1],
            epsilon: Some(h.data()[2]).filter(|e| !e.is_nan()),
            objective: vec![],
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_features(x: &[Vec<f64>], n_targets: usize) -> Result<usize> {
    if x.len() != n_targets {
        return Err(Error::Shape(format!("{} feature rows for {} targets", x.len(), n_targets)));
    }
    let f = x.first().map_or(0, Vec::len);
    if f == 0 {
        return Err(Error::Data("no features".into()));
    }
    if let Some(i) = x.iter().position(|r| r.len() != f) {
        return Err(Error::Shape(format!("feature row {i} has {} entries, expected {f}", x[i].len())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    Ok(f)
}

fn check_hyper(lambda: f64, eta0: f64, epochs: usize) -> Result<()> {
    if !(lambda > 0.0) || !(eta0 > 0.0) || epochs == 0 {
        return Err(Error::Config(format!(
            "need lambda > 0, eta0 > 0 and epochs > 0 (got {lambda}, {eta0}, {epochs})"
        )));
    }
    Ok(())
}

/// Runs SGD on `lambda/2 |w|^2 + mean_i loss(w.x_i + b, i)` where `dloss`
/// returns a subgradient with respect to the score. Returns the kept
/// weights and bias and the kept objective after each epoch.
fn sgd_linear<L, D>(
    x: &[Vec<f64>],
    lambda: f64,
    eta0: f64,
    epochs: usize,
    rng_seed: u64,
    loss: L,
    dloss: D,
) -> (Vec<f64>, f64, Vec<f64>)
where
    L: Fn(f64, usize) -> f64,
    D: Fn(f64, usize) -> f64,
{
    let (n, f) = (x.len(), x[0].len());
    let mut w = vec![0.0; f];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    let objective_of = |w: &[f64], b: f64| {
        0.5 * lambda * dot(w, w) + (0..n).map(|i| loss(dot(w, &x[i]) + b, i)).sum::<f64>() / n as f64
    };
    let mut objective = Vec::with_capacity(epochs);
    let (mut best_w, mut best_b) = (vec![0.0; f], 0.0);
    let mut best = objective_of(&best_w, best_b);
    let mut wa = vec![0.0; f];
    for e in 0..epochs {
        order.shuffle(&mut seed::rng_indexed(rng_seed, "epoch", e as u64));
        wa.fill(0.0);
        let mut ba = 0.0;
        for &i in &order {
            let eta = eta0 / (1.0 + lambda * eta0 * t as f64);
            let g = dloss(dot(&w, &x[i]) + b, i);
            let shrink = 1.0 - eta * lambda;
            for (wv, xv) in w.iter_mut().zip(&x[i]) {
                *wv = shrink * *wv - eta * g * xv;
            }
            b -= eta * g;
            t += 1;
            wa.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
            ba += b;
        }
        wa.iter_mut().for_each(|a| *a /= n as f64);
        ba /= n as f64;
        let obj = objective_of(&wa, ba);
        if obj < best {
            best = obj;
            best_w.copy_from_slice(&wa);
            best_b = ba;
        }
        objective.push(best);
    }
    (best_w, best_b, objective)
}

/// One-vs-rest linear SVM. `x` holds one feature row per sample and
/// `y` the class indices; the class count is `max(y) + 1`.
pub fn train_linear_svm(x: &[Vec<f64>], y: &[usize], cfg: &SvmConfig) -> Result<LinearModel> {
    check_hyper(cfg.lambda, cfg.eta0, cfg.epochs)?;
    check_features(x, y.len())?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        y.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::Data("SVM training data contains a single class".into()));
    }
    if y.len() < classes {
        return Err(Error::Data(format!("{} samples for {classes} classes", y.len())));
    }
    let root = seed::derive(cfg.seed, "svm");
    let fits: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let target = |i: usize| if y[i] == c { 1.0 } else { -1.0 };
            sgd_linear(
                x,
                cfg.lambda,
                cfg.eta0,
                cfg.epochs,
                seed::derive_indexed(root, "class", c as u64),
                |s, i| (1.0 - target(i) * s).max(0.0),
                |s, i| if target(i) * s < 1.0 { -target(i) } else { 0.0 },
            )
        })
        .collect();
    finish(fits, cfg.epochs, cfg.lambda, None)
}

/// Linear epsilon-insensitive support vector regression for one scalar target.
pub fn train_svr(x: &[Vec<f64>], y: &[f64], cfg: &SvrConfig) -> Result<LinearModel> {
    check_hyper(cfg.lambda, cfg.eta0, cfg.epochs)?;
    check_features(x, y.len())?;
    if y.len() < 2 {
        return Err(Error::Data("SVR needs at least 2 samples".into()));
    }
    if !(cfg.epsilon >= 0.0) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("SVR needs epsilon >= 0 and finite targets".into()));
    }
    let eps = cfg.epsilon;
    let fit = sgd_linear(
        x,
        cfg.lambda,
        cfg.eta0,
        cfg.epochs,
        seed::derive(cfg.seed, "svr"),
        |s, i| ((s - y[i]).abs() - eps).max(0.0),
        |s, i| {
            let r = s - y[i];
            if r > eps {
                1.0
            } else if r < -eps {
                -1.0
            } else {
                0.0
            }
        },
    );
    finish(vec![fit], cfg.epochs, cfg.lambda, Some(eps))
}

fn finish(fits: Vec<(Vec<f64>, f64, Vec<f64>)>, epochs: usize, lambda: f64, epsilon: Option<f64>) -> Result<LinearModel> {
    let mut m = LinearModel { weights: vec![], bias: vec![], epochs, lambda, epsilon, objective: vec![] };
    for (w, b, o) in fits {
        m.weights.push(w);
        m.bias.push(b);
        m.objective.push(o);
    }
    if !m.is_finite() {
        return Err(Error::Numerical("linear model diverged".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    type R = rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = R::seed_from_u64(seed);
        let centers = [(-2.0, -1.0), (2.0, 1.5)];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x.push(vec![centers[c].0 + rng.gen_range(-1.0..1.0), centers[c].1 + rng.gen_range(-1.0..1.0)]);
            y.push(c);
        }
        (x, y)
    }

    fn accuracy(m: &LinearModel, x: &[Vec<f64>], y: &[usize]) -> f64 {
        x.iter().zip(y).filter(|(r, &c)| m.predict_class(r) == c).count() as f64 / y.len() as f64
    }

    #[test]
    fn separable_two_class_is_fit_exactly() {
        let (x, y) = blobs(200, 1);
        let m = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(accuracy(&m, &x, &y), 1.0);
        assert_eq!(m.weights.len(), 2);
    }

    #[test]
    fn three_classes() {
        let mut rng = R::seed_from_u64(3);
        let centers = [(0.0, 3.0), (3.0, -2.0), (-3.0, -2.0)];
        let x: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = centers[i % 3];
                vec![c.0 + rng.gen_range(-0.8..0.8), c.1 + rng.gen_range(-0.8..0.8)]
            })
            .collect();
        let y: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let m = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert!(accuracy(&m, &x, &y) >= 0.99);
    }

    #[test]
    fn epoch_objective_is_non_increasing() {
        for seed in 0..5 {
            let (x, y) = blobs(150, 10 + seed);
            let m = train_linear_svm(&x, &y, &SvmConfig { seed, ..SvmConfig::default() }).unwrap();
            for series in &m.objective {
                for w in series.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{series:?}");
                }
            }
        }
    }

    #[test]
    fn duplicated_data_gives_same_decisions() {
        let (x, y) = blobs(100, 4);
        let m = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let m2 = train_linear_svm(&x2, &y2, &SvmConfig::default()).unwrap();
        let (probe, _) = blobs(300, 99);
        for p in &probe {
            assert_eq!(m.predict_class(p), m2.predict_class(p));
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let (x, y) = blobs(100, 5);
        let m = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        let mut scaled = m.clone();
        scaled.weights.iter_mut().flatten().for_each(|v| *v *= 3.7);
        scaled.bias.iter_mut().for_each(|v| *v *= 3.7);
        for p in &x {
            assert_eq!(m.predict_class(p), scaled.predict_class(p));
        }
    }

    #[test]
    fn svm_errors() {
        let (x, _) = blobs(10, 1);
        assert!(matches!(train_linear_svm(&x, &[0; 10], &SvmConfig::default()), Err(Error::Data(_))));
        assert!(train_linear_svm(&x, &[0, 1], &SvmConfig::default()).is_err());
        assert!(train_linear_svm(&x[..2], &[0, 5], &SvmConfig::default()).is_err());
        assert!(train_linear_svm(&x, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], &SvmConfig { epochs: 0, ..SvmConfig::default() }).is_err());
    }

    #[test]
    fn deterministic() {
        let (x, y) = blobs(60, 6);
        let a = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        let b = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svr_constant_target() {
        let mut rng = R::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y = vec![3.0; 100];
        let m = train_svr(&x, &y, &SvrConfig { epsilon: 0.1, ..SvrConfig::default() }).unwrap();
        for r in &x {
            assert!((m.predict(r) - 3.0).abs() <= 0.1 + 1e-6, "{}", m.predict(r));
        }
    }

    #[test]
    fn svr_linear_target() {
        let mut rng = R::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - r[1] + 0.5).collect();
        let m = train_svr(&x, &y, &SvrConfig { epsilon: 0.01, ..SvrConfig::default() }).unwrap();
        let l1 = x.iter().zip(&y).map(|(r, t)| (m.predict(r) - t).abs()).sum::<f64>() / 200.0;
        assert!(l1 <= 0.02, "{l1}");
        let worst = x.iter().zip(&y).map(|(r, t)| (m.predict(r) - t).abs()).fold(0.0, f64::max);
        assert!(worst <= 2.0 * 0.01 + 0.02, "{worst}");
    }

    #[test]
    fn svr_wide_tube_allows_zero_weights() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 20.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| 0.01 * i as f64 / 20.0).collect();
        let m = train_svr(&x, &y, &SvrConfig { epsilon: 1.0, ..SvrConfig::default() }).unwrap();
        assert_eq!(m.weights[0], vec![0.0]);
        assert_eq!(m.bias[0], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (x, y) = blobs(40, 2);
        let m = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        m.save_into(&mut ck, "svm");
        let back = LinearModel::load_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "svm").unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.bias, m.bias);
        assert_eq!(back.epsilon, None);
    }
}
