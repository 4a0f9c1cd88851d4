//! Task losses with analytic gradients with respect to the head output:
//! multinomial logistic, l1, great-circle distance and the trace-norm CCA loss.

pub(crate) mod linalg;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkit::Tensor;
use linalg::{inv_sqrt_spd, svd, Mat};

/// Mean Earth radius in kilometres (default).
pub const MEAN_EARTH_RADIUS_KM: f64 = 6371.0;
/// Alternative 6137 km radius constant, selectable for comparison with
/// figures computed under it.
pub const ALT_EARTH_RADIUS_KM: f64 = 6137.0;

/// Below this value of `1 - phi^2` the GCD gradient is dropped.
pub const GCD_GRAD_GUARD: f64 = 1e-12;

/// Loss value and gradient with respect to the head output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub loss: f64,
    pub grad_z: Tensor,
}

/// Multinomial logistic loss on logits `z` for class `y`.
pub fn softmax_xent(z: &[f64], y: usize) -> Result<LossBundle> {
    if z.len() < 2 {
        return Err(Error::Shape(format!("softmax over {} classes", z.len())));
    }
    if y >= z.len() {
        return Err(Error::Data(format!("class {y} out of range for {} logits", z.len())));
    }
    let p = softmax(z);
    let mut grad = p.clone();
    grad[y] -= 1.0;
    // -log p_y computed in log-space to stay accurate when p_y -> 1
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(LossBundle { loss: lse - z[y], grad_z: Tensor::vector(grad) })
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `|z - y|` with subgradient `sign(z - y)` (0 at equality).
pub fn l1_loss(z: f64, y: f64) -> LossBundle {
    let d = z - y;
    let g = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    LossBundle { loss: d.abs(), grad_z: Tensor::vector(vec![g]) }
}

/// `0.5 * ||z - y||^2`, the plain regression alternative to the GCD loss.
pub fn euclidean_loss(z: &[f64], y: &[f64]) -> Result<LossBundle> {
    if z.len() != y.len() {
        return Err(Error::Shape(format!("euclidean loss: {} vs {} values", z.len(), y.len())));
    }
    let g: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
    let loss = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
    Ok(LossBundle { loss, grad_z: Tensor::vector(g) })
}

/// Predicted and true (lat, lon) in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPair {
    pub z: (f64, f64),
    pub y: (f64, f64),
}

impl GeoPair {
    pub fn new(z: (f64, f64), y: (f64, f64)) -> Self {
        GeoPair { z, y }
    }

    /// Longitude difference `z2 - y2`.
    pub fn delta(&self) -> f64 {
        self.z.1 - self.y.1
    }

    /// Spherical law of cosines term, clamped to [-1, 1].
    pub fn phi(&self) -> f64 {
        let (z1, y1) = (self.z.0, self.y.0);
        let phi = y1.sin() * z1.sin() + y1.cos() * z1.cos() * self.delta().cos();
        phi.clamp(-1.0, 1.0)
    }
}

/// Great-circle distance in kilometres on a sphere of radius `radius_km`.
pub fn gcd_km(pair: &GeoPair, radius_km: f64) -> f64 {
    radius_km * pair.phi().acos()
}

/// Central angle between prediction and label, with gradient with respect
/// to the prediction. The gradient is zeroed where `1 - phi^2` falls below
/// [`GCD_GRAD_GUARD`] (coincident and antipodal points).
pub fn gcd_loss(pair: &GeoPair) -> LossBundle {
    let phi = pair.phi();
    let loss = phi.acos();
    let denom = 1.0 - phi * phi;
    let grad = if denom < GCD_GRAD_GUARD {
        vec![0.0, 0.0]
    } else {
        let (z1, y1, d) = (pair.z.0, pair.y.0, pair.delta());
        let pre = -1.0 / denom.sqrt();
        vec![
            pre * (y1.sin() * z1.cos() - y1.cos() * z1.sin() * d.cos()),
            pre * (-y1.cos() * z1.cos() * d.sin()),
        ]
    };
    LossBundle { loss, grad_z: Tensor::vector(grad) }
}

/// A batch of head outputs and labels for the CCA loss, both `d x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaBatch {
    pub z: Tensor,
    pub y: Tensor,
    pub reg_eps: f64,
    /// Number of correlation components; `d` unless only reporting.
    pub k: usize,
}

pub const DEFAULT_CCA_REG: f64 = 1e-4;

impl CcaBatch {
    pub fn new(z: Tensor, y: Tensor, reg_eps: f64) -> Result<Self> {
        let k = z.shape().first().copied().unwrap_or(0);
        let b = CcaBatch { z, y, reg_eps, k };
        b.validate()?;
        Ok(b)
    }

    fn dims(&self) -> (usize, usize) {
        (self.z.shape()[0], self.z.shape()[1])
    }

    fn validate(&self) -> Result<()> {
        if self.z.shape().len() != 2 || self.z.shape() != self.y.shape() {
            return Err(Error::Shape(format!(
                "CCA loss needs two equal d x m matrices, got {:?} and {:?}",
                self.z.shape(),
                self.y.shape()
            )));
        }
        let (d, m) = self.dims();
        if d == 0 {
            return Err(Error::Shape("CCA loss with d = 0".into()));
        }
        if m < 2 {
            return Err(Error::Data(format!("CCA loss needs at least 2 samples, got {m}")));
        }
        if !(self.reg_eps > 0.0) {
            return Err(Error::Config(format!("reg_eps must be positive, got {}", self.reg_eps)));
        }
        if self.k == 0 || self.k > d {
            return Err(Error::Config(format!("k = {} outside 1..={d}", self.k)));
        }
        Ok(())
    }
}

struct CcaTerms {
    zc: Mat,
    yc: Mat,
    szz_is: Mat,
    syy_is: Mat,
    u: Mat,
    s: Vec<f64>,
    v: Mat,
}

fn centered(t: &Tensor) -> Mat {
    let (d, m) = (t.shape()[0], t.shape()[1]);
    let mut out = Mat::from_vec(d, m, t.data().to_vec());
    for r in 0..d {
        let row = &mut out.data[r * m..(r + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

fn cca_terms(b: &CcaBatch) -> Result<CcaTerms> {
    b.validate()?;
    let (d, m) = b.dims();
    let zc = centered(&b.z);
    let yc = centered(&b.y);
    let norm = 1.0 / (m as f64 - 1.0);
    let reg = Mat::identity(d).scale(b.reg_eps);
    let szz = zc.matmul_t(&zc).scale(norm).add(&reg);
    let syy = yc.matmul_t(&yc).scale(norm).add(&reg);
    let szy = zc.matmul_t(&yc).scale(norm);
    let szz_is = inv_sqrt_spd(&szz, "Sigma_zz")?;
    let syy_is = inv_sqrt_spd(&syy, "Sigma_yy")?;
    let gamma = szz_is.matmul(&szy).matmul(&syy_is);
    let dec = svd(&gamma);
    Ok(CcaTerms { zc, yc, szz_is, syy_is, u: dec.u, s: dec.s, v: dec.v })
}

/// Sum of the top `k` canonical correlations of the batch.
pub fn cca_correlation_sum(b: &CcaBatch) -> Result<f64> {
    let t = cca_terms(b)?;
    Ok(t.s.iter().take(b.k).sum())
}

/// Negative total canonical correlation (trace norm of the whitened
/// cross-covariance) and its gradient with respect to Z.
pub fn cca_loss(b: &CcaBatch) -> Result<LossBundle> {
    let (d, m) = b.dims();
    if b.k != d {
        return Err(Error::Config(format!(
            "CCA loss gradient is only defined for k = d ({d}); got k = {}",
            b.k
        )));
    }
    let t = cca_terms(b)?;
    let loss = -t.s.iter().sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::Numerical("CCA loss is not finite".into()));
    }

    let mut ud = t.u.clone();
    for r in 0..d {
        for c in 0..d {
            *ud.at_mut(r, c) *= t.s[c];
        }
    }
    let nabla_zz = t.szz_is.matmul(&ud.matmul_t(&t.u)).matmul(&t.szz_is).scale(-0.5);
    let nabla_zy = t.szz_is.matmul(&t.u.matmul_t(&t.v)).matmul(&t.syy_is);
    let grad = nabla_zz
        .matmul(&t.zc)
        .scale(2.0)
        .add(&nabla_zy.matmul(&t.yc))
        .scale(-1.0 / (m as f64 - 1.0));
    Ok(LossBundle { loss, grad_z: Tensor::from_vec(&[d, m], grad.data)? })
}

/// Which loss trains the geolocation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeoLoss {
    #[default]
    Gcd,
    Euclidean,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndkit::grad_check;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    type R = rand_chacha::ChaCha8Rng;

    fn haversine(a: (f64, f64), b: (f64, f64), r: f64) -> f64 {
        let dlat = b.0 - a.0;
        let dlon = b.1 - a.1;
        let h = (dlat / 2.0).sin().powi(2) + a.0.cos() * b.0.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * r * h.sqrt().min(1.0).asin()
    }

    #[test]
    fn softmax_cases() {
        let b = softmax_xent(&[0.0; 4], 2).unwrap();
        assert!((b.loss - 4f64.ln()).abs() < 1e-12);
        assert!((b.loss - 1.386294).abs() < 1e-6);
        let b = softmax_xent(&[0.0, 30.0, 0.0], 1).unwrap();
        assert!(b.loss < 1e-12);
        assert!(softmax_xent(&[0.0, 1.0], 2).is_err());
        assert!(softmax_xent(&[0.0], 0).is_err());
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = R::seed_from_u64(1);
        for _ in 0..20 {
            let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..5);
            let b = softmax_xent(&z, y).unwrap();
            assert!(b.grad_z.data().iter().sum::<f64>().abs() < 1e-12);
            let f = |p: &[Tensor]| softmax_xent(p[0].data(), y).unwrap().loss;
            let err = grad_check(f, &[Tensor::vector(z)], &[b.grad_z], 1e-6).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn l1_cases() {
        let b = l1_loss(2.0, 2.0);
        assert_eq!((b.loss, b.grad_z.data()[0]), (0.0, 0.0));
        let b = l1_loss(3.0, 1.0);
        assert_eq!((b.loss, b.grad_z.data()[0]), (2.0, 1.0));
        let b = l1_loss(-2.0, 5.0);
        assert_eq!((b.loss, b.grad_z.data()[0]), (7.0, -1.0));
    }

    #[test]
    fn gcd_basic_values() {
        let p = GeoPair::new((0.3, 1.0), (0.3, 1.0));
        assert_eq!(gcd_km(&p, MEAN_EARTH_RADIUS_KM), 0.0);
        let q = GeoPair::new((0.0, 0.0), (0.0, FRAC_PI_2));
        let d = gcd_km(&q, 6371.0);
        assert!((d - FRAC_PI_2 * 6371.0).abs() <= 1e-9 * d);
        assert!((d - 10007.5).abs() < 0.1);
    }

    #[test]
    fn gcd_matches_haversine() {
        let mut rng = R::seed_from_u64(2);
        for _ in 0..100 {
            let a = (rng.gen_range(-FRAC_PI_2..FRAC_PI_2), rng.gen_range(-PI..PI));
            let b = (rng.gen_range(-FRAC_PI_2..FRAC_PI_2), rng.gen_range(-PI..PI));
            let p = GeoPair::new(a, b);
            let d = gcd_km(&p, 6371.0);
            let h = haversine(a, b, 6371.0);
            assert!((d - h).abs() <= 1e-6 * h, "{d} vs {h}");
            assert_eq!(gcd_km(&GeoPair::new(b, a), 6371.0), d);
        }
    }

    #[test]
    fn gcd_loss_singular_points() {
        let b = gcd_loss(&GeoPair::new((0.2, 0.5), (0.2, 0.5)));
        assert_eq!(b.loss, 0.0);
        assert_eq!(b.grad_z.data(), [0.0, 0.0]);
        let b = gcd_loss(&GeoPair::new((0.0, 0.0), (0.0, PI)));
        assert!((b.loss - PI).abs() < 1e-12);
        assert_eq!(b.grad_z.data(), [0.0, 0.0]);
    }

    #[test]
    fn gcd_loss_gradient() {
        let mut rng = R::seed_from_u64(3);
        let mut checked = 0;
        while checked < 20 {
            let y = (rng.gen_range(-1.4..1.4), rng.gen_range(-PI..PI));
            let z = (rng.gen_range(-1.4..1.4), rng.gen_range(-PI..PI));
            let p = GeoPair::new(z, y);
            let phi = p.phi();
            if phi * phi > 1.0 - 1e-6 {
                continue;
            }
            let b = gcd_loss(&p);
            assert!((0.0..=PI).contains(&b.loss));
            let f = |t: &[Tensor]| gcd_loss(&GeoPair::new((t[0].data()[0], t[0].data()[1]), y)).loss;
            let err = grad_check(f, &[Tensor::vector(vec![z.0, z.1])], &[b.grad_z], 1e-6).unwrap();
            assert!(err < 1e-6, "{err}");
            checked += 1;
        }
    }

    #[test]
    fn euclidean_loss_values() {
        let b = euclidean_loss(&[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(b.loss, 2.5);
        assert_eq!(b.grad_z.data(), [1.0, -2.0]);
    }

    fn random_batch(d: usize, m: usize, seed: u64, reg: f64) -> CcaBatch {
        let mut rng = R::seed_from_u64(seed);
        let z: Vec<f64> = (0..d * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CcaBatch::new(
            Tensor::from_vec(&[d, m], z).unwrap(),
            Tensor::from_vec(&[d, m], y).unwrap(),
            reg,
        )
        .unwrap()
    }

    #[test]
    fn cca_self_correlation() {
        let b = random_batch(3, 50, 4, 1e-8);
        let same = CcaBatch::new(b.z.clone(), b.z.clone(), 1e-8).unwrap();
        let l = cca_loss(&same).unwrap();
        assert!((l.loss + 3.0).abs() < 1e-3, "{}", l.loss);
    }

    #[test]
    fn cca_loss_in_range() {
        for seed in 0..10 {
            let b = random_batch(4, 20, seed, 1e-4);
            let l = cca_loss(&b).unwrap().loss;
            assert!((-4.0..=0.0).contains(&l));
        }
    }

    #[test]
    fn cca_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let b = random_batch(3, 20, 10 + seed, 1e-4);
            let g = cca_loss(&b).unwrap();
            let y = b.y.clone();
            let f = |t: &[Tensor]| {
                cca_loss(&CcaBatch::new(t[0].clone(), y.clone(), 1e-4).unwrap()).unwrap().loss
            };
            let err = grad_check(f, &[b.z.clone()], &[g.grad_z], 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn cca_invariant_to_invertible_maps() {
        let b = random_batch(3, 40, 5, 1e-6);
        let base = cca_loss(&b).unwrap().loss;
        let a = Mat::from_vec(3, 3, vec![2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.2, 0.0, 3.0]);
        let ym = Mat::from_vec(3, 40, b.y.data().to_vec());
        let ay = a.matmul(&ym);
        let t = CcaBatch::new(b.z.clone(), Tensor::from_vec(&[3, 40], ay.data).unwrap(), 1e-6).unwrap();
        assert!((cca_loss(&t).unwrap().loss - base).abs() < 1e-3);
    }

    #[test]
    fn cca_batch_validation() {
        let z = Tensor::zeros(&[2, 1]);
        assert!(CcaBatch::new(z.clone(), z, 1e-4).is_err());
        let b = random_batch(3, 10, 1, 1e-4);
        assert!(CcaBatch::new(b.z.clone(), Tensor::zeros(&[2, 10]), 1e-4).is_err());
        assert!(CcaBatch::new(b.z.clone(), b.y.clone(), 0.0).is_err());
        let mut partial = b.clone();
        partial.k = 2;
        assert!(cca_loss(&partial).is_err());
        assert!(cca_correlation_sum(&partial).unwrap() <= cca_correlation_sum(&b).unwrap());
    }
}
