//! Closed-form canonical correlation analysis. Used as the shallow
//! article-illustration learner, to map trained network outputs into a shared
//! retrieval space, and as an independent check on the CCA loss.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde_json::json;

use crate::error::{Error, Result};
use crate::ndkit::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Z,
    Y,
}

/// Fitted projections. Columns of `wz` / `wy` are canonical directions,
/// ordered by decreasing correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub wz: DMatrix<f64>,
    pub wy: DMatrix<f64>,
    pub correlations: Vec<f64>,
    pub reg_eps: f64,
    pub mean_z: DVector<f64>,
    pub mean_y: DVector<f64>,
}

/// Stacks equally long vectors as the columns of a `d x n` tensor.
pub fn stack_columns(cols: &[Vec<f64>]) -> Result<Tensor> {
    let n = cols.len();
    let d = cols.first().map_or(0, Vec::len);
    if cols.iter().any(|c| c.len() != d) {
        return Err(Error::Shape("columns of unequal length".into()));
    }
    let mut data = vec![0.0; d * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    Tensor::from_vec(&[d, n], data)
}

fn to_matrix(t: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} must be a d x n matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = x.column_mean();
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (c, mean)
}

fn inv_sqrt(s: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(s);
    if let Some(bad) = eig.eigenvalues.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numerical(format!(
            "{what} has non-positive eigenvalue {bad:e} after regularization"
        )));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fits `k` canonical pairs between the columns of `z` (`d_z x n`) and `y`
/// (`d_y x n`), with `reg_eps * I` added to both view covariances.
pub fn fit_cca(z: &Tensor, y: &Tensor, k: usize, reg_eps: f64) -> Result<CcaModel> {
    let zm = to_matrix(z, "Z")?;
    let ym = to_matrix(y, "Y")?;
    let n = zm.ncols();
    if ym.ncols() != n {
        return Err(Error::Shape(format!("views have {} and {} samples", n, ym.ncols())));
    }
    if n < 3 {
        return Err(Error::Data(format!("CCA needs at least 3 samples, got {n}")));
    }
    let (dz, dy) = (zm.nrows(), ym.nrows());
    if k == 0 || k > dz.min(dy) {
        return Err(Error::Config(format!("k = {k} outside 1..={}", dz.min(dy))));
    }
    if !(reg_eps >= 0.0) {
        return Err(Error::Config(format!("reg_eps must be non-negative, got {reg_eps}")));
    }
    let (zc, mean_z) = center(&zm);
    let (yc, mean_y) = center(&ym);
    let norm = 1.0 / (n as f64 - 1.0);
    let szz = &zc * zc.transpose() * norm + DMatrix::identity(dz, dz) * reg_eps;
    let syy = &yc * yc.transpose() * norm + DMatrix::identity(dy, dy) * reg_eps;
    let szy = &zc * yc.transpose() * norm;
    let szz_is = inv_sqrt(szz, "Sigma_zz")?;
    let syy_is = inv_sqrt(syy, "Sigma_yy")?;
    let gamma = &szz_is * szy * &syy_is;

    let svd = gamma.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut uk = DMatrix::zeros(dz, k);
    let mut vk = DMatrix::zeros(dy, k);
    let mut correlations = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        let mut ucol = u.column(src).clone_owned();
        let mut vcol = vt.row(src).transpose();
        let imax = ucol.iamax();
        if ucol[imax] < 0.0 {
            ucol = -ucol;
            vcol = -vcol;
        }
        uk.set_column(j, &ucol);
        vk.set_column(j, &vcol);
        correlations.push(svd.singular_values[src].clamp(0.0, 1.0));
    }
    Ok(CcaModel {
        wz: szz_is * uk,
        wy: syy_is * vk,
        correlations,
        reg_eps,
        mean_z,
        mean_y,
    })
}

impl CcaModel {
    pub fn k(&self) -> usize {
        self.correlations.len()
    }

    /// `Wᵀ (X - mean)` for a `d x n` input; returns `k x n`.
    pub fn project(&self, side: Side, x: &Tensor) -> Result<Tensor> {
        let xm = to_matrix(x, "projection input")?;
        let (w, mean) = match side {
            Side::Z => (&self.wz, &self.mean_z),
            Side::Y => (&self.wy, &self.mean_y),
        };
        if xm.nrows() != w.nrows() {
            return Err(Error::Shape(format!(
                "projection input has {} rows, model expects {}",
                xm.nrows(),
                w.nrows()
            )));
        }
        let mut c = xm;
        for mut col in c.column_iter_mut() {
            col -= mean;
        }
        let p = w.transpose() * c;
        let mut data = Vec::with_capacity(p.len());
        for r in 0..p.nrows() {
            data.extend(p.row(r).iter());
        }
        Tensor::from_vec(&[p.nrows(), p.ncols()], data)
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        let mat = |m: &DMatrix<f64>| {
            let mut data = Vec::with_capacity(m.len());
            for r in 0..m.nrows() {
                data.extend(m.row(r).iter());
            }
            Tensor::from_vec(&[m.nrows(), m.ncols()], data).expect("consistent shape")
        };
        ck.push(format!("{prefix}.wz"), mat(&self.wz));
        ck.push(format!("{prefix}.wy"), mat(&self.wy));
        ck.push(format!("{prefix}.mean_z"), Tensor::vector(self.mean_z.iter().copied().collect()));
        ck.push(format!("{prefix}.mean_y"), Tensor::vector(self.mean_y.iter().copied().collect()));
        ck.push(format!("{prefix}.correlations"), Tensor::vector(self.correlations.clone()));
        ck.push(format!("{prefix}.reg_eps"), Tensor::vector(vec![self.reg_eps]));
    }

    pub fn load_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |n: &str| ck.require(&format!("{prefix}.{n}"));
        let mat = |t: &Tensor| -> Result<DMatrix<f64>> { to_matrix(t, "checkpoint matrix") };
        let model = CcaModel {
            wz: mat(get("wz")?)?,
            wy: mat(get("wy")?)?,
            mean_z: DVector::from_column_slice(get("mean_z")?.data()),
            mean_y: DVector::from_column_slice(get("mean_y")?.data()),
            correlations: get("correlations")?.data().to_vec(),
            reg_eps: get("reg_eps")?.data().first().copied().unwrap_or(0.0),
        };
        let k = model.k();
        if model.wz.ncols() != k || model.wy.ncols() != k || model.mean_z.len() != model.wz.nrows() {
            return Err(Error::Data(format!("checkpoint CCA block `{prefix}` is inconsistent")));
        }
        Ok(model)
    }

    pub fn describe(&self) -> serde_json::Value {
        json!({
            "k": self.k(),
            "d_z": self.wz.nrows(),
            "d_y": self.wy.nrows(),
            "reg_eps": self.reg_eps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(d: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[d, n], (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn apply(a: &[f64], x: &Tensor) -> Tensor {
        let (d, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; d * n];
        for i in 0..d {
            for j in 0..n {
                out[i * n + j] = (0..d).map(|k| a[i * d + k] * x.data()[k * n + j]).sum();
            }
        }
        Tensor::from_vec(&[d, n], out).unwrap()
    }

    #[test]
    fn identical_views_fully_correlated() {
        let z = random(3, 100, 1);
        let m = fit_cca(&z, &z, 3, 1e-8).unwrap();
        for c in &m.correlations {
            assert!((c - 1.0).abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn invertible_map_keeps_full_correlation() {
        let z = random(3, 100, 2);
        let y = apply(&[1.0, 2.0, 0.0, 0.0, 1.0, -1.0, 3.0, 0.0, 1.0], &z);
        let m = fit_cca(&z, &y, 3, 1e-8).unwrap();
        assert!(m.correlations.iter().all(|c| (c - 1.0).abs() < 1e-6));
    }

    #[test]
    fn one_dimensional_views_give_abs_pearson() {
        for seed in 0..5 {
            let z = random(1, 40, 10 + seed);
            let noise = random(1, 40, 20 + seed);
            let y: Vec<f64> = z.data().iter().zip(noise.data()).map(|(a, b)| -0.7 * a + b).collect();
            let y = Tensor::from_vec(&[1, 40], y).unwrap();
            let m = fit_cca(&z, &y, 1, 0.0).unwrap();
            let (a, b) = (z.data(), y.data());
            let (ma, mb) = (a.iter().sum::<f64>() / 40.0, b.iter().sum::<f64>() / 40.0);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            let pearson = cov / (va * vb).sqrt();
            assert!((m.correlations[0] - pearson.abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn projections_whiten_training_data() {
        let z = random(4, 200, 3);
        let y = random(3, 200, 4);
        let m = fit_cca(&z, &y, 3, 1e-8).unwrap();
        assert!(m.correlations.windows(2).all(|w| w[0] >= w[1]));
        for (side, x) in [(Side::Z, &z), (Side::Y, &y)] {
            let p = m.project(side, x).unwrap();
            let (k, n) = (p.shape()[0], p.shape()[1]);
            for a in 0..k {
                for b in 0..k {
                    let g: f64 = (0..n).map(|j| p.data()[a * n + j] * p.data()[b * n + j]).sum::<f64>()
                        / (n as f64 - 1.0);
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((g - expect).abs() < 1e-6, "{g}");
                }
            }
        }
    }

    #[test]
    fn projection_edge_cases() {
        let z = random(2, 30, 5);
        let y = random(2, 30, 6);
        let m = fit_cca(&z, &y, 2, 1e-6).unwrap();
        let at_mean = Tensor::from_vec(&[2, 1], m.mean_z.iter().copied().collect()).unwrap();
        let p = m.project(Side::Z, &at_mean).unwrap();
        assert!(p.data().iter().all(|v| v.abs() < 1e-12));
        assert!(m.project(Side::Y, &random(3, 4, 7)).is_err());
        assert!(fit_cca(&z, &y, 3, 1e-6).is_err());
        assert!(fit_cca(&random(2, 2, 1), &random(2, 2, 2), 1, 1e-6).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = fit_cca(&random(3, 30, 8), &random(2, 30, 9), 2, 1e-4).unwrap();
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        m.save_into(&mut ck, "cca");
        let back = CcaModel::load_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "cca").unwrap();
        assert_eq!(back, m);
    }
}
