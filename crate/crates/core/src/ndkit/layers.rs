//! Forward/backward kernels for the text CNN layers. The `Tensor` functions
//! check shapes; the slice kernels below them are the hot paths used by the
//! network code.

use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn expect_shape(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Text convolution over a `dim x len` input with `k` kernels of size
/// `dim x width` at stride 1, into a row-major `k x (len - width + 1)` buffer.
///
/// Columns at index `active` and beyond are taken to be zero, so output
/// positions whose window lies entirely in that region equal the bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_text_into(
    x: &[f64],
    dim: usize,
    len: usize,
    active: usize,
    kernels: &[f64],
    width: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let steps = len + 1 - width;
    let live = steps.min(active);
    for (k, row) in out.chunks_exact_mut(steps).enumerate() {
        row.fill(bias[k]);
        let kern = &kernels[k * dim * width..(k + 1) * dim * width];
        let row = &mut row[..live];
        for r in 0..dim {
            let xr = &x[r * len..(r + 1) * len];
            for s in 0..width {
                let wv = kern[r * width + s];
                if wv == 0.0 {
                    continue;
                }
                for (o, xv) in row.iter_mut().zip(&xr[s..s + live]) {
                    *o += wv * xv;
                }
            }
        }
    }
}

/// `out[k, t] = bias[k] + sum_{r, s} kernels[k, r, s] * x[r, t + s]`.
pub fn conv_text(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_shape(x, 2, "conv input")?;
    expect_shape(kernels, 3, "conv kernels")?;
    let (dim, len) = (x.shape()[0], x.shape()[1]);
    let (k, kd, width) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    if kd != dim {
        return Err(Error::Shape(format!("kernel height {kd} != input rows {dim}")));
    }
    if bias.shape() != [k] {
        return Err(Error::Shape(format!("bias shape {:?} != [{k}]", bias.shape())));
    }
    if len < width {
        return Err(Error::Shape(format!(
            "input length {len} shorter than kernel width {width}"
        )));
    }
    let mut out = Tensor::zeros(&[k, len + 1 - width]);
    conv_text_into(x.data(), dim, len, len, kernels.data(), width, bias.data(), out.data_mut());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dkernels: Tensor,
    pub dbias: Tensor,
}

/// Dense backward pass of [`conv_text`].
pub fn conv_text_backward(x: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (dim, len) = (x.shape()[0], x.shape()[1]);
    let (k, _, width) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    let steps = len + 1 - width;
    if grad_out.shape() != [k, steps] {
        return Err(Error::Shape(format!(
            "conv grad shape {:?} != [{k}, {steps}]",
            grad_out.shape()
        )));
    }
    let (xd, kd, g) = (x.data(), kernels.data(), grad_out.data());
    let mut dx = Tensor::zeros(&[dim, len]);
    let mut dk = Tensor::zeros(&[k, dim, width]);
    let mut db = Tensor::zeros(&[k]);
    for kk in 0..k {
        let grow = &g[kk * steps..(kk + 1) * steps];
        db.data_mut()[kk] = grow.iter().sum();
        for r in 0..dim {
            for s in 0..width {
                let widx = (kk * dim + r) * width + s;
                let mut acc = 0.0;
                for t in 0..steps {
                    acc += grow[t] * xd[r * len + t + s];
                    dx.data_mut()[r * len + t + s] += grow[t] * kd[widx];
                }
                dk.data_mut()[widx] = acc;
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dkernels: dk,
        dbias: db,
    })
}

/// Kernel and bias gradients of a convolution followed by global max-pooling,
/// accumulated in place. Only the pooled positions carry gradient, so this is
/// O(k * dim * width).
#[allow(clippy::too_many_arguments)]
pub fn conv_pooled_backward_into(
    x: &[f64],
    dim: usize,
    len: usize,
    width: usize,
    argmax: &[usize],
    grad_pooled: &[f64],
    dkernels: &mut [f64],
    dbias: &mut [f64],
) {
    for (k, (&t, &g)) in argmax.iter().zip(grad_pooled).enumerate() {
        if g == 0.0 {
            continue;
        }
        dbias[k] += g;
        let dk = &mut dkernels[k * dim * width..(k + 1) * dim * width];
        for r in 0..dim {
            let xr = &x[r * len + t..r * len + t + width];
            for (d, xv) in dk[r * width..(r + 1) * width].iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
}

/// Row-wise max with the first maximal index stored per row.
pub fn maxpool_rows(x: &[f64], cols: usize, out: &mut [f64], argmax: &mut [usize]) {
    for (k, row) in x.chunks_exact(cols).enumerate() {
        let mut best = 0;
        for t in 1..cols {
            if row[t] > row[best] {
                best = t;
            }
        }
        out[k] = row[best];
        argmax[k] = best;
    }
}

/// Global max-pooling over time, remembering where each maximum came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub argmax: Vec<usize>,
    pub steps: usize,
}

pub fn maxpool_time(x: &Tensor) -> Result<(Tensor, MaxPool)> {
    expect_shape(x, 2, "maxpool input")?;
    let (k, steps) = (x.shape()[0], x.shape()[1]);
    if steps == 0 {
        return Err(Error::Shape("maxpool over zero time steps".into()));
    }
    let mut out = Tensor::zeros(&[k]);
    let mut argmax = vec![0; k];
    maxpool_rows(x.data(), steps, out.data_mut(), &mut argmax);
    Ok((out, MaxPool { argmax, steps }))
}

impl MaxPool {
    /// Routes each channel's gradient to its stored argmax position.
    pub fn backward(&self, grad: &Tensor) -> Tensor {
        let k = self.argmax.len();
        let mut dx = Tensor::zeros(&[k, self.steps]);
        for (c, (&t, &g)) in self.argmax.iter().zip(grad.data()).enumerate() {
            dx.data_mut()[c * self.steps + t] = g;
        }
        dx
    }
}

pub fn fc_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let inp = x.len();
    for (o, (row, bv)) in out.iter_mut().zip(w.chunks_exact(inp).zip(b)) {
        *o = bv + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Accumulates `dw += g xᵀ`, `db += g` and, when given, `dx += Wᵀ g`.
pub fn fc_backward_into(
    w: &[f64],
    x: &[f64],
    g: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let inp = x.len();
    for (o, &gv) in g.iter().enumerate() {
        db[o] += gv;
        if gv == 0.0 {
            continue;
        }
        for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
            *d += gv * xv;
        }
    }
    if let Some(dx) = dx {
        for (o, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (d, wv) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d += gv * wv;
            }
        }
    }
}

/// `W x + b`.
pub fn fully_connected(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    expect_shape(w, 2, "fc weight")?;
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.len() != inp || b.len() != out {
        return Err(Error::Shape(format!(
            "fc: weight {:?}, bias {:?}, input {:?}",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    let mut y = Tensor::zeros(&[out]);
    fc_into(w.data(), b.data(), x.data(), y.data_mut());
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub dw: Tensor,
    pub db: Tensor,
    pub dx: Tensor,
}

pub fn fully_connected_backward(w: &Tensor, x: &Tensor, grad: &Tensor) -> Result<FcGrads> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if grad.len() != out || x.len() != inp {
        return Err(Error::Shape("fc backward shape mismatch".into()));
    }
    let mut g = FcGrads {
        dw: Tensor::zeros(&[out, inp]),
        db: Tensor::zeros(&[out]),
        dx: Tensor::zeros(&[inp]),
    };
    fc_backward_into(
        w.data(),
        x.data(),
        grad.data(),
        g.dw.data_mut(),
        g.db.data_mut(),
        Some(g.dx.data_mut()),
    );
    Ok(g)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    g.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(gv, &xv)| if xv <= 0.0 { *gv = 0.0 });
    g
}

/// Inverted dropout: survivors are scaled by 1/(1-ratio) in training so that
/// evaluation is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    ratio: f64,
}

impl Dropout {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("dropout ratio {ratio} must lie in [0, 1)")));
        }
        Ok(Dropout { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Per-entry multipliers for one forward pass.
    pub fn mask(&self, n: usize, mode: Mode, rng: &mut Rng) -> Vec<f64> {
        if mode == Mode::Eval || self.ratio == 0.0 {
            return vec![1.0; n];
        }
        let keep = 1.0 / (1.0 - self.ratio);
        (0..n)
            .map(|_| if rng.gen::<f64>() < self.ratio { 0.0 } else { keep })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> (Tensor, Vec<f64>) {
        let mask = self.mask(x.len(), mode, rng);
        let mut y = x.clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        (y, mask)
    }

    pub fn backward(mask: &[f64], grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        g
    }
}
