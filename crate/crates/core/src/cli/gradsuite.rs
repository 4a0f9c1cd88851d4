//! Central finite-difference checks over every layer and loss, one row per
//! component.

use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use crate::captioner::{LstmConfig, LstmModel};
use crate::error::{Error, Result};
use crate::losses::{cca_loss, gcd_loss, l1_loss, softmax_xent, CcaBatch, GeoPair};
use crate::ndkit::layers::{
    conv_text, conv_text_backward, fully_connected, fully_connected_backward, maxpool_time, relu,
    relu_backward,
};
use crate::ndkit::{grad_check, grad_check_floor, Dropout, Mode, Tensor};
use crate::seed::{self, Rng};

pub const COMPONENTS: [&str; 10] = [
    "conv_text",
    "maxpool_time",
    "fully_connected",
    "relu",
    "dropout_eval",
    "lstm_unrolled",
    "softmax_xent",
    "l1_loss",
    "gcd_loss",
    "cca_loss",
];

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
const EPS: f64 = 1e-6;

/// Deliberate bugs, used to confirm the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the GCD loss gradient.
    GcdSign,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcd-sign" => Ok(Fault::GcdSign),
            _ => Err(Error::Config(format!("unknown fault `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub threshold: f64,
    /// Restricts the run to these components; all when empty.
    pub only: Vec<String>,
    pub fault: Option<Fault>,
    pub root_seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seeds: DEFAULT_SEEDS, threshold: DEFAULT_THRESHOLD, only: vec![], fault: None, root_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub component: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    #[serde(skip)]
    pub wall_ms: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Entries pushed at least `gap` away from zero, keeping their sign.
fn away_from_zero(t: &mut Tensor, gap: f64) {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
}

fn check_conv(rng: &mut Rng) -> Result<f64> {
    let x = rand_tensor(&[4, 9], rng);
    let k = rand_tensor(&[3, 4, 5], rng);
    let b = rand_tensor(&[3], rng);
    let probe = rand_tensor(&[3, 5], rng);
    let g = conv_text_backward(&x, &k, &probe)?;
    grad_check(
        |p| dot(&conv_text(&p[0], &p[1], &p[2]).expect("shapes fixed"), &probe),
        &[x, k, b],
        &[g.dx, g.dkernels, g.dbias],
        EPS,
    )
}

fn check_maxpool(rng: &mut Rng) -> Result<f64> {
    // distinct row entries spaced far beyond eps keep the argmax fixed
    let (k, n) = (4, 7);
    let mut x = Tensor::zeros(&[k, n]);
    for r in 0..k {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for (t, o) in order.into_iter().enumerate() {
            x.data_mut()[r * n + t] = o as f64 * 0.1 + rng.gen_range(0.0..0.01);
        }
    }
    let probe = rand_tensor(&[k], rng);
    let (_, pool) = maxpool_time(&x)?;
    grad_check(|p| dot(&maxpool_time(&p[0]).expect("shape fixed").0, &probe), &[x], &[pool.backward(&probe)], EPS)
}

fn check_fc(rng: &mut Rng) -> Result<f64> {
    let w = rand_tensor(&[5, 7], rng);
    let b = rand_tensor(&[5], rng);
    let x = rand_tensor(&[7], rng);
    let probe = rand_tensor(&[5], rng);
    let g = fully_connected_backward(&w, &x, &probe)?;
    grad_check(
        |p| dot(&fully_connected(&p[0], &p[1], &p[2]).expect("shapes fixed"), &probe),
        &[w, b, x],
        &[g.dw, g.db, g.dx],
        EPS,
    )
}

fn check_relu(rng: &mut Rng) -> Result<f64> {
    let mut x = rand_tensor(&[12], rng);
    away_from_zero(&mut x, 1e-3);
    let probe = rand_tensor(&[12], rng);
    grad_check(|p| dot(&relu(&p[0]), &probe), &[x.clone()], &[relu_backward(&x, &probe)], EPS)
}

fn check_dropout_eval(rng: &mut Rng) -> Result<f64> {
    let d = Dropout::new(0.1)?;
    let x = rand_tensor(&[12], rng);
    let probe = rand_tensor(&[12], rng);
    let mut unused = seed::rng(0, "unused");
    let (_, mask) = d.forward(&x, Mode::Eval, &mut unused);
    grad_check(
        |p| dot(&d.forward(&p[0], Mode::Eval, &mut seed::rng(0, "unused")).0, &probe),
        &[x],
        &[Dropout::backward(&mask, &probe)],
        EPS,
    )
}

fn check_lstm(rng: &mut Rng) -> Result<f64> {
    let vocab = 7;
    let cfg = LstmConfig { context_dim: 5, vocab_size: vocab, hidden: 8, embed: 8, init_scale: 0.5, forget_bias: 1.0 };
    let mut m = LstmModel::new(cfg, rng.gen())?;
    let ctx: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tokens: Vec<usize> = (0..4).map(|_| rng.gen_range(3..vocab)).collect();
    m.params_mut().zero_grad();
    m.accumulate_gradients(&ctx, &tokens, 1.0)?;
    let analytic: Vec<Tensor> = m.params().iter().map(|p| p.grad.clone()).collect();
    let values: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
    let mut probe = m.clone();
    // saturated gates produce gradients at the rounding-noise level; those
    // entries are compared absolutely
    grad_check_floor(
        |vals| {
            for (p, v) in probe.params_mut().iter_mut().zip(vals) {
                p.value = v.clone();
            }
            probe.sequence_loss(&ctx, &tokens).expect("shapes fixed")
        },
        &values,
        &analytic,
        1e-5,
        1e-6,
    )
}

fn check_softmax(rng: &mut Rng) -> Result<f64> {
    let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y = rng.gen_range(0..6);
    let b = softmax_xent(&z, y)?;
    grad_check(|p| softmax_xent(p[0].data(), y).expect("shape fixed").loss, &[Tensor::vector(z)], &[b.grad_z], EPS)
}

fn check_l1(rng: &mut Rng) -> Result<f64> {
    let y = rng.gen_range(-5.0..5.0);
    let off: f64 = rng.gen_range(0.1..3.0);
    let z = if rng.gen() { y + off } else { y - off };
    let b = l1_loss(z, y);
    grad_check(|p| l1_loss(p[0].data()[0], y).loss, &[Tensor::vector(vec![z])], &[b.grad_z], EPS)
}

fn check_gcd(rng: &mut Rng, fault: Option<Fault>) -> Result<f64> {
    use std::f64::consts::PI;
    let (z, y) = loop {
        let y = (rng.gen_range(-1.4..1.4), rng.gen_range(-PI..PI));
        let z = (rng.gen_range(-1.4..1.4), rng.gen_range(-PI..PI));
        let phi = GeoPair::new(z, y).phi();
        if phi * phi <= 1.0 - 1e-3 {
            break (z, y);
        }
    };
    let mut g = gcd_loss(&GeoPair::new(z, y)).grad_z;
    if fault == Some(Fault::GcdSign) {
        g.scale(-1.0);
    }
    grad_check(
        |p| gcd_loss(&GeoPair::new((p[0].data()[0], p[0].data()[1]), y)).loss,
        &[Tensor::vector(vec![z.0, z.1])],
        &[g],
        EPS,
    )
}

fn check_cca(rng: &mut Rng, index: usize) -> Result<f64> {
    let d = 2 + index % 3;
    let m = if index % 2 == 0 { 16 } else { 32 };
    let reg = 1e-4;
    let z = rand_tensor(&[d, m], rng);
    let y = rand_tensor(&[d, m], rng);
    let g = cca_loss(&CcaBatch::new(z.clone(), y.clone(), reg)?)?;
    grad_check(
        |p| cca_loss(&CcaBatch::new(p[0].clone(), y.clone(), reg).expect("shape fixed")).expect("finite").loss,
        &[z],
        &[g.grad_z],
        EPS,
    )
}

fn check_one(component: &str, index: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<f64> {
    match component {
        "conv_text" => check_conv(rng),
        "maxpool_time" => check_maxpool(rng),
        "fully_connected" => check_fc(rng),
        "relu" => check_relu(rng),
        "dropout_eval" => check_dropout_eval(rng),
        "lstm_unrolled" => check_lstm(rng),
        "softmax_xent" => check_softmax(rng),
        "l1_loss" => check_l1(rng),
        "gcd_loss" => check_gcd(rng, fault),
        "cca_loss" => check_cca(rng, index),
        other => Err(Error::Config(format!("unknown component `{other}`"))),
    }
}

/// Runs the selected components over `seeds` random draws each.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradRow>> {
    for name in &opts.only {
        if !COMPONENTS.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown component `{name}`; expected one of {}",
                COMPONENTS.join(", ")
            )));
        }
    }
    if opts.seeds == 0 {
        return Err(Error::Config("gradient suite needs at least one seed".into()));
    }
    let selected = COMPONENTS
        .iter()
        .filter(|c| opts.only.is_empty() || opts.only.iter().any(|o| o == *c));
    let mut rows = Vec::new();
    for &component in selected {
        let start = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..opts.seeds {
            let mut rng = seed::rng_indexed(opts.root_seed, &format!("gradsuite/{component}"), s as u64);
            let e = check_one(component, s, &mut rng, opts.fault)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        rows.push(GradRow {
            component: component.to_string(),
            seeds: opts.seeds,
            max_rel_error: worst,
            passed: worst < opts.threshold,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}

/// Fixed-width text table of the rows.
pub fn format_table(rows: &[GradRow], threshold: f64) -> String {
    let mut s = format!("{:<16} {:>5} {:>14}  {}\n", "component", "seeds", "max_rel_err", "result");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>5} {:>14.3e}  {}\n",
            r.component,
            r.seeds,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s.push_str(&format!("threshold {threshold:e}\n"));
    s
}
