use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BatchContext, Model, Sample, TaskHead, TaskKind, TrunkConfig};
use crate::cca::{fit_cca, stack_columns, Side};
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_CCA_REG, MEAN_EARTH_RADIUS_KM};
use crate::metrics::{accuracy_report, geo_report, l1_report, retrieval_eval};
use crate::ndkit::{lr_at, sgd_step, Mode, SgdConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub iterations: usize,
    pub reg_eps: f64,
    /// Largest tolerated fraction of training samples lacking a head's label.
    pub max_missing_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            iterations: 2000,
            reg_eps: DEFAULT_CCA_REG,
            max_missing_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.reg_eps > 0.0) {
            return Err(Error::Config(format!("reg_eps must be positive, got {}", self.reg_eps)));
        }
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return Err(Error::Config("max_missing_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCurve {
    pub task: String,
    /// Batch loss per iteration; `None` when the batch held no labeled sample.
    pub loss: Vec<Option<f64>>,
}

impl TaskCurve {
    /// Mean loss over consecutive windows of `w` iterations.
    pub fn window_means(&self, w: usize) -> Vec<f64> {
        self.loss
            .chunks(w.max(1))
            .map(|c| {
                let v: Vec<f64> = c.iter().flatten().copied().collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub iterations: usize,
    pub head_lr_factor: f64,
    pub config: TrainConfig,
    pub trunk: TrunkConfig,
    pub tasks: Vec<TaskKind>,
    pub lr: Vec<f64>,
    pub curves: Vec<TaskCurve>,
    pub param_count: usize,
    pub trunk_hash: String,
    /// Milliseconds since the start of training after each iteration.
    #[serde(skip)]
    pub wall_ms: Vec<f64>,
}

fn check_labels(model: &Model, train: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for h in &model.heads {
        let kind = h.kind();
        let missing = train.iter().filter(|s| !s.has_label(&kind)).count();
        if missing as f64 > cfg.max_missing_fraction * train.len() as f64 {
            return Err(Error::Data(format!(
                "{} of {} training records lack a usable {} label",
                missing,
                train.len(),
                kind.name()
            )));
        }
        if let TaskKind::Source { classes } = kind {
            if let Some(s) = train.iter().find(|s| s.source >= classes) {
                return Err(Error::Data(format!("record `{}` has source {} but the head has {classes} classes", s.id, s.source)));
            }
        }
    }
    Ok(())
}

/// Trains every head of `model` jointly with momentum SGD. The trunk uses
/// the scheduled learning rate and the heads use it times `head_lr_factor`.
/// Illustration heads get a retrieval projection fitted on the training
/// outputs afterwards.
pub fn fit(model: &mut Model, train: &[Sample], cfg: &TrainConfig, head_lr_factor: f64) -> Result<TrainReport> {
    cfg.validate()?;
    if !(head_lr_factor > 0.0) {
        return Err(Error::Config(format!("head_lr_factor must be positive, got {head_lr_factor}")));
    }
    if model.heads.is_empty() {
        return Err(Error::Config("model has no task head to train".into()));
    }
    check_labels(model, train, cfg)?;
    let started = Instant::now();
    let n = train.len();
    let bs = cfg.sgd.batch_size.min(n);
    let shuffle_seed = seed::derive(cfg.seed, "shuffle");
    let ctx_seed = seed::derive(cfg.seed, "dropout");
    let active = vec![true; model.heads.len()];

    let mut order: Vec<usize> = Vec::new();
    let mut pos = n;
    let mut epoch = 0u64;
    let mut lr_series = Vec::with_capacity(cfg.iterations);
    let mut curves: Vec<TaskCurve> = model
        .heads
        .iter()
        .map(|h| TaskCurve { task: h.kind().name().into(), loss: Vec::with_capacity(cfg.iterations) })
        .collect();
    let mut wall = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if pos + bs > n {
            order = (0..n).collect();
            order.shuffle(&mut seed::rng_indexed(shuffle_seed, "epoch", epoch));
            epoch += 1;
            pos = 0;
        }
        let batch: Vec<&Sample> = order[pos..pos + bs].iter().map(|&i| &train[i]).collect();
        pos += bs;
        let ctx = BatchContext { iteration: it as u64, dropout_seed: ctx_seed, mode: Mode::Train, reg_eps: cfg.reg_eps };
        let losses = model.compute_gradients(&batch, &ctx, &active)?;
        for (c, l) in curves.iter_mut().zip(&losses) {
            if let Some(v) = l {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("non-finite {} loss at iteration {it}", c.task)));
                }
            }
            c.loss.push(*l);
        }
        let lr = lr_at(it, &cfg.sgd);
        sgd_step(model.trunk.params_mut(), lr, &cfg.sgd)
            .map_err(|e| Error::Numerical(format!("iteration {it}: {e}")))?;
        for h in &mut model.heads {
            sgd_step(h.params_mut(), lr * head_lr_factor, &cfg.sgd)
                .map_err(|e| Error::Numerical(format!("iteration {it}: {e}")))?;
        }
        lr_series.push(lr);
        wall.push(started.elapsed().as_secs_f64() * 1e3);
    }

    for i in 0..model.heads.len() {
        if let TaskKind::Illustration { dim } = model.heads[i].kind() {
            let labeled: Vec<&Sample> = train.iter().filter(|s| s.has_label(&model.heads[i].kind())).collect();
            let z = stack_columns(&model.predict_head(i, &labeled)?)?;
            let y = stack_columns(&labeled.iter().map(|s| s.image.clone().unwrap_or_default()).collect::<Vec<_>>())?;
            model.heads[i].retrieval = Some(fit_cca(&z, &y, dim, cfg.reg_eps)?);
        }
    }

    Ok(TrainReport {
        seed: cfg.seed,
        iterations: cfg.iterations,
        head_lr_factor,
        config: *cfg,
        trunk: *model.trunk.config(),
        tasks: model.tasks(),
        lr: lr_series,
        curves,
        param_count: model.param_count(),
        trunk_hash: model.trunk.hash(),
        wall_ms: wall,
    })
}

/// Joint training of several heads on one trunk (a single task is allowed).
pub fn train_multitask(
    tasks: &[TaskKind],
    trunk: TrunkConfig,
    train: &[Sample],
    cfg: &TrainConfig,
    head_lr_factor: f64,
) -> Result<(Model, TrainReport)> {
    if tasks.is_empty() {
        return Err(Error::Config("no task selected".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|u| u.name() == t.name()) {
            return Err(Error::Config(format!("task `{}` listed twice", t.name())));
        }
    }
    let mut model = Model::new(trunk, tasks, cfg.seed)?;
    let report = fit(&mut model, train, cfg, head_lr_factor)?;
    Ok((model, report))
}

pub fn train_single(task: TaskKind, trunk: TrunkConfig, train: &[Sample], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    train_multitask(&[task], trunk, train, cfg, 1.0)
}

/// Keeps the trained trunk and replaces all heads with one freshly
/// initialized head for `new_task`. Optimizer state is reset.
pub fn transfer(model: &Model, new_task: TaskKind, seed: u64, force: bool) -> Result<Model> {
    if !force && model.heads.iter().any(|h| h.kind() == new_task) {
        return Err(Error::Config(format!(
            "model already has a {} head with the same shape; pass force to replace it",
            new_task.name()
        )));
    }
    let mut trunk = model.trunk.clone();
    for p in trunk.params_mut().iter_mut() {
        p.grad.fill(0.0);
        p.velocity.fill(0.0);
    }
    let hidden = trunk.config().hidden;
    let head = TaskHead::new(new_task, hidden, &mut seed::rng(seed, &format!("init/transfer/{}", new_task.name())))?;
    Ok(Model { trunk, heads: vec![head] })
}

/// Training after [`transfer`]: the new head learns at a tenth of the trunk rate.
pub fn finetune(model: &mut Model, train: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    fit(model, train, cfg, 0.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub radius_km: f64,
    /// Scale retrieval dimensions by their canonical correlation.
    pub weighted_retrieval: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { radius_km: MEAN_EARTH_RADIUS_KM, weighted_retrieval: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum HeadMetrics {
    Source { accuracy: f64, balanced_accuracy: f64, n: usize },
    Popularity { mean_l1: f64, median_l1: f64, n: usize },
    Geolocation { mean_km: f64, median_km: f64, n: usize },
    Illustration {
        #[serde(rename = "R@1")]
        r_at_1: f64,
        #[serde(rename = "R@10")]
        r_at_10: f64,
        #[serde(rename = "MR")]
        median_rank: usize,
        pool: usize,
    },
}

/// Metrics of one head over the samples that carry its label.
pub fn evaluate_head(model: &Model, head: usize, samples: &[Sample], opts: &EvalOptions) -> Result<HeadMetrics> {
    let kind = model
        .heads
        .get(head)
        .ok_or_else(|| Error::Config(format!("model has no head {head}")))?
        .kind();
    let labeled: Vec<&Sample> = samples.iter().filter(|s| s.has_label(&kind)).collect();
    if labeled.is_empty() {
        return Err(Error::Data(format!("no evaluation record carries a {} label", kind.name())));
    }
    let out = model.predict_head(head, &labeled)?;
    let n = labeled.len();
    Ok(match kind {
        TaskKind::Source { .. } => {
            let preds: Vec<usize> = out
                .iter()
                .map(|z| (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b }))
                .collect();
            let labels: Vec<usize> = labeled.iter().map(|s| s.source).collect();
            let r = accuracy_report(&preds, &labels)?;
            HeadMetrics::Source { accuracy: r.overall, balanced_accuracy: r.balanced, n }
        }
        TaskKind::Popularity => {
            let preds: Vec<f64> = out.iter().map(|z| z[0]).collect();
            let labels: Vec<f64> = labeled.iter().map(|s| s.popularity).collect();
            let r = l1_report(&preds, &labels)?;
            HeadMetrics::Popularity { mean_l1: r.mean, median_l1: r.median, n }
        }
        TaskKind::Geolocation { .. } => {
            let preds: Vec<(f64, f64)> = out.iter().map(|z| (z[0], z[1])).collect();
            let truths: Vec<&[crate::corpus::GeoPoint]> = labeled.iter().map(|s| s.geo.as_slice()).collect();
            let r = geo_report(&preds, &truths, opts.radius_km)?;
            HeadMetrics::Geolocation { mean_km: r.mean, median_km: r.median, n }
        }
        TaskKind::Illustration { .. } => {
            let cca = model.heads[head]
                .retrieval
                .as_ref()
                .ok_or_else(|| Error::Config("illustration head has no fitted retrieval projection".into()))?;
            let z = cca.project(Side::Z, &stack_columns(&out)?)?;
            let y = cca.project(
                Side::Y,
                &stack_columns(&labeled.iter().map(|s| s.image.clone().unwrap_or_default()).collect::<Vec<_>>())?,
            )?;
            let w = opts.weighted_retrieval.then_some(cca.correlations.as_slice());
            let r = retrieval_eval(&z, &y, w)?;
            HeadMetrics::Illustration { r_at_1: r.r_at_1, r_at_10: r.r_at_10, median_rank: r.median_rank, pool: r.pool }
        }
    })
}

pub fn evaluate(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<HeadMetrics>> {
    (0..model.heads.len()).map(|h| evaluate_head(model, h, samples, opts)).collect()
}
