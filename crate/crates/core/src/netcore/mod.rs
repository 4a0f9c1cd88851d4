//! The shared text CNN, its task heads, and the single-task, multitask and
//! transfer training regimes.

mod train;

pub use train::{
    evaluate, evaluate_head, finetune, fit, train_multitask, train_single, transfer, EvalOptions, HeadMetrics,
    TaskCurve, TrainConfig, TrainReport,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::cca::CcaModel;
use crate::corpus::{ArticleRecord, GeoPoint};
use crate::error::{Error, Result};
use crate::losses::{
    cca_loss, euclidean_loss, gcd_loss, l1_loss, softmax_xent, CcaBatch, GeoLoss, GeoPair,
};
use crate::ndkit::layers::{conv_pooled_backward_into, conv_text_into, fc_backward_into, fc_into, maxpool_rows};
use crate::ndkit::{Checkpoint, Dropout, LayerParams, Mode, Param, Tensor};
use crate::seed::{self, Rng};
use crate::textrepr::{article_matrix, ArticleMatrix, EmbeddingTable};

const CONV_W: &str = "conv.weight";
const CONV_B: &str = "conv.bias";
const FC_W: &str = "fc.weight";
const FC_B: &str = "fc.bias";
const FCO_W: &str = "fco.weight";
const FCO_B: &str = "fco.bias";

/// Samples per parallel work unit; fixed so gradient sums are reduced in the
/// same order whatever the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Source { classes: usize },
    Popularity,
    Geolocation {
        #[serde(default)]
        loss: GeoLoss,
    },
    Illustration { dim: usize },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Source { .. } => "source",
            TaskKind::Popularity => "popularity",
            TaskKind::Geolocation { .. } => "geolocation",
            TaskKind::Illustration { .. } => "illustration",
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Source { classes } => classes,
            TaskKind::Popularity => 1,
            TaskKind::Geolocation { .. } => 2,
            TaskKind::Illustration { dim } => dim,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Source { classes } if classes < 2 => {
                Err(Error::Config(format!("source task needs at least 2 classes, got {classes}")))
            }
            TaskKind::Illustration { dim: 0 } => {
                Err(Error::Config("illustration task needs a positive image dimension".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkConfig {
    pub embed_dim: usize,
    pub kernels: usize,
    pub width: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig { embed_dim: 500, kernels: 256, width: 5, hidden: 64, dropout: 0.1 }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.kernels == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("trunk sizes must be positive: {self:?}")));
        }
        Dropout::new(self.dropout).map(|_| ())
    }

    pub fn param_count(&self) -> usize {
        self.kernels * self.embed_dim * self.width + self.kernels + self.hidden * self.kernels + self.hidden
    }
}

/// Exact number of trainable values in a trunk plus the given heads.
pub fn param_count(trunk: &TrunkConfig, heads: &[TaskKind]) -> usize {
    trunk.param_count() + heads.iter().map(|h| (trunk.hidden + 1) * h.output_dim()).sum::<usize>()
}

/// Convolution, max-pooling over time and the fully connected layer shared by
/// every task.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedTextCnn {
    config: TrunkConfig,
    params: LayerParams,
}

impl SharedTextCnn {
    pub fn new(config: TrunkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let TrunkConfig { embed_dim: dw, kernels: k, width: w, hidden: h, .. } = config;
        let mut params = LayerParams::new();
        let rng = |name: &str| seed::rng(seed, &format!("init/trunk/{name}"));
        params.push(Param::new(CONV_W, Tensor::glorot(&[k, dw, w], dw * w, k * w, &mut rng(CONV_W)), true));
        params.push(Param::new(CONV_B, Tensor::zeros(&[k]), false));
        params.push(Param::new(FC_W, Tensor::glorot(&[h, k], k, h, &mut rng(FC_W)), true));
        params.push(Param::new(FC_B, Tensor::zeros(&[h]), false));
        Ok(SharedTextCnn { config, params })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    /// SHA-256 (hex) over the names, shapes and little-endian values of the
    /// trunk tensors.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Task-specific output layer, plus the retrieval projection fitted after
/// training an illustration head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    kind: TaskKind,
    params: LayerParams,
    pub retrieval: Option<CcaModel>,
}

impl TaskHead {
    pub fn new(kind: TaskKind, hidden: usize, rng: &mut Rng) -> Result<Self> {
        kind.validate()?;
        let d = kind.output_dim();
        let mut params = LayerParams::new();
        params.push(Param::new(FCO_W, Tensor::glorot(&[d, hidden], hidden, d, rng), true));
        params.push(Param::new(FCO_B, Tensor::zeros(&[d]), false));
        Ok(TaskHead { kind, params, retrieval: None })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }
}

/// One training or evaluation item: the article matrix and every label the
/// record carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub matrix: ArticleMatrix,
    pub source: usize,
    pub popularity: f64,
    pub geo: Vec<GeoPoint>,
    pub image: Option<Vec<f64>>,
}

impl Sample {
    pub fn has_label(&self, kind: &TaskKind) -> bool {
        match kind {
            TaskKind::Source { classes } => self.source < *classes,
            TaskKind::Popularity => true,
            TaskKind::Geolocation { .. } => !self.geo.is_empty(),
            TaskKind::Illustration { dim } => self.image.as_ref().is_some_and(|v| v.len() == *dim),
        }
    }
}

pub fn prepare_samples<'a, I>(records: I, table: &EmbeddingTable, len: usize) -> Result<Vec<Sample>>
where
    I: IntoIterator<Item = &'a ArticleRecord>,
{
    records
        .into_iter()
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                matrix: article_matrix(r, table, len)?,
                source: r.source,
                popularity: r.popularity as f64,
                geo: r.geo.clone(),
                image: r.image_feature.clone(),
            })
        })
        .collect()
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
struct Trace {
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    pre: Vec<f64>,
    mask: Vec<f64>,
    feat: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

/// Which randomness a batch uses: the iteration index and the run's dropout
/// seed fix every mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchContext {
    pub iteration: u64,
    pub dropout_seed: u64,
    pub mode: Mode,
    pub reg_eps: f64,
}

fn dropout_rng(ctx: &BatchContext, j: usize) -> Rng {
    seed::rng_indexed(seed::derive_indexed(ctx.dropout_seed, "batch", ctx.iteration), "sample", j as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub trunk: SharedTextCnn,
    pub heads: Vec<TaskHead>,
}

impl Model {
    pub fn new(trunk: TrunkConfig, tasks: &[TaskKind], seed: u64) -> Result<Self> {
        let trunk = SharedTextCnn::new(trunk, seed)?;
        let hidden = trunk.config.hidden;
        let heads = tasks
            .iter()
            .enumerate()
            .map(|(i, k)| TaskHead::new(*k, hidden, &mut seed::rng(seed, &format!("init/head{i}/{}", k.name()))))
            .collect::<Result<_>>()?;
        Ok(Model { trunk, heads })
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.heads.iter().map(|h| h.kind).collect()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.kind.name() == name)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.params.num_values() + self.heads.iter().map(|h| h.params.num_values()).sum::<usize>()
    }

    fn check_input(&self, x: &ArticleMatrix) -> Result<()> {
        let c = &self.trunk.config;
        if x.dim() != c.embed_dim || x.len() < c.width {
            return Err(Error::Shape(format!(
                "article matrix is {}x{}, the network needs {} rows and at least {} columns",
                x.dim(),
                x.len(),
                c.embed_dim,
                c.width
            )));
        }
        Ok(())
    }

    /// Number of positions along time after the convolution.
    pub fn conv_steps(&self, x: &ArticleMatrix) -> Result<usize> {
        self.check_input(x)?;
        Ok(x.len() + 1 - self.trunk.config.width)
    }

    fn trace(&self, x: &ArticleMatrix, mode: Mode, rng: &mut Rng) -> Result<Trace> {
        let steps = self.conv_steps(x)?;
        let c = &self.trunk.config;
        let p = &self.trunk.params;
        let mut conv = vec![0.0; c.kernels * steps];
        conv_text_into(
            x.data(),
            x.dim(),
            x.len(),
            x.n_tokens(),
            p.value(CONV_W).data(),
            c.width,
            p.value(CONV_B).data(),
            &mut conv,
        );
        let mut pooled = vec![0.0; c.kernels];
        let mut argmax = vec![0; c.kernels];
        maxpool_rows(&conv, steps, &mut pooled, &mut argmax);
        let mut pre = vec![0.0; c.hidden];
        fc_into(p.value(FC_W).data(), p.value(FC_B).data(), &pooled, &mut pre);
        let mask = Dropout::new(c.dropout)?.mask(c.hidden, mode, rng);
        let feat: Vec<f64> = pre.iter().zip(&mask).map(|(a, m)| a.max(0.0) * m).collect();
        let outputs = self
            .heads
            .iter()
            .map(|h| {
                let mut z = vec![0.0; h.kind.output_dim()];
                fc_into(h.params.value(FCO_W).data(), h.params.value(FCO_B).data(), &feat, &mut z);
                z
            })
            .collect();
        Ok(Trace { pooled, argmax, pre, mask, feat, outputs })
    }

    /// Output of head `head` for one article.
    pub fn forward(&self, head: usize, x: &ArticleMatrix, mode: Mode, rng: &mut Rng) -> Result<Vec<f64>> {
        if head >= self.heads.len() {
            return Err(Error::Config(format!("model has no head {head}")));
        }
        Ok(self.trace(x, mode, rng)?.outputs.swap_remove(head))
    }

    /// Evaluation-mode outputs of every head.
    pub fn predict(&self, x: &ArticleMatrix) -> Result<Vec<Vec<f64>>> {
        Ok(self.trace(x, Mode::Eval, &mut seed::rng(0, "unused"))?.outputs)
    }

    /// Evaluation-mode trunk output (the input of every head).
    pub fn features(&self, x: &ArticleMatrix) -> Result<Vec<f64>> {
        Ok(self.trace(x, Mode::Eval, &mut seed::rng(0, "unused"))?.feat)
    }

    /// Evaluation-mode outputs of one head over many samples, in order.
    pub fn predict_head(&self, head: usize, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        if head >= self.heads.len() {
            return Err(Error::Config(format!("model has no head {head}")));
        }
        samples
            .par_iter()
            .map(|s| self.predict(&s.matrix).map(|mut o| o.swap_remove(head)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.trunk.params.zero_grad();
        self.heads.iter_mut().for_each(|h| h.params.zero_grad());
    }

    /// Fills every parameter gradient for one minibatch and returns the
    /// per-head batch losses. Heads whose `active` flag is false contribute
    /// nothing; heads with no labeled sample in the batch report `None`.
    ///
    /// Per-sample losses are averaged over the labeled samples of the batch;
    /// the CCA loss is evaluated once over the labeled columns. The trunk
    /// receives the unweighted sum of all head gradients.
    pub fn compute_gradients(&mut self, batch: &[&Sample], ctx: &BatchContext, active: &[bool]) -> Result<Vec<Option<f64>>> {
        if active.len() != self.heads.len() {
            return Err(Error::Config(format!("{} activity flags for {} heads", active.len(), self.heads.len())));
        }
        self.zero_grad();
        let this = &*self;
        let traces: Vec<Trace> = batch
            .par_iter()
            .enumerate()
            .map(|(j, s)| this.trace(&s.matrix, ctx.mode, &mut dropout_rng(ctx, j)))
            .collect::<Result<_>>()?;

        let mut dz: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; this.heads.len()]; batch.len()];
        let mut losses = vec![None; this.heads.len()];
        for (h, head) in this.heads.iter().enumerate() {
            if !active[h] {
                continue;
            }
            let labeled: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].has_label(&head.kind)).collect();
            if labeled.is_empty() {
                continue;
            }
            let m = labeled.len() as f64;
            match head.kind {
                TaskKind::Illustration { dim } => {
                    if labeled.len() < 2 {
                        continue;
                    }
                    let z = crate::cca::stack_columns(&labeled.iter().map(|&j| traces[j].outputs[h].clone()).collect::<Vec<_>>())?;
                    let y = crate::cca::stack_columns(
                        &labeled.iter().map(|&j| batch[j].image.clone().unwrap_or_default()).collect::<Vec<_>>(),
                    )?;
                    let b = cca_loss(&CcaBatch::new(z, y, ctx.reg_eps)?)?;
                    let g = b.grad_z.data();
                    let n = labeled.len();
                    for (col, &j) in labeled.iter().enumerate() {
                        dz[j][h] = Some((0..dim).map(|r| g[r * n + col]).collect());
                    }
                    losses[h] = Some(b.loss);
                }
                kind => {
                    let mut total = 0.0;
                    for &j in &labeled {
                        let z = &traces[j].outputs[h];
                        let s = batch[j];
                        let b = match kind {
                            TaskKind::Source { .. } => softmax_xent(z, s.source)?,
                            TaskKind::Popularity => l1_loss(z[0], s.popularity),
                            TaskKind::Geolocation { loss } => {
                                let g = s.geo[0];
                                match loss {
                                    GeoLoss::Gcd => gcd_loss(&GeoPair::new((z[0], z[1]), (g.lat, g.lon))),
                                    GeoLoss::Euclidean => euclidean_loss(z, &[g.lat, g.lon])?,
                                }
                            }
                            TaskKind::Illustration { .. } => unreachable!(),
                        };
                        total += b.loss;
                        dz[j][h] = Some(b.grad_z.data().iter().map(|v| v / m).collect());
                    }
                    losses[h] = Some(total / m);
                }
            }
        }

        let sizes: Vec<usize> = this
            .trunk
            .params
            .iter()
            .chain(this.heads.iter().flat_map(|h| h.params.iter()))
            .map(|p| p.value.len())
            .collect();
        let total: usize = sizes.iter().sum();
        let idx: Vec<usize> = (0..batch.len()).collect();
        let partials: Vec<Vec<f64>> = idx
            .par_chunks(CHUNK)
            .map(|js| {
                let mut acc = vec![0.0; total];
                for &j in js {
                    this.backward_sample(batch[j], &traces[j], &dz[j], &sizes, &mut acc);
                }
                acc
            })
            .collect();
        let mut sum = vec![0.0; total];
        for p in &partials {
            sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut off = 0;
        for p in self
            .trunk
            .params
            .iter_mut()
            .chain(self.heads.iter_mut().flat_map(|h| h.params.iter_mut()))
        {
            let n = p.value.len();
            p.grad.data_mut().copy_from_slice(&sum[off..off + n]);
            off += n;
        }
        Ok(losses)
    }

    fn backward_sample(&self, s: &Sample, tr: &Trace, dz: &[Option<Vec<f64>>], sizes: &[usize], acc: &mut [f64]) {
        let c = &self.trunk.config;
        let mut bufs: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
        let mut rest = acc;
        for &n in sizes {
            let (a, b) = rest.split_at_mut(n);
            bufs.push(a);
            rest = b;
        }
        let mut it = bufs.into_iter();
        let (dconv_w, dconv_b, dfc_w, dfc_b) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());

        let mut dfeat = vec![0.0; c.hidden];
        let mut any = false;
        for (h, head) in self.heads.iter().enumerate() {
            let (dw, db) = (it.next().unwrap(), it.next().unwrap());
            if let Some(g) = &dz[h] {
                any = true;
                fc_backward_into(head.params.value(FCO_W).data(), &tr.feat, g, dw, db, Some(&mut dfeat));
            }
        }
        if !any {
            return;
        }
        let dpre: Vec<f64> = dfeat
            .iter()
            .zip(&tr.mask)
            .zip(&tr.pre)
            .map(|((g, m), a)| if *a > 0.0 { g * m } else { 0.0 })
            .collect();
        let mut dpooled = vec![0.0; c.kernels];
        fc_backward_into(self.trunk.params.value(FC_W).data(), &tr.pooled, &dpre, dfc_w, dfc_b, Some(&mut dpooled));
        let x = &s.matrix;
        conv_pooled_backward_into(x.data(), x.dim(), x.len(), c.width, &tr.argmax, &dpooled, dconv_w, dconv_b);
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = json!({
            "kind": "newscnn-model",
            "trunk": self.trunk.config,
            "heads": self.tasks(),
            "retrieval": self.heads.iter().map(|h| h.retrieval.is_some()).collect::<Vec<_>>(),
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta);
        for p in self.trunk.params.iter() {
            ck.push(format!("trunk.{}", p.name), p.value.clone());
        }
        for (i, h) in self.heads.iter().enumerate() {
            for p in h.params.iter() {
                ck.push(format!("head{i}.{}", p.name), p.value.clone());
            }
            if let Some(r) = &h.retrieval {
                r.save_into(&mut ck, &format!("head{i}.cca"));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("newscnn-model") {
            return Err(Error::Data("checkpoint does not hold a text CNN model".into()));
        }
        let parse = |key: &str| meta.get(key).cloned().ok_or_else(|| Error::Data(format!("checkpoint meta lacks `{key}`")));
        let trunk_cfg: TrunkConfig =
            serde_json::from_value(parse("trunk")?).map_err(|e| Error::Data(format!("checkpoint trunk config: {e}")))?;
        let tasks: Vec<TaskKind> =
            serde_json::from_value(parse("heads")?).map_err(|e| Error::Data(format!("checkpoint heads: {e}")))?;
        let retrieval: Vec<bool> = serde_json::from_value(parse("retrieval")?)
            .map_err(|e| Error::Data(format!("checkpoint retrieval flags: {e}")))?;
        let mut model = Model::new(trunk_cfg, &tasks, 0)?;
        let load = |ps: &mut LayerParams, prefix: &str| -> Result<()> {
            for p in ps.iter_mut() {
                let t = ck.require(&format!("{prefix}.{}", p.name))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {prefix}.{} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t.clone();
            }
            Ok(())
        };
        load(&mut model.trunk.params, "trunk")?;
        for (i, h) in model.heads.iter_mut().enumerate() {
            load(&mut h.params, &format!("head{i}"))?;
            if retrieval.get(i).copied().unwrap_or(false) {
                h.retrieval = Some(CcaModel::load_from(ck, &format!("head{i}.cca"))?);
            }
        }
        Ok(model)
    }
}
