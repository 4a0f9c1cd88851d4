use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{EvalPart, ModelFamily, RunConfig, ShallowFeatures};
use crate::baselines::{train_linear_svm, train_svr, LinearModel, SvmConfig, SvrConfig};
use crate::captioner::{
    build_caption_vocab, encode_context, generate, train_captioner, CaptionExample, CaptionTrainConfig,
    CaptionVocab, ContextMode, LstmModel, Strategy,
};
use crate::cca::{fit_cca, stack_columns, CcaModel, Side};
use crate::corpus::{
    load_corpus, split_corpus, synth_corpus_stream, synth_embeddings, write_corpus, ArticleRecord, CorpusSplit,
    SplitPart, DEFAULT_SPLIT,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_report, bleu, geo_report, l1_report, retrieval_eval};
use crate::ndkit::Checkpoint;
use crate::netcore::{
    evaluate, fit, prepare_samples, train_multitask, transfer, EvalOptions, HeadMetrics, Model, TaskKind,
    TrainConfig, TrunkConfig,
};
use crate::textrepr::{
    bow_tfidf, build_vocab, embed_mean, load_embeddings, truncate_vocab, EmbeddingTable, Vocabulary,
};

/// Version of every JSON report layout written by the CLI.
pub const SCHEMA_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const EVAL_FILE: &str = "eval.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

const SHALLOW_KIND: &str = "newscnn-shallow";
const CAPTION_TASK: &str = "caption";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("report: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("serializable report")
}

fn check_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Canonical task name for the accepted spellings.
pub fn canonical_task(name: &str) -> Result<&'static str> {
    Ok(match name.trim() {
        "source" => "source",
        "popularity" | "pop" => "popularity",
        "geolocation" | "geo" => "geolocation",
        "illustration" | "image" => "illustration",
        "caption" | "captioning" => CAPTION_TASK,
        other => {
            return Err(Error::Config(format!(
                "unknown task `{other}`; expected source, popularity, geolocation, illustration or caption"
            )))
        }
    })
}

/// Corpus, split and embeddings of a run.
pub struct Dataset {
    pub records: Vec<ArticleRecord>,
    pub split: CorpusSplit,
    pub table: Option<EmbeddingTable>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig, need_embeddings: bool) -> Result<Self> {
        let corpus = cfg.require_corpus()?;
        check_exists(corpus, "corpus")?;
        let records = load_corpus(corpus)?;
        let split = split_corpus(&records, DEFAULT_SPLIT, cfg.split_seed())?;
        let table = match (&cfg.embeddings, need_embeddings) {
            (Some(p), _) => {
                check_exists(p, "embeddings")?;
                Some(load_embeddings(p)?)
            }
            (None, true) => return Err(Error::Config("no embeddings given (--embeddings or embeddings=...)".into())),
            (None, false) => None,
        };
        Ok(Dataset { records, split, table })
    }

    pub fn part(&self, part: EvalPart) -> Vec<&ArticleRecord> {
        match part {
            EvalPart::Train => self.split.select(&self.records, SplitPart::Train),
            EvalPart::Val => self.split.select(&self.records, SplitPart::Val),
            EvalPart::Test => self.split.select(&self.records, SplitPart::Test),
            EvalPart::All => self.records.iter().collect(),
        }
    }

    fn table(&self) -> Result<&EmbeddingTable> {
        self.table
            .as_ref()
            .ok_or_else(|| Error::Config("no embeddings given (--embeddings or embeddings=...)".into()))
    }

    fn split_summary(&self) -> Value {
        json!({
            "seed": self.split.seed,
            "train": self.split.train.len(),
            "val": self.split.val.len(),
            "test": self.split.test.len(),
        })
    }
}

/// The task head a name denotes for this corpus.
pub fn task_kind(name: &str, cfg: &RunConfig, records: &[ArticleRecord]) -> Result<TaskKind> {
    Ok(match canonical_task(name)? {
        "source" => TaskKind::Source { classes: records.iter().map(|r| r.source + 1).max().unwrap_or(0) },
        "popularity" => TaskKind::Popularity,
        "geolocation" => TaskKind::Geolocation { loss: cfg.geo_loss },
        "illustration" => {
            let dim = records
                .iter()
                .find_map(|r| r.image_feature.as_ref().map(Vec::len))
                .ok_or_else(|| Error::Data("illustration task needs records with image features".into()))?;
            TaskKind::Illustration { dim }
        }
        _ => return Err(Error::Config("the caption task is trained on its own".into())),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub records: usize,
}

/// Writes a synthetic corpus, a matching embedding table and the generator
/// settings. The run seed overrides the generator seed.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    spec.validate()?;
    let records = synth_corpus_stream(&spec, cfg.synth_stream)?;
    let table = synth_embeddings(&spec, cfg.synth_embed_dim)?;
    let dir = cfg.out_dir("synth");
    create_dir(&dir)?;
    let corpus = dir.join(CORPUS_FILE);
    let embeddings = dir.join(EMBEDDINGS_FILE);
    write_corpus(&corpus, &records)?;
    table.write(&embeddings)?;
    write_json(
        &dir.join("synth.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "synth",
            "spec": spec,
            "stream": cfg.synth_stream,
            "embed_dim": cfg.synth_embed_dim,
            "records": records.len(),
        }),
    )?;
    Ok(SynthOutput { dir, corpus, embeddings, records: records.len() })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: Value,
}

/// Trains the configured model family and writes checkpoint, report and
/// timing into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.tasks.is_empty() {
        return Err(Error::Config("no task selected (--task or --tasks)".into()));
    }
    let names: Vec<&str> = cfg.tasks.iter().map(|t| canonical_task(t)).collect::<Result<_>>()?;
    if let Some(p) = &cfg.transfer_from {
        check_exists(p, "transfer checkpoint")?;
    }
    let start = Instant::now();
    let (ck, mut report, timing) = if names.contains(&CAPTION_TASK) {
        if names.len() > 1 || cfg.transfer_from.is_some() {
            return Err(Error::Config("the caption task trains alone and cannot transfer".into()));
        }
        train_caption_run(cfg)?
    } else {
        match cfg.model {
            ModelFamily::Cnn => train_cnn_run(cfg, &names)?,
            ModelFamily::Shallow => train_shallow_run(cfg, &names)?,
        }
    };
    let obj = report.as_object_mut().expect("report object");
    obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
    obj.insert("command".into(), json!("train"));
    obj.insert("config".into(), to_value(cfg));

    let dir = cfg.out_dir("train");
    create_dir(&dir)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    ck.write(&checkpoint)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    let mut timing = timing;
    timing.insert("total_ms".into(), json!(start.elapsed().as_secs_f64() * 1e3));
    write_json(&dir.join(TIMING_FILE), &timing)?;
    Ok(TrainOutput { dir, checkpoint, report })
}

type TrainParts = (Checkpoint, Value, serde_json::Map<String, Value>);

fn eval_opts(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { radius_km: cfg.earth_radius, weighted_retrieval: cfg.weighted_retrieval }
}

fn train_cnn_run(cfg: &RunConfig, names: &[&str]) -> Result<TrainParts> {
    let ds = Dataset::load(cfg, true)?;
    let table = ds.table()?;
    let train_recs = ds.part(EvalPart::Train);
    let val_recs = ds.part(EvalPart::Val);
    let train = prepare_samples(train_recs.iter().copied(), table, cfg.max_len)?;
    let val = prepare_samples(val_recs.iter().copied(), table, cfg.max_len)?;
    let tcfg = TrainConfig {
        sgd: cfg.sgd,
        iterations: cfg.iterations,
        reg_eps: cfg.reg_eps,
        max_missing_fraction: cfg.max_missing_fraction,
        seed: cfg.seed,
    };
    let tasks: Vec<TaskKind> = names.iter().map(|n| task_kind(n, cfg, &ds.records)).collect::<Result<_>>()?;

    let (model, train_report, source_hash) = match &cfg.transfer_from {
        Some(path) => {
            if tasks.len() != 1 {
                return Err(Error::Config("transfer trains exactly one new task".into()));
            }
            let base = Model::from_checkpoint(&Checkpoint::read(path)?)?;
            if base.trunk.config().embed_dim != table.dim() {
                return Err(Error::Config(format!(
                    "transfer checkpoint expects {}-dimensional embeddings, got {}",
                    base.trunk.config().embed_dim,
                    table.dim()
                )));
            }
            let mut model = transfer(&base, tasks[0], cfg.seed, cfg.force)?;
            let hashes = json!({ "source": base.trunk.hash(), "transferred": model.trunk.hash() });
            let r = fit(&mut model, &train, &tcfg, cfg.head_lr_factor.unwrap_or(0.1))?;
            (model, r, Some(hashes))
        }
        None => {
            let trunk = TrunkConfig {
                embed_dim: table.dim(),
                kernels: cfg.kernels,
                width: cfg.width,
                hidden: cfg.hidden,
                dropout: cfg.dropout,
            };
            let default_factor = if tasks.len() > 1 { 0.1 } else { 1.0 };
            let (m, r) = train_multitask(&tasks, trunk, &train, &tcfg, cfg.head_lr_factor.unwrap_or(default_factor))?;
            (m, r, None)
        }
    };

    let opts = eval_opts(cfg);
    let train_metrics = evaluate(&model, &train, &opts)?;
    let val_metrics = if val.is_empty() { None } else { Some(evaluate(&model, &val, &opts)?) };
    let report = json!({
        "model": "cnn",
        "tasks": tasks.iter().map(TaskKind::name).collect::<Vec<_>>(),
        "split": ds.split_summary(),
        "training": train_report,
        "metrics": { "train": train_metrics, "val": val_metrics },
        "transfer_trunk_hash": source_hash,
    });
    let ck = model.to_checkpoint(json!({ "max_len": cfg.max_len, "split_seed": cfg.split_seed() }));
    let mut timing = serde_json::Map::new();
    timing.insert("iteration_ms".into(), json!(train_report.wall_ms));
    Ok((ck, report, timing))
}

/// Linear baseline for one task over BoW or mean-embedding features.
#[derive(Debug, Clone)]
pub enum ShallowModel {
    Svm(LinearModel),
    Svr(LinearModel),
    Geo { lat: LinearModel, lon: LinearModel },
    Cca(CcaModel),
}

#[derive(Debug, Clone)]
pub struct Shallow {
    pub task: TaskKind,
    pub features: ShallowFeatures,
    pub vocab: Option<Vocabulary>,
    pub model: ShallowModel,
}

fn has_label(kind: &TaskKind, r: &ArticleRecord) -> bool {
    match kind {
        TaskKind::Source { classes } => r.source < *classes,
        TaskKind::Popularity => true,
        TaskKind::Geolocation { .. } => !r.geo.is_empty(),
        TaskKind::Illustration { dim } => r.image_feature.as_ref().is_some_and(|v| v.len() == *dim),
    }
}

fn image_columns(recs: &[&ArticleRecord]) -> Vec<Vec<f64>> {
    recs.iter().map(|r| r.image_feature.clone().unwrap_or_default()).collect()
}

fn featurize(
    features: ShallowFeatures,
    vocab: Option<&Vocabulary>,
    recs: &[&ArticleRecord],
    table: Option<&EmbeddingTable>,
) -> Result<Vec<Vec<f64>>> {
    recs.iter()
        .map(|r| match (features, vocab) {
            (ShallowFeatures::Bow, Some(v)) => Ok(bow_tfidf(r, v).to_dense()),
            (ShallowFeatures::Bow, None) => Err(Error::Data("BoW features need a vocabulary".into())),
            (ShallowFeatures::Mean, _) => embed_mean(
                r,
                table.ok_or_else(|| Error::Config("mean features need embeddings (--embeddings)".into()))?,
            ),
        })
        .collect()
}

impl Shallow {
    pub fn train(task: TaskKind, cfg: &RunConfig, train: &[&ArticleRecord], table: Option<&EmbeddingTable>) -> Result<Self> {
        let vocab = match cfg.features {
            ShallowFeatures::Bow => {
                let v = build_vocab(train.iter().copied(), cfg.min_count)?;
                Some(if cfg.vocab_size > 0 { truncate_vocab(&v, cfg.vocab_size, cfg.truncate) } else { v })
            }
            ShallowFeatures::Mean => None,
        };
        let labeled: Vec<&ArticleRecord> = train.iter().copied().filter(|r| has_label(&task, r)).collect();
        if labeled.is_empty() {
            return Err(Error::Data(format!("no training record carries a {} label", task.name())));
        }
        let x = featurize(cfg.features, vocab.as_ref(), &labeled, table)?;
        let svm = SvmConfig { lambda: cfg.svm_lambda, epochs: cfg.svm_epochs, seed: cfg.seed, ..Default::default() };
        let svr = SvrConfig {
            lambda: cfg.svm_lambda,
            epsilon: cfg.svr_epsilon,
            epochs: cfg.svm_epochs,
            seed: cfg.seed,
            ..Default::default()
        };
        let model = match task {
            TaskKind::Source { .. } => {
                ShallowModel::Svm(train_linear_svm(&x, &labeled.iter().map(|r| r.source).collect::<Vec<_>>(), &svm)?)
            }
            TaskKind::Popularity => {
                ShallowModel::Svr(train_svr(&x, &labeled.iter().map(|r| r.popularity as f64).collect::<Vec<_>>(), &svr)?)
            }
            TaskKind::Geolocation { .. } => {
                let first: Vec<_> = labeled.iter().map(|r| r.geo[0]).collect();
                let lat = train_svr(&x, &first.iter().map(|g| g.lat).collect::<Vec<_>>(), &svr)?;
                let lon = train_svr(
                    &x,
                    &first.iter().map(|g| g.lon).collect::<Vec<_>>(),
                    &SvrConfig { seed: crate::seed::derive(cfg.seed, "svr/lon"), ..svr },
                )?;
                ShallowModel::Geo { lat, lon }
            }
            TaskKind::Illustration { dim } => {
                let k = dim.min(x[0].len());
                ShallowModel::Cca(fit_cca(
                    &stack_columns(&x)?,
                    &stack_columns(&image_columns(&labeled))?,
                    k,
                    cfg.reg_eps,
                )?)
            }
        };
        Ok(Shallow { task, features: cfg.features, vocab, model })
    }

    pub fn evaluate(&self, recs: &[&ArticleRecord], table: Option<&EmbeddingTable>, opts: &EvalOptions) -> Result<HeadMetrics> {
        let task = self.task;
        let labeled: Vec<&ArticleRecord> = recs.iter().copied().filter(|r| has_label(&task, r)).collect();
        if labeled.is_empty() {
            return Err(Error::Data(format!("no evaluation record carries a {} label", task.name())));
        }
        let x = featurize(self.features, self.vocab.as_ref(), &labeled, table)?;
        let n = labeled.len();
        Ok(match &self.model {
            ShallowModel::Svm(m) => {
                let preds: Vec<usize> = x.iter().map(|v| m.predict_class(v)).collect();
                let labels: Vec<usize> = labeled.iter().map(|r| r.source).collect();
                let r = accuracy_report(&preds, &labels)?;
                HeadMetrics::Source { accuracy: r.overall, balanced_accuracy: r.balanced, n }
            }
            ShallowModel::Svr(m) => {
                let preds: Vec<f64> = x.iter().map(|v| m.predict(v)).collect();
                let labels: Vec<f64> = labeled.iter().map(|r| r.popularity as f64).collect();
                let r = l1_report(&preds, &labels)?;
                HeadMetrics::Popularity { mean_l1: r.mean, median_l1: r.median, n }
            }
            ShallowModel::Geo { lat, lon } => {
                let preds: Vec<(f64, f64)> = x.iter().map(|v| (lat.predict(v), lon.predict(v))).collect();
                let truths: Vec<&[crate::corpus::GeoPoint]> = labeled.iter().map(|r| r.geo.as_slice()).collect();
                let r = geo_report(&preds, &truths, opts.radius_km)?;
                HeadMetrics::Geolocation { mean_km: r.mean, median_km: r.median, n }
            }
            ShallowModel::Cca(c) => {
                let z = c.project(Side::Z, &stack_columns(&x)?)?;
                let y = c.project(Side::Y, &stack_columns(&image_columns(&labeled))?)?;
                let w = opts.weighted_retrieval.then_some(c.correlations.as_slice());
                let r = retrieval_eval(&z, &y, w)?;
                HeadMetrics::Illustration { r_at_1: r.r_at_1, r_at_10: r.r_at_10, median_rank: r.median_rank, pool: r.pool }
            }
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": SHALLOW_KIND,
            "task": self.task,
            "features": self.features,
            "vocab": self.vocab,
        }));
        match &self.model {
            ShallowModel::Svm(m) => m.save_into(&mut ck, "svm"),
            ShallowModel::Svr(m) => m.save_into(&mut ck, "svr"),
            ShallowModel::Geo { lat, lon } => {
                lat.save_into(&mut ck, "svr_lat");
                lon.save_into(&mut ck, "svr_lon");
            }
            ShallowModel::Cca(c) => c.save_into(&mut ck, "cca"),
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(Value::as_str) != Some(SHALLOW_KIND) {
            return Err(Error::Data("checkpoint does not hold a shallow baseline".into()));
        }
        let bad = |e: serde_json::Error| Error::Data(format!("shallow checkpoint meta: {e}"));
        let field = |k: &str| meta.get(k).cloned().unwrap_or(Value::Null);
        let task: TaskKind = serde_json::from_value(field("task")).map_err(bad)?;
        let features: ShallowFeatures = serde_json::from_value(field("features")).map_err(bad)?;
        let vocab: Option<Vocabulary> = serde_json::from_value(field("vocab")).map_err(bad)?;
        if features == ShallowFeatures::Bow && vocab.is_none() {
            return Err(Error::Data("shallow checkpoint with BoW features lacks its vocabulary".into()));
        }
        let model = match task {
            TaskKind::Source { .. } => ShallowModel::Svm(LinearModel::load_from(ck, "svm")?),
            TaskKind::Popularity => ShallowModel::Svr(LinearModel::load_from(ck, "svr")?),
            TaskKind::Geolocation { .. } => ShallowModel::Geo {
                lat: LinearModel::load_from(ck, "svr_lat")?,
                lon: LinearModel::load_from(ck, "svr_lon")?,
            },
            TaskKind::Illustration { .. } => ShallowModel::Cca(CcaModel::load_from(ck, "cca")?),
        };
        Ok(Shallow { task, features, vocab, model })
    }
}

fn train_shallow_run(cfg: &RunConfig, names: &[&str]) -> Result<TrainParts> {
    if names.len() != 1 {
        return Err(Error::Config("shallow baselines train one task at a time".into()));
    }
    if cfg.transfer_from.is_some() {
        return Err(Error::Config("shallow baselines cannot transfer".into()));
    }
    let ds = Dataset::load(cfg, cfg.features == ShallowFeatures::Mean)?;
    let task = task_kind(names[0], cfg, &ds.records)?;
    let train = ds.part(EvalPart::Train);
    let val = ds.part(EvalPart::Val);
    let model = Shallow::train(task, cfg, &train, ds.table.as_ref())?;
    let opts = eval_opts(cfg);
    let train_metrics = model.evaluate(&train, ds.table.as_ref(), &opts)?;
    let val_metrics = if val.is_empty() { None } else { Some(model.evaluate(&val, ds.table.as_ref(), &opts)?) };
    let objective = match &model.model {
        ShallowModel::Svm(m) | ShallowModel::Svr(m) => json!(m.objective),
        ShallowModel::Geo { lat, lon } => json!({ "lat": lat.objective, "lon": lon.objective }),
        ShallowModel::Cca(c) => c.describe(),
    };
    let report = json!({
        "model": "shallow",
        "features": cfg.features,
        "tasks": [task.name()],
        "split": ds.split_summary(),
        "training": { "objective": objective, "vocab_size": model.vocab.as_ref().map(Vocabulary::len) },
        "metrics": { "train": [train_metrics], "val": val_metrics.map(|m| vec![m]) },
    });
    Ok((model.to_checkpoint(), report, serde_json::Map::new()))
}

fn caption_context(
    r: &ArticleRecord,
    table: Option<&EmbeddingTable>,
    mode: ContextMode,
) -> Result<Vec<f64>> {
    let mean = match (mode, table) {
        (ContextMode::Image, _) => None,
        (_, Some(t)) => Some(embed_mean(r, t)?),
        (_, None) => return Err(Error::Config("text caption context needs embeddings (--embeddings)".into())),
    };
    encode_context(mean.as_deref(), r.image_feature.as_deref(), mode)
}

fn train_caption_run(cfg: &RunConfig) -> Result<TrainParts> {
    let mode = cfg.caption_context;
    let ds = Dataset::load(cfg, mode != ContextMode::Image)?;
    let train = ds.part(EvalPart::Train);
    let captioned: Vec<&ArticleRecord> = train.iter().copied().filter(|r| !r.captions.is_empty()).collect();
    let vocab = build_caption_vocab(captioned.iter().flat_map(|r| r.captions.iter()), cfg.caption_min_count)?;
    let mut examples = Vec::new();
    for r in &captioned {
        let context = caption_context(r, ds.table.as_ref(), mode)?;
        for c in &r.captions {
            examples.push(CaptionExample { id: r.id.clone(), context: context.clone(), tokens: vocab.encode(c) });
        }
    }
    let ccfg = CaptionTrainConfig {
        sgd: cfg.caption_sgd,
        iterations: cfg.caption_iterations,
        hidden: cfg.caption_hidden,
        embed: cfg.caption_embed,
        seed: cfg.seed,
    };
    let (model, losses) = train_captioner(&examples, vocab.len(), &ccfg)?;
    let val = ds.part(EvalPart::Val);
    let val_scores = if val.iter().any(|r| !r.captions.is_empty()) {
        Some(caption_records(&model, &vocab, mode, &val, ds.table.as_ref(), strategy(cfg), cfg.caption_max_len)?.1)
    } else {
        None
    };
    let tail = losses.len().min(50);
    let report = json!({
        "model": "lstm",
        "tasks": [CAPTION_TASK],
        "split": ds.split_summary(),
        "training": {
            "examples": examples.len(),
            "vocab_size": vocab.len(),
            "context": mode,
            "initial_loss": losses.first(),
            "final_loss": losses[losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64,
            "loss": losses,
        },
        "metrics": { "val": val_scores },
    });
    Ok((model.to_checkpoint(&vocab, mode), report, serde_json::Map::new()))
}

fn strategy(cfg: &RunConfig) -> Strategy {
    if cfg.beam == 0 {
        Strategy::Greedy
    } else {
        Strategy::Beam(cfg.beam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionLine {
    pub id: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
}

/// Decodes a caption for every record carrying a reference caption and scores
/// the result against the first reference.
fn caption_records(
    model: &LstmModel,
    vocab: &CaptionVocab,
    mode: ContextMode,
    recs: &[&ArticleRecord],
    table: Option<&EmbeddingTable>,
    strategy: Strategy,
    max_len: usize,
) -> Result<(Vec<CaptionLine>, Value)> {
    let captioned: Vec<&ArticleRecord> = recs.iter().copied().filter(|r| !r.captions.is_empty()).collect();
    if captioned.is_empty() {
        return Err(Error::Data("no evaluation record carries a caption".into()));
    }
    let mut lines = Vec::with_capacity(captioned.len());
    for r in &captioned {
        let ctx = caption_context(r, table, mode)?;
        let c = generate(model, &ctx, strategy, max_len)?;
        lines.push(CaptionLine { id: r.id.clone(), tokens: vocab.decode(&c.tokens), log_prob: c.log_prob });
    }
    let cands: Vec<Vec<String>> = lines.iter().map(|l| l.tokens.clone()).collect();
    let refs: Vec<Vec<String>> = captioned.iter().map(|r| r.captions[0].clone()).collect();
    let b = bleu(&cands, &refs, 4)?;
    let scores = json!({
        "task": CAPTION_TASK,
        "BLEU-1": b[0],
        "BLEU-2": b[1],
        "BLEU-3": b[2],
        "BLEU-4": b[3],
        "n": lines.len(),
    });
    Ok((lines, scores))
}

fn checkpoint_kind(ck: &Checkpoint) -> &str {
    ck.meta.get("kind").and_then(Value::as_str).unwrap_or("")
}

fn part_name(p: EvalPart) -> &'static str {
    match p {
        EvalPart::Train => "train",
        EvalPart::Val => "val",
        EvalPart::Test => "test",
        EvalPart::All => "all",
    }
}

/// Evaluates a checkpoint on one split part; `task` restricts the report to
/// one head and must name a head the checkpoint has.
pub fn cmd_eval(cfg: &RunConfig, task: Option<&str>) -> Result<Value> {
    cfg.validate()?;
    let path = cfg.require_checkpoint()?;
    check_exists(path, "checkpoint")?;
    let ck = Checkpoint::read(path)?;
    let want = task.map(canonical_task).transpose()?;
    let opts = eval_opts(cfg);
    let mismatch = |have: &[&str]| {
        Error::Config(format!(
            "checkpoint has no {} head (it has: {})",
            want.unwrap_or_default(),
            have.join(", ")
        ))
    };
    let (kind, metrics) = match checkpoint_kind(&ck) {
        "newscnn-model" => {
            let model = Model::from_checkpoint(&ck)?;
            let names: Vec<&str> = model.tasks().iter().map(TaskKind::name).collect();
            let heads: Vec<usize> = match want {
                Some(w) => vec![names.iter().position(|n| *n == w).ok_or_else(|| mismatch(&names))?],
                None => (0..names.len()).collect(),
            };
            let max_len = ck.meta["extra"]["max_len"].as_u64().map(|v| v as usize).unwrap_or(cfg.max_len);
            let ds = Dataset::load(cfg, true)?;
            let table = ds.table()?;
            if table.dim() != model.trunk.config().embed_dim {
                return Err(Error::Config(format!(
                    "checkpoint expects {}-dimensional embeddings, got {}",
                    model.trunk.config().embed_dim,
                    table.dim()
                )));
            }
            let samples = prepare_samples(ds.part(cfg.part), table, max_len)?;
            let m: Vec<HeadMetrics> = heads
                .iter()
                .map(|&h| crate::netcore::evaluate_head(&model, h, &samples, &opts))
                .collect::<Result<_>>()?;
            ("cnn", to_value(&m))
        }
        SHALLOW_KIND => {
            let model = Shallow::from_checkpoint(&ck)?;
            if want.is_some_and(|w| w != model.task.name()) {
                return Err(mismatch(&[model.task.name()]));
            }
            let ds = Dataset::load(cfg, model.features == ShallowFeatures::Mean)?;
            let m = model.evaluate(&ds.part(cfg.part), ds.table.as_ref(), &opts)?;
            ("shallow", to_value(&[m]))
        }
        "newscnn-captioner" => {
            if want.is_some_and(|w| w != CAPTION_TASK) {
                return Err(mismatch(&[CAPTION_TASK]));
            }
            let (model, vocab, mode) = LstmModel::from_checkpoint(&ck)?;
            let ds = Dataset::load(cfg, mode != ContextMode::Image)?;
            let (_, scores) =
                caption_records(&model, &vocab, mode, &ds.part(cfg.part), ds.table.as_ref(), strategy(cfg), cfg.caption_max_len)?;
            ("lstm", json!([scores]))
        }
        other => return Err(Error::Data(format!("unrecognized checkpoint kind `{other}`"))),
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "eval",
        "model": kind,
        "part": part_name(cfg.part),
        "metrics": metrics,
    });
    let dir = cfg.out_dir("eval");
    create_dir(&dir)?;
    write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

/// Writes generated captions for one split part plus their BLEU scores.
pub fn cmd_caption(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = cfg.require_checkpoint()?;
    check_exists(path, "checkpoint")?;
    let ck = Checkpoint::read(path)?;
    let (model, vocab, mode) = LstmModel::from_checkpoint(&ck)?;
    let ds = Dataset::load(cfg, mode != ContextMode::Image)?;
    let (lines, scores) =
        caption_records(&model, &vocab, mode, &ds.part(cfg.part), ds.table.as_ref(), strategy(cfg), cfg.caption_max_len)?;
    let dir = cfg.out_dir("caption");
    create_dir(&dir)?;
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    let p = dir.join(CAPTIONS_FILE);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "caption",
        "part": part_name(cfg.part),
        "strategy": strategy(cfg),
        "metrics": [scores],
    });
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}
