//! Flat `key = value` run configuration. Later sources override earlier ones:
//! defaults, then the config file, then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::captioner::ContextMode;
use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::losses::{GeoLoss, DEFAULT_CCA_REG, MEAN_EARTH_RADIUS_KM};
use crate::ndkit::SgdConfig;
use crate::textrepr::TruncateRule;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NEWSCNN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    #[default]
    Cnn,
    Shallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShallowFeatures {
    #[default]
    Bow,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub transfer_from: Option<PathBuf>,
    pub split_seed: Option<u64>,
    pub min_count: usize,
    pub vocab_size: usize,
    pub truncate: TruncateRule,
    pub max_len: usize,
    pub tasks: Vec<String>,
    pub model: ModelFamily,
    pub geo_loss: GeoLoss,
    pub force: bool,
    /// Head learning-rate multiplier; 1.0 for single-task runs and 0.1 for
    /// multitask and transfer runs when unset.
    pub head_lr_factor: Option<f64>,
    pub reg_eps: f64,
    pub earth_radius: f64,
    pub iterations: usize,
    pub sgd: SgdConfig,
    pub kernels: usize,
    pub width: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub max_missing_fraction: f64,
    pub weighted_retrieval: bool,
    pub features: ShallowFeatures,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub svr_epsilon: f64,
    pub caption_context: ContextMode,
    pub caption_min_count: usize,
    pub caption_hidden: usize,
    pub caption_embed: usize,
    pub caption_iterations: usize,
    pub caption_sgd: SgdConfig,
    pub beam: usize,
    pub caption_max_len: usize,
    pub part: EvalPart,
    pub synth: SynthSpec,
    pub synth_embed_dim: usize,
    pub synth_stream: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let caption = crate::captioner::CaptionTrainConfig::default();
        RunConfig {
            seed: 0,
            out: None,
            corpus: None,
            embeddings: None,
            checkpoint: None,
            transfer_from: None,
            split_seed: None,
            min_count: 0,
            vocab_size: 0,
            truncate: TruncateRule::default(),
            max_len: 64,
            tasks: vec![],
            model: ModelFamily::Cnn,
            geo_loss: GeoLoss::Gcd,
            force: false,
            head_lr_factor: None,
            reg_eps: DEFAULT_CCA_REG,
            earth_radius: MEAN_EARTH_RADIUS_KM,
            iterations: 2000,
            sgd: SgdConfig::default(),
            kernels: 256,
            width: 5,
            hidden: 64,
            dropout: 0.1,
            max_missing_fraction: 0.5,
            weighted_retrieval: true,
            features: ShallowFeatures::Bow,
            svm_lambda: 1e-4,
            svm_epochs: 20,
            svr_epsilon: 0.1,
            caption_context: ContextMode::Text,
            caption_min_count: 2,
            caption_hidden: caption.hidden,
            caption_embed: caption.embed,
            caption_iterations: caption.iterations,
            caption_sgd: caption.sgd,
            beam: 0,
            caption_max_len: 40,
            part: EvalPart::Test,
            synth: SynthSpec::default(),
            synth_embed_dim: 16,
            synth_stream: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn centers(value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("synth.geo_centers: bad pair `{pair}`")))?;
            Ok((num("synth.geo_centers", a.trim())?, num("synth.geo_centers", b.trim())?))
        })
        .collect()
}

impl RunConfig {
    /// Sets one option by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = path(),
            "corpus" => self.corpus = path(),
            "embeddings" => self.embeddings = path(),
            "checkpoint" => self.checkpoint = path(),
            "transfer_from" => self.transfer_from = path(),
            "split_seed" => self.split_seed = Some(num(key, v)?),
            "min_count" => self.min_count = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "truncate" => {
                self.truncate = match v {
                    "docfreq" => TruncateRule::HighestDocFreq,
                    "idf" => TruncateRule::HighestIdf,
                    _ => return Err(Error::Config(format!("truncate: expected docfreq or idf, got `{v}`"))),
                }
            }
            "max_len" => self.max_len = num(key, v)?,
            "task" | "tasks" => {
                self.tasks = v
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| super::commands::canonical_task(t).map(str::to_string))
                    .collect::<Result<_>>()?
            }
            "model" => {
                self.model = match v {
                    "cnn" => ModelFamily::Cnn,
                    "shallow" => ModelFamily::Shallow,
                    _ => return Err(Error::Config(format!("model: expected cnn or shallow, got `{v}`"))),
                }
            }
            "geo_loss" => {
                self.geo_loss = match v {
                    "gcd" => GeoLoss::Gcd,
                    "euclidean" => GeoLoss::Euclidean,
                    _ => return Err(Error::Config(format!("geo_loss: expected gcd or euclidean, got `{v}`"))),
                }
            }
            "force" => self.force = flag(key, v)?,
            "head_lr_factor" => self.head_lr_factor = Some(num(key, v)?),
            "reg_eps" => self.reg_eps = num(key, v)?,
            "earth_radius" => self.earth_radius = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "base_lr" => self.sgd.base_lr = num(key, v)?,
            "momentum" => self.sgd.momentum = num(key, v)?,
            "weight_decay" => self.sgd.weight_decay = num(key, v)?,
            "batch_size" => self.sgd.batch_size = num(key, v)?,
            "drop_every" => self.sgd.drop_every = num(key, v)?,
            "drop_factor" => self.sgd.drop_factor = num(key, v)?,
            "kernels" => self.kernels = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "max_missing_fraction" => self.max_missing_fraction = num(key, v)?,
            "retrieval" => {
                self.weighted_retrieval = match v {
                    "weighted" => true,
                    "unweighted" => false,
                    _ => return Err(Error::Config(format!("retrieval: expected weighted or unweighted, got `{v}`"))),
                }
            }
            "features" => {
                self.features = match v {
                    "bow" => ShallowFeatures::Bow,
                    "mean" => ShallowFeatures::Mean,
                    _ => return Err(Error::Config(format!("features: expected bow or mean, got `{v}`"))),
                }
            }
            "svm_lambda" => self.svm_lambda = num(key, v)?,
            "svm_epochs" => self.svm_epochs = num(key, v)?,
            "svr_epsilon" => self.svr_epsilon = num(key, v)?,
            "caption_context" => {
                self.caption_context = match v {
                    "text" => ContextMode::Text,
                    "image" => ContextMode::Image,
                    "both" => ContextMode::Both,
                    _ => return Err(Error::Config(format!("caption_context: expected text, image or both, got `{v}`"))),
                }
            }
            "caption_min_count" => self.caption_min_count = num(key, v)?,
            "caption_hidden" => self.caption_hidden = num(key, v)?,
            "caption_embed" => self.caption_embed = num(key, v)?,
            "caption_iterations" => self.caption_iterations = num(key, v)?,
            "caption_lr" => self.caption_sgd.base_lr = num(key, v)?,
            "caption_batch_size" => self.caption_sgd.batch_size = num(key, v)?,
            "caption_momentum" => self.caption_sgd.momentum = num(key, v)?,
            "beam" => self.beam = num(key, v)?,
            "caption_max_len" => self.caption_max_len = num(key, v)?,
            "part" => {
                self.part = match v {
                    "train" => EvalPart::Train,
                    "val" => EvalPart::Val,
                    "test" => EvalPart::Test,
                    "all" => EvalPart::All,
                    _ => return Err(Error::Config(format!("part: expected train, val, test or all, got `{v}`"))),
                }
            }
            "synth.num_sources" => self.synth.num_sources = num(key, v)?,
            "synth.articles_per_source" => self.synth.articles_per_source = num(key, v)?,
            "synth.vocab_size" => self.synth.vocab_size = num(key, v)?,
            "synth.min_tokens" => self.synth.min_tokens = num(key, v)?,
            "synth.max_tokens" => self.synth.max_tokens = num(key, v)?,
            "synth.source_affinity" => self.synth.source_affinity = num(key, v)?,
            "synth.geo_centers" => self.synth.geo_centers = Some(centers(v)?),
            "synth.geo_spread" => self.synth.geo_spread = num(key, v)?,
            "synth.max_geolocations" => self.synth.max_geolocations = num(key, v)?,
            "synth.popularity_mu" => self.synth.popularity_mu = num(key, v)?,
            "synth.popularity_source_step" => self.synth.popularity_source_step = num(key, v)?,
            "synth.popularity_sigma" => self.synth.popularity_sigma = num(key, v)?,
            "synth.image_dim" => self.synth.image_dim = num(key, v)?,
            "synth.noise" => self.synth.noise = num(key, v)?,
            "synth.caption_len" => self.synth.caption_len = num(key, v)?,
            "synth.embed_dim" => self.synth_embed_dim = num(key, v)?,
            "synth.stream" => self.synth_stream = num(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.apply(k, v)
    }

    /// Reads a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    /// The output directory: `out`, else `$NEWSCNN_OUT/<command>`, else
    /// `runs/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        }
    }

    pub fn require_corpus(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus given (--corpus or corpus=...)".into()))
    }

    pub fn require_embeddings(&self) -> Result<&Path> {
        self.embeddings
            .as_deref()
            .ok_or_else(|| Error::Config("no embeddings given (--embeddings or embeddings=...)".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or checkpoint=...)".into()))
    }

    /// Range checks on numeric options.
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.caption_sgd.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.head_lr_factor.is_some_and(|f| !(f > 0.0)) {
            return bad("head_lr_factor must be positive");
        }
        if !(self.reg_eps > 0.0) {
            return bad("reg_eps must be positive");
        }
        if !(self.earth_radius > 0.0) {
            return bad("earth_radius must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
