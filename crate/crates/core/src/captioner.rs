//! LSTM caption generator over fixed article/image context vectors.
//!
//! The context is linearly encoded and fed once, at step 0. Step 1 consumes
//! BOS, and every later step consumes the previous ground-truth token
//! (teacher forcing). The loss is the mean per-token cross-entropy of the
//! caption followed by EOS.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::ndkit::layers::{fc_backward_into, fc_into};
use crate::ndkit::{lr_at, sgd_step, Checkpoint, LayerParams, Param, SgdConfig, Tensor};
use crate::seed;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl CaptionVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[BOS_ID] != BOS || tokens[EOS_ID] != EOS || tokens[UNK_ID] != UNK {
            return Err(Error::Data("caption vocabulary must start with BOS, EOS and UNK".into()));
        }
        let index: BTreeMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Data("caption vocabulary has duplicate tokens".into()));
        }
        Ok(CaptionVocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, caption: &[String]) -> Vec<usize> {
        caption.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| UNK.into())).collect()
    }
}

/// Special tokens followed by every caption token seen at least `min_count`
/// times, in lexicographic order.
pub fn build_caption_vocab<'a, I>(captions: I, min_count: usize) -> Result<CaptionVocab>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any = false;
    for c in captions {
        any = true;
        for t in c {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Data("no training captions".into()));
    }
    let mut tokens: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
    tokens.extend(
        counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != BOS && t != EOS && t != UNK)
            .map(|(t, _)| t.to_string()),
    );
    CaptionVocab::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    #[default]
    Text,
    Image,
    Both,
}

/// Concatenates the parts of the context selected by `mode`, text first.
pub fn encode_context(article_mean: Option<&[f64]>, image: Option<&[f64]>, mode: ContextMode) -> Result<Vec<f64>> {
    let need = |v: Option<&[f64]>, what: &str| {
        v.map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Data(format!("caption context needs the {what} representation")))
    };
    Ok(match mode {
        ContextMode::Text => need(article_mean, "article")?,
        ContextMode::Image => need(image, "image")?,
        ContextMode::Both => {
            let mut v = need(article_mean, "article")?;
            v.extend(need(image, "image")?);
            v
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub context_dim: usize,
    pub vocab_size: usize,
    pub hidden: usize,
    pub embed: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { context_dim: 500, vocab_size: 3, hidden: 256, embed: 256, init_scale: 0.08, forget_bias: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

const ENC_W: &str = "enc.weight";
const ENC_B: &str = "enc.bias";
const EMB: &str = "embed.weight";
const GATE_W: &str = "lstm.weight";
const GATE_B: &str = "lstm.bias";
const PROJ_W: &str = "proj.weight";
const PROJ_B: &str = "proj.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    config: LstmConfig,
    params: LayerParams,
}

struct StepCache {
    hx: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl LstmModel {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Self> {
        let LstmConfig { context_dim: c, vocab_size: v, hidden: h, embed: e, init_scale: s, forget_bias } = config;
        if c == 0 || v < 3 || h == 0 || e == 0 || !(s >= 0.0) {
            return Err(Error::Config(format!("invalid LSTM configuration {config:?}")));
        }
        let mut params = LayerParams::new();
        let mut add = |name: &str, shape: &[usize], decay: bool| {
            let t = Tensor::uniform(shape, s.max(f64::MIN_POSITIVE), &mut seed::rng(seed, &format!("init/lstm/{name}")));
            params.push(Param::new(name, if s == 0.0 { Tensor::zeros(shape) } else { t }, decay));
        };
        add(ENC_W, &[e, c], true);
        add(ENC_B, &[e], false);
        add(EMB, &[v, e], true);
        add(GATE_W, &[4 * h, h + e], true);
        add(GATE_B, &[4 * h], false);
        add(PROJ_W, &[v, h], true);
        add(PROJ_B, &[v], false);
        let b = params.get_mut(GATE_B).expect("gate bias").value.data_mut();
        b[h..2 * h].fill(forget_bias);
        Ok(LstmModel { config, params })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    /// Linear encoding of a context vector to the LSTM input size.
    pub fn encode(&self, context: &[f64]) -> Result<Vec<f64>> {
        if context.len() != self.config.context_dim {
            return Err(Error::Shape(format!(
                "context has {} entries, model expects {}",
                context.len(),
                self.config.context_dim
            )));
        }
        let mut x = vec![0.0; self.config.embed];
        fc_into(self.params.value(ENC_W).data(), self.params.value(ENC_B).data(), context, &mut x);
        Ok(x)
    }

    pub fn embed(&self, token: usize) -> &[f64] {
        let e = self.config.embed;
        &self.params.value(EMB).data()[token * e..(token + 1) * e]
    }

    fn step_cached(&self, state: &LstmState, x: &[f64]) -> (StepCache, Vec<f64>) {
        let h = self.config.hidden;
        let mut hx = state.h.clone();
        hx.extend_from_slice(x);
        let mut gates = vec![0.0; 4 * h];
        fc_into(self.params.value(GATE_W).data(), self.params.value(GATE_B).data(), &hx, &mut gates);
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k < 3 * h { sigmoid(*g) } else { g.tanh() };
        }
        let c: Vec<f64> = (0..h).map(|j| gates[h + j] * state.c[j] + gates[j] * gates[3 * h + j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|j| gates[2 * h + j] * tanh_c[j]).collect();
        let mut logits = vec![0.0; self.config.vocab_size];
        fc_into(self.params.value(PROJ_W).data(), self.params.value(PROJ_B).data(), &hn, &mut logits);
        let cache = StepCache { hx, c_prev: state.c.clone(), gates, tanh_c, h: hn };
        (cache, logits)
    }

    /// One cell update: gates `i, f, o = sigmoid(.)`, `g = tanh(.)` of an
    /// affine map of `[h; x]`, then `c' = f*c + i*g`, `h' = o*tanh(c')`, and
    /// the vocabulary logits of `h'`.
    pub fn lstm_step(&self, state: &LstmState, x: &[f64]) -> (LstmState, Vec<f64>) {
        let h = self.config.hidden;
        let (cache, logits) = self.step_cached(state, x);
        let c: Vec<f64> = (0..h)
            .map(|j| cache.gates[h + j] * cache.c_prev[j] + cache.gates[j] * cache.gates[3 * h + j])
            .collect();
        (LstmState { h: cache.h, c }, logits)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!("caption token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Mean cross-entropy per predicted token (caption tokens plus EOS).
    pub fn sequence_loss(&self, context: &[f64], tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let mut state = LstmState::zeros(self.config.hidden);
        let (s, _) = self.lstm_step(&state, &self.encode(context)?);
        state = s;
        let mut prev = BOS_ID;
        let mut total = 0.0;
        for &target in tokens.iter().chain(std::iter::once(&EOS_ID)) {
            let (s, logits) = self.lstm_step(&state, self.embed(prev));
            total -= log_softmax(&logits)[target];
            state = s;
            prev = target;
        }
        Ok(total / (tokens.len() + 1) as f64)
    }

    /// Adds `scale` times the gradient of [`Self::sequence_loss`] into the
    /// parameter gradients and returns the loss.
    pub fn accumulate_gradients(&mut self, context: &[f64], tokens: &[usize], scale: f64) -> Result<f64> {
        self.check_tokens(tokens)?;
        let LstmConfig { hidden: h, embed: e, context_dim: cd, .. } = self.config;
        let x0 = self.encode(context)?;
        let mut state = LstmState::zeros(h);
        let mut caches = Vec::with_capacity(tokens.len() + 2);
        let mut dlogits: Vec<Option<Vec<f64>>> = Vec::with_capacity(tokens.len() + 2);
        let mut inputs: Vec<Option<usize>> = vec![None];

        let (c0, _) = self.step_cached(&state, &x0);
        state = LstmState { h: c0.h.clone(), c: (0..h).map(|j| c0.gates[h + j] * c0.c_prev[j] + c0.gates[j] * c0.gates[3 * h + j]).collect() };
        caches.push(c0);
        dlogits.push(None);

        let steps = tokens.len() + 1;
        let norm = scale / steps as f64;
        let mut prev = BOS_ID;
        let mut total = 0.0;
        for &target in tokens.iter().chain(std::iter::once(&EOS_ID)) {
            let (cache, logits) = self.step_cached(&state, self.embed(prev));
            let mut p = softmax(&logits);
            total -= p[target].max(f64::MIN_POSITIVE).ln();
            p[target] -= 1.0;
            p.iter_mut().for_each(|v| *v *= norm);
            state = LstmState {
                h: cache.h.clone(),
                c: (0..h).map(|j| cache.gates[h + j] * cache.c_prev[j] + cache.gates[j] * cache.gates[3 * h + j]).collect(),
            };
            caches.push(cache);
            dlogits.push(Some(p));
            inputs.push(Some(prev));
            prev = target;
        }

        let v = self.config.vocab_size;
        let mut d_gw = vec![0.0; 4 * h * (h + e)];
        let mut d_gb = vec![0.0; 4 * h];
        let mut d_pw = vec![0.0; v * h];
        let mut d_pb = vec![0.0; v];
        let mut d_emb: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut d_x0 = vec![0.0; e];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let gw = self.params.value(GATE_W).data();
        let pw = self.params.value(PROJ_W).data();
        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let mut dh = dh_next.clone();
            if let Some(dl) = &dlogits[t] {
                fc_backward_into(pw, &cache.h, dl, &mut d_pw, &mut d_pb, Some(&mut dh));
            }
            let g = &cache.gates;
            let mut da = vec![0.0; 4 * h];
            let mut dc_prev = vec![0.0; h];
            for j in 0..h {
                let (i_g, f_g, o_g, c_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cache.tanh_c[j];
                let dc = dh[j] * o_g * (1.0 - tc * tc) + dc_next[j];
                da[j] = dc * c_g * i_g * (1.0 - i_g);
                da[h + j] = dc * cache.c_prev[j] * f_g * (1.0 - f_g);
                da[2 * h + j] = dh[j] * tc * o_g * (1.0 - o_g);
                da[3 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dc_prev[j] = dc * f_g;
            }
            let mut dhx = vec![0.0; h + e];
            fc_backward_into(gw, &cache.hx, &da, &mut d_gw, &mut d_gb, Some(&mut dhx));
            dh_next = dhx[..h].to_vec();
            dc_next = dc_prev;
            match inputs[t] {
                None => d_x0.iter_mut().zip(&dhx[h..]).for_each(|(a, b)| *a += b),
                Some(tok) => d_emb
                    .entry(tok)
                    .or_insert_with(|| vec![0.0; e])
                    .iter_mut()
                    .zip(&dhx[h..])
                    .for_each(|(a, b)| *a += b),
            }
        }
        let mut d_ew = vec![0.0; e * cd];
        let mut d_eb = vec![0.0; e];
        let enc_w = self.params.value(ENC_W).data().to_vec();
        fc_backward_into(&enc_w, context, &d_x0, &mut d_ew, &mut d_eb, None);

        let add = |ps: &mut LayerParams, name: &str, g: &[f64]| {
            ps.grad_mut(name).data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        };
        add(&mut self.params, GATE_W, &d_gw);
        add(&mut self.params, GATE_B, &d_gb);
        add(&mut self.params, PROJ_W, &d_pw);
        add(&mut self.params, PROJ_B, &d_pb);
        add(&mut self.params, ENC_W, &d_ew);
        add(&mut self.params, ENC_B, &d_eb);
        let emb = self.params.grad_mut(EMB).data_mut();
        for (tok, g) in d_emb {
            emb[tok * e..(tok + 1) * e].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(total / steps as f64)
    }

    pub fn to_checkpoint(&self, vocab: &CaptionVocab, mode: ContextMode) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "newscnn-captioner",
            "lstm": self.config,
            "vocab": vocab.tokens(),
            "context": mode,
        }));
        for p in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, CaptionVocab, ContextMode)> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("newscnn-captioner") {
            return Err(Error::Data("checkpoint does not hold a caption model".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Data(format!("checkpoint meta lacks `{k}`")));
        let bad = |e: serde_json::Error| Error::Data(format!("caption checkpoint meta: {e}"));
        let config: LstmConfig = serde_json::from_value(field("lstm")?).map_err(bad)?;
        let vocab = CaptionVocab::from_tokens(serde_json::from_value(field("vocab")?).map_err(bad)?)?;
        let mode: ContextMode = serde_json::from_value(field("context")?).map_err(bad)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Data("caption vocabulary size disagrees with the model".into()));
        }
        let mut model = LstmModel::new(config, 0)?;
        for p in model.params.iter_mut() {
            let t = ck.require(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!("caption tensor {} has shape {:?}", p.name, t.shape())));
            }
            p.value = t.clone();
        }
        Ok((model, vocab, mode))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample {
    pub id: String,
    pub context: Vec<f64>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionTrainConfig {
    pub sgd: SgdConfig,
    pub iterations: usize,
    pub hidden: usize,
    pub embed: usize,
    pub seed: u64,
}

impl Default for CaptionTrainConfig {
    fn default() -> Self {
        CaptionTrainConfig {
            sgd: SgdConfig {
                base_lr: 0.0002,
                batch_size: 4,
                drop_factor: 1.0,
                drop_every: 1000,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            iterations: 2000,
            hidden: 256,
            embed: 256,
            seed: 0,
        }
    }
}

/// Teacher-forced minibatch training; returns the model and the batch loss
/// per iteration.
pub fn train_captioner(examples: &[CaptionExample], vocab_size: usize, cfg: &CaptionTrainConfig) -> Result<(LstmModel, Vec<f64>)> {
    cfg.sgd.validate()?;
    let first = examples.first().ok_or_else(|| Error::Data("empty caption set".into()))?;
    let context_dim = first.context.len();
    if let Some(ex) = examples.iter().find(|x| x.context.len() != context_dim) {
        return Err(Error::Shape(format!("example `{}` has a context of different length", ex.id)));
    }
    let config = LstmConfig { context_dim, vocab_size, hidden: cfg.hidden, embed: cfg.embed, ..LstmConfig::default() };
    let mut model = LstmModel::new(config, cfg.seed)?;
    let n = examples.len();
    let bs = cfg.sgd.batch_size.min(n);
    let shuffle = seed::derive(cfg.seed, "caption/shuffle");
    let mut order: Vec<usize> = Vec::new();
    let mut pos = n;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if pos + bs > n {
            order = (0..n).collect();
            order.shuffle(&mut seed::rng_indexed(shuffle, "epoch", epoch));
            epoch += 1;
            pos = 0;
        }
        model.params.zero_grad();
        let mut loss = 0.0;
        for &i in &order[pos..pos + bs] {
            loss += model.accumulate_gradients(&examples[i].context, &examples[i].tokens, 1.0 / bs as f64)? / bs as f64;
        }
        pos += bs;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite caption loss at iteration {it}")));
        }
        sgd_step(&mut model.params, lr_at(it, &cfg.sgd), &cfg.sgd)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    /// Generated token ids, without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of the emitted tokens, EOS included.
    pub log_prob: f64,
    pub finished: bool,
}

impl Caption {
    /// Log-probability per emitted token; 0 for an empty unfinished caption.
    pub fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        if n == 0 {
            0.0
        } else {
            self.log_prob / n as f64
        }
    }
}

/// Decoding never emits BOS.
fn step_log_probs(model: &LstmModel, state: &LstmState, token: usize) -> (LstmState, Vec<f64>) {
    let (s, logits) = model.lstm_step(state, model.embed(token));
    let mut lp = log_softmax(&logits);
    lp[BOS_ID] = f64::NEG_INFINITY;
    (s, lp)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn greedy(model: &LstmModel, start: &LstmState, max_len: usize) -> Caption {
    let mut state = start.clone();
    let mut out = Caption { tokens: vec![], log_prob: 0.0, finished: false };
    let mut prev = BOS_ID;
    for _ in 0..max_len {
        let (s, lp) = step_log_probs(model, &state, prev);
        let t = argmax(&lp);
        out.log_prob += lp[t];
        if t == EOS_ID {
            out.finished = true;
            break;
        }
        out.tokens.push(t);
        state = s;
        prev = t;
    }
    out
}

/// Decodes a caption for `context`. Beam search keeps the `b` most probable
/// partial captions; finished ones leave the beam, and the final choice
/// maximizes [`Caption::score`] over the finished, the surviving and the
/// greedy captions (earliest wins ties).
pub fn generate(model: &LstmModel, context: &[f64], strategy: Strategy, max_len: usize) -> Result<Caption> {
    let (start, _) = model.lstm_step(&LstmState::zeros(model.config.hidden), &model.encode(context)?);
    let greedy_cap = greedy(model, &start, max_len);
    let b = match strategy {
        Strategy::Greedy => return Ok(greedy_cap),
        Strategy::Beam(0) => return Err(Error::Config("beam width must be at least 1".into())),
        Strategy::Beam(b) => b,
    };
    struct Hyp {
        tokens: Vec<usize>,
        log_prob: f64,
        state: LstmState,
    }
    let mut beam = vec![Hyp { tokens: vec![], log_prob: 0.0, state: start }];
    let mut done: Vec<Caption> = Vec::new();
    for _ in 0..max_len {
        if beam.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(beam.len());
        for (pi, hyp) in beam.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS_ID);
            let (s, lp) = step_log_probs(model, &hyp.state, prev);
            for (t, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    cands.push((hyp.log_prob + l, pi, t));
                }
            }
            next_states.push(s);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(b);
        for &(lp, pi, t) in cands.iter().take(b) {
            let parent = &beam[pi];
            if t == EOS_ID {
                done.push(Caption { tokens: parent.tokens.clone(), log_prob: lp, finished: true });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                next.push(Hyp { tokens, log_prob: lp, state: next_states[pi].clone() });
            }
        }
        beam = next;
    }
    done.extend(beam.into_iter().map(|h| Caption { tokens: h.tokens, log_prob: h.log_prob, finished: false }));
    done.push(greedy_cap);
    let mut best = 0;
    for i in 1..done.len() {
        if done[i].score() > done[best].score() {
            best = i;
        }
    }
    Ok(done.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndkit::grad_check_floor;
    use rand::{Rng, SeedableRng};

    fn toy(seed: u64, vocab: usize) -> LstmModel {
        LstmModel::new(LstmConfig { context_dim: 5, vocab_size: vocab, hidden: 8, embed: 8, init_scale: 0.5, forget_bias: 1.0 }, seed)
            .unwrap()
    }

    fn ctx(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn vocab_threshold_and_specials() {
        let caps = vec![s(&["a", "b", "a"]), s(&["c", "b"])];
        let v = build_caption_vocab(&caps, 2).unwrap();
        assert_eq!(v.tokens(), &s(&[BOS, EOS, UNK, "a", "b"])[..]);
        assert_eq!(v.encode(&s(&["a", "c"])), vec![3, UNK_ID]);
        assert_eq!(v.decode(&[4, 3]), s(&["b", "a"]));
        assert!(build_caption_vocab(std::iter::empty(), 2).is_err());
    }

    #[test]
    fn context_selection() {
        let t = vec![0.5; 500];
        let i = vec![0.1; 8192];
        assert_eq!(encode_context(Some(&t), None, ContextMode::Text).unwrap().len(), 500);
        assert_eq!(encode_context(Some(&t), Some(&i), ContextMode::Both).unwrap().len(), 8692);
        assert_eq!(encode_context(None, Some(&i[..4096]), ContextMode::Image).unwrap().len(), 4096);
        let both = encode_context(Some(&[1.0]), Some(&[2.0]), ContextMode::Both).unwrap();
        assert_eq!(both, vec![1.0, 2.0]);
        assert!(matches!(encode_context(Some(&t), None, ContextMode::Both), Err(Error::Data(_))));
    }

    #[test]
    fn zero_weights_give_projection_bias() {
        let mut m = LstmModel::new(LstmConfig { context_dim: 3, vocab_size: 5, hidden: 4, embed: 4, init_scale: 0.0, forget_bias: 0.0 }, 0).unwrap();
        m.params.get_mut(PROJ_B).unwrap().value = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 1.0]);
        let (st, logits) = m.lstm_step(&LstmState::zeros(4), &[1.0, 2.0, 3.0, 4.0]);
        assert!(st.h.iter().all(|v| *v == 0.0));
        assert_eq!(logits, vec![0.1, -0.2, 0.3, 0.0, 1.0]);
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let mut m = LstmModel::new(LstmConfig { context_dim: 3, vocab_size: 4, hidden: 3, embed: 2, init_scale: 0.0, forget_bias: 0.0 }, 0).unwrap();
        let b = m.params.get_mut(GATE_B).unwrap().value.data_mut();
        b[..3].fill(-50.0);
        b[3..6].fill(50.0);
        let c = vec![0.25, -0.5, 0.75];
        let (st, _) = m.lstm_step(&LstmState { h: vec![0.0; 3], c: c.clone() }, &[0.4, -0.4]);
        for (a, b) in st.c.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forget_bias_initialized() {
        let m = toy(0, 6);
        let b = m.params.value(GATE_B).data();
        assert!(b[8..16].iter().all(|v| *v == 1.0));
        assert!(b[..8].iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut m = toy(seed, 7);
            let c = ctx(seed + 100, 5);
            let tokens = vec![3, 5, 4];
            m.params.zero_grad();
            m.accumulate_gradients(&c, &tokens, 1.0).unwrap();
            let analytic: Vec<Tensor> = m.params.iter().map(|p| p.grad.clone()).collect();
            let values: Vec<Tensor> = m.params.iter().map(|p| p.value.clone()).collect();
            let mut probe = m.clone();
            // entries below 1e-6 are compared absolutely; saturated gates give
            // gradients small enough to sit at the rounding-noise level
            let err = grad_check_floor(
                |vals| {
                    for (p, v) in probe.params.iter_mut().zip(vals) {
                        p.value = v.clone();
                    }
                    probe.sequence_loss(&c, &tokens).unwrap()
                },
                &values,
                &analytic,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn accumulate_reports_same_loss() {
        let mut m = toy(3, 7);
        let c = ctx(1, 5);
        let l = m.accumulate_gradients(&c, &[3, 4], 1.0).unwrap();
        assert!((l - m.sequence_loss(&c, &[3, 4]).unwrap()).abs() < 1e-12);
        assert!(m.sequence_loss(&c, &[9]).is_err());
        assert!(m.sequence_loss(&[1.0], &[3]).is_err());
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        for vocab in [50usize, 500] {
            let m = LstmModel::new(
                LstmConfig { context_dim: 20, vocab_size: vocab, hidden: 64, embed: 64, ..LstmConfig::default() },
                1,
            )
            .unwrap();
            let l = m.sequence_loss(&ctx(2, 20), &[5, 9, 13, 4]).unwrap();
            let ln_v = (vocab as f64).ln();
            assert!((l - ln_v).abs() < 0.01 * ln_v, "{l} vs {ln_v}");
        }
    }

    fn fast_cfg(iterations: usize) -> CaptionTrainConfig {
        CaptionTrainConfig {
            sgd: SgdConfig { base_lr: 0.1, batch_size: 4, drop_factor: 1.0, drop_every: 1000, momentum: 0.9, weight_decay: 0.0 },
            iterations,
            hidden: 16,
            embed: 16,
            seed: 3,
        }
    }

    #[test]
    fn memorizes_one_caption() {
        let ex = CaptionExample { id: "x".into(), context: ctx(4, 6), tokens: vec![5, 3, 7, 4, 6] };
        let (m, losses) = train_captioner(std::slice::from_ref(&ex), 9, &fast_cfg(500)).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(generate(&m, &ex.context, Strategy::Greedy, 40).unwrap().tokens, ex.tokens);
    }

    #[test]
    fn memorizes_two_contexts() {
        let a = CaptionExample { id: "a".into(), context: ctx(5, 6), tokens: vec![3, 4, 5] };
        let b = CaptionExample { id: "b".into(), context: ctx(6, 6), tokens: vec![6, 7, 8, 3] };
        let (m, _) = train_captioner(&[a.clone(), b.clone()], 9, &fast_cfg(800)).unwrap();
        for ex in [a, b] {
            assert_eq!(generate(&m, &ex.context, Strategy::Greedy, 40).unwrap().tokens, ex.tokens);
        }
    }

    #[test]
    fn beam_of_one_is_greedy_and_wider_beams_score_higher() {
        for seed in 0..50 {
            let m = toy(seed, 6);
            let c = ctx(seed, 5);
            let g = generate(&m, &c, Strategy::Greedy, 12).unwrap();
            assert_eq!(generate(&m, &c, Strategy::Beam(1), 12).unwrap(), g);
            let b3 = generate(&m, &c, Strategy::Beam(3), 12).unwrap();
            assert!(b3.score() >= g.score(), "seed {seed}");
        }
    }

    #[test]
    fn decoding_edge_cases() {
        let m = toy(1, 6);
        let c = ctx(1, 5);
        let e = generate(&m, &c, Strategy::Greedy, 0).unwrap();
        assert!(e.tokens.is_empty() && e.log_prob == 0.0);
        assert!(generate(&m, &c, Strategy::Beam(3), 0).unwrap().tokens.is_empty());
        assert!(generate(&m, &c, Strategy::Beam(0), 5).is_err());
        for strat in [Strategy::Greedy, Strategy::Beam(2)] {
            let cap = generate(&m, &c, strat, 7).unwrap();
            assert!(cap.tokens.len() <= 7);
            assert!(!cap.tokens.contains(&BOS_ID) && !cap.tokens.contains(&EOS_ID));
        }
    }

    #[test]
    fn greedy_log_prob_matches_stepwise_rescoring() {
        let m = toy(2, 6);
        let c = ctx(2, 5);
        let g = generate(&m, &c, Strategy::Greedy, 10).unwrap();
        let (mut st, _) = m.lstm_step(&LstmState::zeros(8), &m.encode(&c).unwrap());
        let mut prev = BOS_ID;
        let mut lp = 0.0;
        let mut seq = g.tokens.clone();
        if g.finished {
            seq.push(EOS_ID);
        }
        for &t in &seq {
            let (s, l) = step_log_probs(&m, &st, prev);
            lp += l[t];
            st = s;
            prev = t;
        }
        assert!((lp - g.log_prob).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_and_determinism() {
        let ex = CaptionExample { id: "x".into(), context: ctx(4, 6), tokens: vec![3, 4] };
        let (a, la) = train_captioner(std::slice::from_ref(&ex), 6, &fast_cfg(20)).unwrap();
        let (b, lb) = train_captioner(std::slice::from_ref(&ex), 6, &fast_cfg(20)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let values = |m: &LstmModel| m.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        let vocab = CaptionVocab::from_tokens(s(&[BOS, EOS, UNK, "p", "q", "r"])).unwrap();
        let ck = a.to_checkpoint(&vocab, ContextMode::Both);
        let (back, v2, mode) = LstmModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(values(&back), values(&a));
        assert_eq!(back.config(), a.config());
        assert_eq!(v2.tokens(), vocab.tokens());
        assert_eq!(mode, ContextMode::Both);
        assert!(train_captioner(&[], 6, &fast_cfg(1)).is_err());
    }
}
