//! Text representations: vocabulary with document frequencies, TF-IDF
//! bag-of-words vectors, word embedding tables and the per-article embedding
//! aggregations (padded matrix, mean, max).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ArticleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    /// Retained tokens in index order (lexicographic).
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    doc_freq: Vec<u32>,
    num_docs: usize,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    doc_freq: Vec<u32>,
    num_docs: usize,
    min_count: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.tokens, r.doc_freq, r.num_docs, r.min_count)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            doc_freq: v.doc_freq,
            num_docs: v.num_docs,
            min_count: v.min_count,
        }
    }
}

/// Which end of the document-frequency ranking survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncateRule {
    /// Keep the most widespread tokens (lowest IDF).
    #[default]
    HighestDocFreq,
    /// Keep the rarest tokens (highest IDF).
    HighestIdf,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, doc_freq: Vec<u32>, num_docs: usize, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index, doc_freq, num_docs, min_count }
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

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn doc_freq(&self, token: &str) -> Option<u32> {
        self.index_of(token).map(|i| self.doc_freq[i])
    }

    pub fn doc_freqs(&self) -> &[u32] {
        &self.doc_freq
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Inverse document frequency weight of entry `j`: ln(M / (c_j + 1)).
    pub fn idf(&self, j: usize) -> f64 {
        (self.num_docs as f64 / (self.doc_freq[j] as f64 + 1.0)).ln()
    }
}

/// Builds the vocabulary from training articles, keeping tokens that occur
/// more than `min_count` times in total.
pub fn build_vocab<'a, I>(train_records: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a ArticleRecord>,
{
    let mut counts: BTreeMap<&str, (usize, u32)> = BTreeMap::new();
    let mut num_docs = 0;
    for r in train_records {
        num_docs += 1;
        let mut seen = HashSet::new();
        for t in &r.tokens {
            let e = counts.entry(t.as_str()).or_insert((0, 0));
            e.0 += 1;
            if seen.insert(t.as_str()) {
                e.1 += 1;
            }
        }
    }
    if num_docs == 0 {
        return Err(Error::Data("cannot build a vocabulary from an empty training set".into()));
    }
    let (tokens, doc_freq): (Vec<String>, Vec<u32>) = counts
        .into_iter()
        .filter(|(_, (n, _))| *n > min_count)
        .map(|(t, (_, df))| (t.to_string(), df))
        .unzip();
    if tokens.is_empty() {
        return Err(Error::Data(format!(
            "no token occurs more than {min_count} times; vocabulary would be empty"
        )));
    }
    Ok(Vocabulary::from_parts(tokens, doc_freq, num_docs, min_count))
}

/// Keeps at most `max_size` tokens, ranked by document frequency per `rule`
/// with lexicographic tie-breaking. Statistics of survivors are unchanged.
pub fn truncate_vocab(vocab: &Vocabulary, max_size: usize, rule: TruncateRule) -> Vocabulary {
    if max_size >= vocab.len() {
        return vocab.clone();
    }
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_by(|&a, &b| {
        let by_df = match rule {
            TruncateRule::HighestDocFreq => vocab.doc_freq[b].cmp(&vocab.doc_freq[a]),
            TruncateRule::HighestIdf => vocab.doc_freq[a].cmp(&vocab.doc_freq[b]),
        };
        by_df.then_with(|| vocab.tokens[a].cmp(&vocab.tokens[b]))
    });
    let mut kept: Vec<usize> = order.into_iter().take(max_size).collect();
    kept.sort_unstable();
    Vocabulary::from_parts(
        kept.iter().map(|&i| vocab.tokens[i].clone()).collect(),
        kept.iter().map(|&i| vocab.doc_freq[i]).collect(),
        vocab.num_docs,
        vocab.min_count,
    )
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i] = x;
        }
        v
    }

    pub fn get(&self, i: usize) -> f64 {
        match self.indices.binary_search(&i) {
            Ok(p) => self.values[p],
            Err(_) => 0.0,
        }
    }
}

/// TF-IDF bag of words: entry j is t_j * ln(M / (c_j + 1)), where t_j is the
/// count of token j in this article. Out-of-vocabulary tokens are ignored.
pub fn bow_tfidf(record: &ArticleRecord, vocab: &Vocabulary) -> SparseVec {
    let mut tf: BTreeMap<usize, u32> = BTreeMap::new();
    for t in &record.tokens {
        if let Some(j) = vocab.index_of(t) {
            *tf.entry(j).or_default() += 1;
        }
    }
    let (indices, values) = tf
        .into_iter()
        .map(|(j, t)| (j, t as f64 * vocab.idf(j)))
        .unzip();
    SparseVec { dim: vocab.len(), indices, values }
}

/// Token to dense vector lookup of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    order: Vec<String>,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut order = Vec::new();
        let mut vectors = HashMap::new();
        for (token, v) in rows {
            if v.len() != dim {
                return Err(Error::Data(format!(
                    "embedding for `{token}` has {} values, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("embedding for `{token}` is not finite")));
            }
            if vectors.contains_key(&token) {
                return Err(Error::Data(format!("duplicate embedding for `{token}`")));
            }
            order.push(token.clone());
            vectors.insert(token, v);
        }
        Ok(EmbeddingTable { dim, order, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Writes the table in the text format read by [`load_embeddings`].
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.len(), self.dim).map_err(io)?;
        for t in &self.order {
            write!(w, "{t}").map_err(io)?;
            for x in &self.vectors[t] {
                write!(w, " {x:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads an embedding file: a header `V D_w` then V lines `token v_1 .. v_Dw`.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };

    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(perr(1, "missing header `V D_w`".into())),
    };
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| perr(1, format!("bad header `{header}`")))?;
    let [count, dim] = nums[..] else {
        return Err(perr(1, format!("header must be `V D_w`, got `{header}`")));
    };

    let mut rows = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let v: Vec<f64> = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(lineno, format!("token `{token}`: {e}")))?;
        if v.len() != dim {
            return Err(perr(
                lineno,
                format!("token `{token}` has {} values, header says {dim}", v.len()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(perr(lineno, format!("token `{token}` has a non-finite value")));
        }
        if !seen.insert(token.clone()) {
            return Err(perr(lineno, format!("duplicate token `{token}`")));
        }
        rows.push((token, v));
    }
    if rows.len() != count {
        return Err(perr(1, format!("header announces {count} rows, file has {}", rows.len())));
    }
    EmbeddingTable::from_rows(dim, rows)
}

/// Zero-padded `dim x len` embedding matrix of one article, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticleMatrix {
    dim: usize,
    len: usize,
    n_tokens: usize,
    data: Vec<f64>,
}

impl ArticleMatrix {
    pub fn from_columns(dim: usize, len: usize, columns: &[&[f64]]) -> Self {
        let n_tokens = columns.len().min(len);
        let mut data = vec![0.0; dim * len];
        for (t, col) in columns.iter().take(n_tokens).enumerate() {
            for (r, &v) in col.iter().enumerate() {
                data[r * len + t] = v;
            }
        }
        ArticleMatrix { dim, len, n_tokens, data }
    }

    /// Embedding dimension (rows).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Padded length N (columns).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.len + col]
    }
}

fn embedded<'a>(record: &'a ArticleRecord, table: &'a EmbeddingTable) -> impl Iterator<Item = &'a [f64]> {
    record.tokens.iter().filter_map(|t| table.get(t))
}

/// Builds the padded article matrix. Tokens missing from the table are
/// skipped; articles with more than `len` embedded tokens keep the first `len`.
pub fn article_matrix(record: &ArticleRecord, table: &EmbeddingTable, len: usize) -> Result<ArticleMatrix> {
    if len == 0 {
        return Err(Error::Config("article matrix length N must be at least 1".into()));
    }
    let cols: Vec<&[f64]> = embedded(record, table).take(len).collect();
    Ok(ArticleMatrix::from_columns(table.dim(), len, &cols))
}

fn no_tokens(record: &ArticleRecord) -> Error {
    Error::Data(format!("article `{}` has no tokens in the embedding table", record.id))
}

pub fn embed_mean(record: &ArticleRecord, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; table.dim()];
    let mut n = 0usize;
    for v in embedded(record, table) {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    if n == 0 {
        return Err(no_tokens(record));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

pub fn embed_max(record: &ArticleRecord, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut acc = vec![f64::NEG_INFINITY; table.dim()];
    let mut n = 0usize;
    for v in embedded(record, table) {
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a = a.max(x));
        n += 1;
    }
    if n == 0 {
        return Err(no_tokens(record));
    }
    Ok(acc)
}
