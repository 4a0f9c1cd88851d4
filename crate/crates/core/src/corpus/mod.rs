//! Article records, JSON-lines ingestion, deterministic splits and image
//! feature assembly.

mod synth;

pub use synth::{synth_corpus, synth_corpus_stream, synth_embeddings, SynthSpec};

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Latitude/longitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    pub fn in_range(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-FRAC_PI_2..=FRAC_PI_2).contains(&self.lat)
            && (-PI..=PI).contains(&self.lon)
    }
}

impl From<[f64; 2]> for GeoPoint {
    fn from(v: [f64; 2]) -> Self {
        GeoPoint::new(v[0], v[1])
    }
}

impl From<GeoPoint> for [f64; 2] {
    fn from(p: GeoPoint) -> Self {
        [p.lat, p.lon]
    }
}

/// One news item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub id: String,
    pub source: usize,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub geo: Vec<GeoPoint>,
    pub popularity: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<Vec<String>>,
}

const KNOWN_KEYS: [&str; 7] = [
    "id",
    "source",
    "tokens",
    "geo",
    "popularity",
    "image_feature",
    "captions",
];

impl ArticleRecord {
    /// Checks the per-record invariants. `image_dim` is the expected feature
    /// length when one has already been established for the corpus.
    pub fn validate(&self, image_dim: Option<usize>) -> std::result::Result<(), String> {
        for (i, g) in self.geo.iter().enumerate() {
            if !g.in_range() {
                return Err(format!(
                    "geolocation {i} ({}, {}) out of range: lat must lie in [-pi/2, pi/2], lon in [-pi, pi]",
                    g.lat, g.lon
                ));
            }
        }
        if let Some(f) = &self.image_feature {
            if let Some(d) = image_dim {
                if f.len() != d {
                    return Err(format!(
                        "image_feature has {} entries, expected {d}",
                        f.len()
                    ));
                }
            }
            if f.is_empty() {
                return Err("image_feature is empty".into());
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err("image_feature contains a non-finite value".into());
            }
        }
        Ok(())
    }

    /// The training geolocation target: the first listed location.
    pub fn first_geo(&self) -> Option<GeoPoint> {
        self.geo.first().copied()
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped; every other line must
/// hold one record.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ArticleRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut image_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(obj) = value.as_object() {
            for key in obj.keys() {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    log::warn!("{}:{lineno}: ignoring unknown key `{key}`", path.display());
                }
            }
        }
        let record: ArticleRecord =
            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        record.validate(image_dim).map_err(parse_err)?;
        if let Some(f) = &record.image_feature {
            image_dim.get_or_insert(f.len());
        }
        if !ids.insert(record.id.clone()) {
            return Err(parse_err(format!("duplicate id `{}`", record.id)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[ArticleRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train/validation/test partition of record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl CorpusSplit {
    pub fn ids(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    /// Records of one part, in split order.
    pub fn select<'a>(&self, records: &'a [ArticleRecord], part: SplitPart) -> Vec<&'a ArticleRecord> {
        let by_id: std::collections::HashMap<&str, &ArticleRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        self.ids(part)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Shuffles ids with a seeded stream and cuts them by `ratios`. Validation and
/// test sizes are floor-rounded; the remainder goes to train.
pub fn split_corpus(
    records: &[ArticleRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !r.is_finite() || *r < 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must be non-negative and sum to 1"
        )));
    }
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("corpus contains duplicate ids".into()));
    }
    let n = ids.len();
    let n_val = (rv * n as f64 + 1e-9).floor() as usize;
    let n_test = (rs * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    ids.shuffle(&mut seed::rng(seed, "split"));
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(CorpusSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

fn l2_normalized(v: &[f64], which: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{which} feature contains non-finite values")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Data(format!(
            "{which} feature is all zeros (feature extraction failed upstream?)"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Unit-normalizes the object and scene activation vectors and concatenates
/// them (object first).
pub fn assemble_image_feature(v_obj: &[f64], v_scene: &[f64]) -> Result<Vec<f64>> {
    let mut out = l2_normalized(v_obj, "object")?;
    out.extend(l2_normalized(v_scene, "scene")?);
    Ok(out)
}
