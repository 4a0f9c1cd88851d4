//! Synthetic corpora with known structure: separable sources, clustered
//! geolocations, heavy-tailed popularity and image features that are a noisy
//! linear map of the token histogram.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ArticleRecord, GeoPoint};
use crate::error::{Error, Result};
use crate::seed;
use crate::textrepr::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_sources: usize,
    pub articles_per_source: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token is drawn from its source's own vocabulary block.
    pub source_affinity: f64,
    /// Per-source cluster centers (lat, lon) in radians; random when absent.
    pub geo_centers: Option<Vec<(f64, f64)>>,
    /// Standard deviation of the great-circle offset around a center, radians.
    pub geo_spread: f64,
    pub max_geolocations: usize,
    /// Log-normal popularity: ln(count) ~ N(mu + source_step * s, sigma).
    pub popularity_mu: f64,
    pub popularity_source_step: f64,
    pub popularity_sigma: f64,
    pub image_dim: usize,
    /// Noise standard deviation relative to the RMS of the clean image signal.
    pub noise: f64,
    pub caption_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_sources: 3,
            articles_per_source: 50,
            vocab_size: 60,
            min_tokens: 10,
            max_tokens: 20,
            source_affinity: 0.7,
            geo_centers: None,
            geo_spread: 0.05,
            max_geolocations: 2,
            popularity_mu: 2.0,
            popularity_source_step: 0.75,
            popularity_sigma: 0.8,
            image_dim: 8,
            noise: 0.05,
            caption_len: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_sources", self.num_sources),
            ("articles_per_source", self.articles_per_source),
            ("vocab_size", self.vocab_size),
            ("min_tokens", self.min_tokens),
            ("max_geolocations", self.max_geolocations),
            ("image_dim", self.image_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth: {name} must be positive")));
            }
        }
        if self.max_tokens < self.min_tokens {
            return Err(Error::Config("synth: max_tokens < min_tokens".into()));
        }
        if self.vocab_size < self.num_sources {
            return Err(Error::Config("synth: vocab_size must be at least num_sources".into()));
        }
        if !(0.0..=1.0).contains(&self.source_affinity) {
            return Err(Error::Config("synth: source_affinity must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0) || !(self.geo_spread >= 0.0) || !(self.popularity_sigma >= 0.0) {
            return Err(Error::Config(
                "synth: noise, geo_spread and popularity_sigma must be non-negative".into(),
            ));
        }
        if let Some(c) = &self.geo_centers {
            if c.len() != self.num_sources {
                return Err(Error::Config(format!(
                    "synth: {} geo centers given for {} sources",
                    c.len(),
                    self.num_sources
                )));
            }
            if c.iter().any(|&(lat, lon)| !GeoPoint::new(lat, lon).in_range()) {
                return Err(Error::Config("synth: geo center out of range".into()));
            }
        }
        Ok(())
    }

    pub fn token_name(index: usize) -> String {
        format!("w{index:03}")
    }

    pub fn token_index(token: &str) -> Option<usize> {
        token.strip_prefix('w')?.parse().ok()
    }

    /// Token-frequency vector (counts divided by length) over the synthetic
    /// vocabulary; this is the input of the image map.
    pub fn token_frequencies(&self, tokens: &[String]) -> Vec<f64> {
        let mut h = vec![0.0; self.vocab_size];
        for t in tokens {
            if let Some(i) = Self::token_index(t).filter(|&i| i < self.vocab_size) {
                h[i] += 1.0;
            }
        }
        let n = tokens.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    /// The fixed image map, `image_dim x vocab_size`, row-major.
    pub fn image_map(&self) -> Vec<f64> {
        let mut rng = seed::rng(self.seed, "synth/image-map");
        (0..self.image_dim * self.vocab_size)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        if let Some(c) = &self.geo_centers {
            return c.clone();
        }
        let mut rng = seed::rng(self.seed, "synth/geo-centers");
        (0..self.num_sources)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-PI..PI)))
            .collect()
    }
}

fn wrap_lon(lon: f64) -> f64 {
    (lon + PI).rem_euclid(2.0 * PI) - PI
}

/// Generates the corpus for `spec` (sampling stream 0).
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<ArticleRecord>> {
    synth_corpus_stream(spec, 0)
}

/// Draws a corpus from the same generative structure as [`synth_corpus`]
/// (same vocabulary blocks, image map and geo centers) using an independent
/// sampling stream. Stream 0 is the primary corpus; other streams give
/// held-out pools.
pub fn synth_corpus_stream(spec: &SynthSpec, stream: u64) -> Result<Vec<ArticleRecord>> {
    spec.validate()?;
    let map = spec.image_map();
    let centers = spec.centers();
    let mut rng = seed::rng_indexed(spec.seed, "synth/sample", stream);
    let s_count = spec.num_sources;
    let block = spec.vocab_size / s_count;
    let mut records = Vec::with_capacity(s_count * spec.articles_per_source);

    for src in 0..s_count {
        let block_start = src * block;
        let block_end = if src + 1 == s_count { spec.vocab_size } else { block_start + block };
        for i in 0..spec.articles_per_source {
            let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    let idx = if rng.gen_bool(spec.source_affinity) {
                        rng.gen_range(block_start..block_end)
                    } else {
                        rng.gen_range(0..spec.vocab_size)
                    };
                    SynthSpec::token_name(idx)
                })
                .collect();

            let (clat, clon) = centers[src];
            let n_geo = rng.gen_range(1..=spec.max_geolocations);
            let geo = (0..n_geo)
                .map(|_| {
                    let dlat: f64 = StandardNormal.sample(&mut rng);
                    let dlon: f64 = StandardNormal.sample(&mut rng);
                    let lat = (clat + spec.geo_spread * dlat).clamp(-FRAC_PI_2, FRAC_PI_2);
                    let lon = wrap_lon(clon + spec.geo_spread * dlon / clat.cos().max(0.05));
                    GeoPoint::new(lat, lon)
                })
                .collect();

            let z: f64 = StandardNormal.sample(&mut rng);
            let log_pop = spec.popularity_mu
                + spec.popularity_source_step * src as f64
                + spec.popularity_sigma * z;
            let popularity = log_pop.exp().floor() as u64;

            let freq = spec.token_frequencies(&tokens);
            let clean: Vec<f64> = map
                .chunks(spec.vocab_size)
                .map(|row| row.iter().zip(&freq).map(|(a, h)| a * h).sum())
                .collect();
            let rms = (clean.iter().map(|v| v * v).sum::<f64>() / spec.image_dim as f64).sqrt();
            let image: Vec<f64> = clean
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    if spec.noise > 0.0 {
                        v + spec.noise * rms * e
                    } else {
                        v
                    }
                })
                .collect();

            let caption = tokens.iter().take(spec.caption_len).cloned().collect::<Vec<_>>();
            records.push(ArticleRecord {
                id: format!("a{stream}-{src}-{i:05}"),
                source: src,
                tokens,
                geo,
                popularity,
                image_feature: Some(image),
                captions: if caption.is_empty() { vec![] } else { vec![caption] },
            });
        }
    }
    Ok(records)
}

/// Random embedding vectors, N(0, 1/dim) per entry, for the synthetic
/// vocabulary.
pub fn synth_embeddings(spec: &SynthSpec, dim: usize) -> Result<EmbeddingTable> {
    spec.validate()?;
    if dim == 0 {
        return Err(Error::Config("synth: embedding dimension must be positive".into()));
    }
    let mut rng = seed::rng(spec.seed, "synth/embeddings");
    let scale = 1.0 / (dim as f64).sqrt();
    let rows = (0..spec.vocab_size).map(|i| {
        let v: Vec<f64> = (0..dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        (SynthSpec::token_name(i), v)
    });
    EmbeddingTable::from_rows(dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_yields_balanced_sources() {
        let recs = synth_corpus(&SynthSpec::default()).unwrap();
        assert_eq!(recs.len(), 150);
        for s in 0..3 {
            assert_eq!(recs.iter().filter(|r| r.source == s).count(), 50);
        }
        for r in &recs {
            r.validate(Some(8)).unwrap();
            assert!(!r.geo.is_empty());
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec { seed: 42, ..Default::default() };
        let a = serde_json::to_string(&synth_corpus(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&synth_corpus(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&synth_corpus_stream(&spec, 1).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_is_exactly_linear() {
        let spec = SynthSpec { noise: 0.0, articles_per_source: 5, ..Default::default() };
        let map = spec.image_map();
        for r in synth_corpus(&spec).unwrap() {
            let freq = spec.token_frequencies(&r.tokens);
            let img = r.image_feature.unwrap();
            for (row, v) in map.chunks(spec.vocab_size).zip(img) {
                let expect: f64 = row.iter().zip(&freq).map(|(a, h)| a * h).sum();
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn seam_centers_wrap_longitude() {
        let spec = SynthSpec {
            geo_centers: Some(vec![(0.3, PI), (0.3, -PI + 0.01), (-0.5, 0.0)]),
            geo_spread: 0.1,
            ..Default::default()
        };
        let recs = synth_corpus(&spec).unwrap();
        let seam: Vec<_> = recs.iter().filter(|r| r.source == 0).flat_map(|r| &r.geo).collect();
        assert!(seam.iter().any(|g| g.lon > 3.0) && seam.iter().any(|g| g.lon < -3.0));
        assert!(seam.iter().all(|g| g.in_range()));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SynthSpec { num_sources: 0, ..Default::default() };
        assert!(matches!(synth_corpus(&spec), Err(Error::Config(_))));
        let spec = SynthSpec { noise: -0.1, ..Default::default() };
        assert!(synth_corpus(&spec).is_err());
    }
}
