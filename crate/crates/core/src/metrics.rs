//! Evaluation measures: classification accuracy, l1 and great-circle error
//! summaries, cross-modal retrieval ranks and corpus BLEU.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::GeoPoint;
use crate::error::{Error, Result};
use crate::losses::{gcd_km, GeoPair};
use crate::ndkit::Tensor;

/// Lower-middle element of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Unweighted mean of per-class recalls over the classes present in the labels.
    pub balanced: f64,
}

pub fn accuracy_report(preds: &[usize], labels: &[usize]) -> Result<AccuracyReport> {
    same_len(preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &l) in preds.iter().zip(labels) {
        let e = per_class.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
            correct += 1;
        }
    }
    let balanced = per_class.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>()
        / per_class.len() as f64;
    Ok(AccuracyReport { overall: correct as f64 / labels.len() as f64, balanced })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub median: f64,
}

fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    let median = lower_median(errors).ok_or_else(|| Error::Data("no samples to evaluate".into()))?;
    Ok(ErrorSummary { mean: errors.iter().sum::<f64>() / errors.len() as f64, median })
}

/// Mean and lower median of `|pred - label|`.
pub fn l1_report(preds: &[f64], labels: &[f64]) -> Result<ErrorSummary> {
    same_len(preds.len(), labels.len())?;
    let errs: Vec<f64> = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).collect();
    summarize(&errs)
}

/// Distance from each prediction to the nearest of its record's true
/// locations, summarized in kilometres.
pub fn geo_report(preds: &[(f64, f64)], truths: &[&[GeoPoint]], radius_km: f64) -> Result<ErrorSummary> {
    same_len(preds.len(), truths.len())?;
    let mut errs = Vec::with_capacity(preds.len());
    for (i, (&p, t)) in preds.iter().zip(truths).enumerate() {
        let d = t
            .iter()
            .map(|g| gcd_km(&GeoPair::new(p, (g.lat, g.lon)), radius_km))
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::Data(format!("evaluated record {i} has no geolocation")))?;
        errs.push(d);
    }
    summarize(&errs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Percent of queries whose match ranks first.
    pub r_at_1: f64,
    /// Percent of queries whose match ranks in the top ten.
    pub r_at_10: f64,
    /// Median (lower-middle) 1-based rank of the match.
    pub median_rank: usize,
    pub pool: usize,
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn recall_at(&self, k: usize) -> f64 {
        100.0 * self.ranks.iter().filter(|&&r| r <= k).count() as f64 / self.ranks.len() as f64
    }
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (t.shape()[0], t.shape()[1]);
    (0..n).map(|j| (0..k).map(|i| t.data()[i * n + j]).collect()).collect()
}

fn normalized(mut v: Vec<f64>, w: Option<&[f64]>) -> Vec<f64> {
    if let Some(w) = w {
        v.iter_mut().zip(w).for_each(|(x, s)| *x *= s);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Ranks the whole image pool for every text query by cosine similarity in
/// the shared space. Column i of both projections belongs to item i. When
/// `weights` is given (canonical correlations), each dimension is scaled by
/// its weight before the cosine. Ties go to the lower image index.
pub fn retrieval_eval(text_proj: &Tensor, image_proj: &Tensor, weights: Option<&[f64]>) -> Result<RetrievalResult> {
    if text_proj.shape().len() != 2 || text_proj.shape() != image_proj.shape() {
        return Err(Error::Shape(format!(
            "retrieval: projections {:?} and {:?} disagree",
            text_proj.shape(),
            image_proj.shape()
        )));
    }
    let (k, n) = (text_proj.shape()[0], text_proj.shape()[1]);
    if n == 0 {
        return Err(Error::Data("retrieval over an empty pool".into()));
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::Shape(format!("{} weights for {k} dimensions", w.len())));
        }
    }
    let texts: Vec<Vec<f64>> = columns(text_proj).into_iter().map(|c| normalized(c, weights)).collect();
    let images: Vec<Vec<f64>> = columns(image_proj).into_iter().map(|c| normalized(c, weights)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let ranks: Vec<usize> = texts
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let target = dot(q, &images[i]);
            1 + images
                .iter()
                .enumerate()
                .filter(|&(j, im)| {
                    let s = dot(q, im);
                    s > target || (s == target && j < i)
                })
                .count()
        })
        .collect();
    let median = {
        let mut r = ranks.clone();
        r.sort_unstable();
        r[(r.len() - 1) / 2]
    };
    let mut out = RetrievalResult { r_at_1: 0.0, r_at_10: 0.0, median_rank: median, pool: n, ranks };
    out.r_at_1 = out.recall_at(1);
    out.r_at_10 = out.recall_at(10);
    Ok(out)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-1..`n_max` (cumulative, uniform weights, brevity penalty,
/// no smoothing), one reference per candidate, scaled to [0, 100].
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n_max: usize) -> Result<Vec<f64>> {
    same_len(candidates.len(), references.len())?;
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=n_max {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            matched[n - 1] += cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 {
        return Ok(vec![0.0; n_max]);
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(n_max);
    let mut zero = false;
    for n in 1..=n_max {
        if matched[n - 1] == 0 || total[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        out.push(if zero { 0.0 } else { 100.0 * bp * (log_sum / n as f64).exp() });
    }
    Ok(out)
}

/// Corpus-level clipped n-gram precision; 0 when there are no candidate n-grams.
pub fn bleu_precision(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    let (mut matched, mut total) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let rc = ngram_counts(r, n);
        matched += ngram_counts(c, n).iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        total += c.len().saturating_sub(n - 1);
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn accuracy_hand_count() {
        // class 0: 8 of 10 right, class 1: 1 of 2 right
        let mut labels = vec![0; 10];
        labels.extend([1, 1]);
        let mut preds = vec![0; 8];
        preds.extend([1, 1, 1, 0]);
        let r = accuracy_report(&preds, &labels).unwrap();
        assert!((r.overall - 0.75).abs() < 1e-12);
        assert!((r.balanced - 0.65).abs() < 1e-12);

        let r = accuracy_report(&[2, 0, 1], &[2, 0, 1]).unwrap();
        assert_eq!((r.overall, r.balanced), (1.0, 1.0));

        let r = accuracy_report(&[3, 3, 1, 3], &[3, 3, 3, 3]).unwrap();
        assert_eq!(r.balanced, 0.75);
        assert!(accuracy_report(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn balanced_equals_overall_for_equal_class_sizes() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 0, 2];
        let r = accuracy_report(&preds, &labels).unwrap();
        assert!((r.overall - r.balanced).abs() < 1e-12);
    }

    #[test]
    fn l1_summaries() {
        let r = l1_report(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.mean, r.median), (0.0, 0.0));
        let r = l1_report(&[0.0, 1.0, 100.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.mean - 33.67).abs() < 0.01);
        assert_eq!(r.median, 1.0);
        let r = l1_report(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.median, 1.0);
        assert!(l1_report(&[], &[]).is_err());
    }

    #[test]
    fn geo_uses_nearest_truth() {
        let a = GeoPoint::new(0.1, 0.2);
        let b = GeoPoint::new(-0.5, 2.0);
        let one = [a];
        let truths: Vec<&[GeoPoint]> = vec![&one[..]];
        let r = geo_report(&[(0.1, 0.2)], &truths, 6371.0).unwrap();
        assert_eq!((r.mean, r.median), (0.0, 0.0));
        let both = [a, b];
        let r = geo_report(&[(-0.5, 2.0)], &[&both[..]], 6371.0).unwrap();
        assert_eq!(r.mean, 0.0);
        assert!(geo_report(&[(0.0, 0.0)], &[&[][..]], 6371.0).is_err());
    }

    #[test]
    fn geo_matches_double_loop_haversine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for _ in 0..30 {
            preds.push((rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1)));
            let n = rng.gen_range(1..4);
            truths.push(
                (0..n)
                    .map(|_| GeoPoint::new(rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1)))
                    .collect::<Vec<_>>(),
            );
        }
        let views: Vec<&[GeoPoint]> = truths.iter().map(Vec::as_slice).collect();
        let r = geo_report(&preds, &views, 6371.0).unwrap();
        let mut oracle = Vec::new();
        for (p, ts) in preds.iter().zip(&truths) {
            let mut best = f64::INFINITY;
            for t in ts {
                let h = ((t.lat - p.0) / 2.0).sin().powi(2)
                    + p.0.cos() * t.lat.cos() * ((t.lon - p.1) / 2.0).sin().powi(2);
                best = best.min(2.0 * 6371.0 * h.sqrt().asin());
            }
            oracle.push(best);
        }
        let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        assert!((r.mean - mean).abs() <= 1e-6 * mean);
        let med = lower_median(&oracle).unwrap();
        assert!((r.median - med).abs() <= 1e-6 * med);
    }

    #[test]
    fn retrieval_perfect_alignment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::from_vec(&[4, 50], (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = retrieval_eval(&p, &p, Some(&[0.9, 0.8, 0.5, 0.1])).unwrap();
        assert_eq!((r.r_at_1, r.median_rank, r.pool), (100.0, 1, 50));
        assert!(retrieval_eval(&p, &Tensor::zeros(&[3, 50]), None).is_err());
    }

    #[test]
    fn retrieval_hand_example_matches_sort_oracle() {
        // 2-d projections of three items
        let text = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let image = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.2]).unwrap();
        let r = retrieval_eval(&text, &image, None).unwrap();
        let cos = |a: (f64, f64), b: (f64, f64)| {
            (a.0 * b.0 + a.1 * b.1) / ((a.0.hypot(a.1)) * (b.0.hypot(b.1)))
        };
        let t = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let im = [(0.0, 1.0), (1.0, 0.0), (1.0, 0.2)];
        for (i, q) in t.iter().enumerate() {
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| cos(*q, im[b]).total_cmp(&cos(*q, im[a])).then(a.cmp(&b)));
            let rank = order.iter().position(|&j| j == i).unwrap() + 1;
            assert_eq!(r.ranks[i], rank);
        }
    }

    #[test]
    fn retrieval_chance_band() {
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 1000;
            let a = Tensor::from_vec(&[8, n], (0..8 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::from_vec(&[8, n], (0..8 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = retrieval_eval(&a, &b, None).unwrap();
            assert!((300..=700).contains(&r.median_rank), "{}", r.median_rank);
            assert!(r.recall_at(1) <= r.recall_at(10) && r.recall_at(10) <= r.recall_at(100));
        }
    }

    #[test]
    fn bleu_cases() {
        let c = vec![toks("a b c d e"), toks("the cat sat on the mat")];
        assert!(bleu(&c, &c, 4).unwrap().iter().all(|v| (v - 100.0).abs() < 1e-9));
        let b = bleu(&[toks("x y z")], &[toks("a b c")], 4).unwrap();
        assert_eq!(b[0], 0.0);
        // clipped unigram precision 1/3, candidate longer than reference so no penalty
        let b = bleu(&[toks("the the the")], &[toks("the cat")], 1).unwrap();
        assert!((b[0] - 100.0 / 3.0).abs() < 1e-9);
        // shorter candidate: BP = exp(1 - 4/2)
        let b = bleu(&[toks("a b")], &[toks("a b c d")], 2).unwrap();
        assert!((b[1] - 100.0 * (-1f64).exp()).abs() < 1e-9);
        assert!(bleu(&c, &c[..1], 4).is_err());
        assert_eq!(bleu(&[vec![]], &[toks("a")], 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bleu_can_rise_with_n_when_bigram_precision_is_higher() {
        // one-token sentences add unigram mass but no bigrams
        let c = vec![toks("q"), toks("a b c")];
        let r = vec![toks("z"), toks("a b c")];
        let b = bleu(&c, &r, 2).unwrap();
        assert!((b[0] - 75.0).abs() < 1e-9);
        assert!((b[1] - 100.0 * (0.75f64 * 1.0).sqrt()).abs() < 1e-9);
        assert!(b[1] > b[0]);
    }

    proptest::proptest! {
        #[test]
        fn bleu_non_increasing_when_precisions_are(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..4, 0..9), proptest::collection::vec(0u8..4, 1..9)),
                1..6,
            )
        ) {
            let to_s = |v: &Vec<u8>| v.iter().map(|t| format!("t{t}")).collect::<Vec<_>>();
            let c: Vec<_> = pairs.iter().map(|(a, _)| to_s(a)).collect();
            let r: Vec<_> = pairs.iter().map(|(_, b)| to_s(b)).collect();
            let b = bleu(&c, &r, 4).unwrap();
            let p: Vec<f64> = (1..=4).map(|n| bleu_precision(&c, &r, n)).collect();
            for n in 1..4 {
                if p[..=n].windows(2).all(|w| w[1] <= w[0]) {
                    proptest::prop_assert!(b[n] <= b[n - 1] + 1e-9, "{:?} {:?}", b, p);
                }
            }
            proptest::prop_assert!(b.iter().all(|v| (0.0..=100.0 + 1e-9).contains(v)));
        }
    }
}
