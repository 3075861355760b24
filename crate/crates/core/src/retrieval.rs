//! Descriptor extraction, cosine ranking and retrieval metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_tensor, Dataset, ImageSample, View};
use crate::encoder::Encoder;
use crate::error::{Error, Result};

/// Images per inference batch during extraction.
const EXTRACT_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    /// One UAV image per query against the satellite gallery.
    #[serde(rename = "uav2sat")]
    UavToSatSingle,
    /// All UAV images of a location averaged into one query.
    #[serde(rename = "uav2sat-multi")]
    UavToSatMulti,
    /// Satellite queries against the UAV gallery.
    #[serde(rename = "sat2uav")]
    SatToUav,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::UavToSatSingle, Protocol::UavToSatMulti, Protocol::SatToUav];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::UavToSatSingle => "uav2sat",
            Protocol::UavToSatMulti => "uav2sat-multi",
            Protocol::SatToUav => "sat2uav",
        }
    }

    pub fn query_view(self) -> View {
        match self {
            Protocol::UavToSatSingle | Protocol::UavToSatMulti => View::Uav,
            Protocol::SatToUav => View::Satellite,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?} (expected uav2sat, uav2sat-multi or sat2uav)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub vector: Vec<f64>,
    /// Sample index (or location id for fused queries).
    pub source: usize,
}

/// `dot(a, b) / (|a| |b|)`; a zero vector has similarity 0 to everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "descriptor lengths differ");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero vector; using 0");
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query: usize,
    /// Gallery sources by descending similarity.
    pub ranked: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    /// 1-based rank of the first gallery entry in `relevant`.
    pub fn first_relevant_rank(&self, relevant: &BTreeSet<usize>) -> Option<usize> {
        self.ranked.iter().position(|g| relevant.contains(g)).map(|p| p + 1)
    }
}

/// Full ranking by descending cosine similarity, ties by ascending source.
pub fn rank_gallery(query: &Descriptor, gallery: &[Descriptor]) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::Data("cannot rank against an empty gallery".into()));
    }
    let mut scored: Vec<(f64, usize)> =
        gallery.iter().map(|g| (cosine_similarity(&query.vector, &g.vector), g.source)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(RetrievalResult {
        query: query.source,
        ranked: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    })
}

/// Fraction of queries with a relevant entry in the top `k`. Queries with
/// no relevant entries are left out.
pub fn recall_at_k(results: &[RetrievalResult], relevance: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall cutoff k must be at least 1".into()));
    }
    assert_eq!(results.len(), relevance.len(), "one relevant set per query");
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (r, rel) in results.iter().zip(relevance) {
        if rel.is_empty() {
            continue;
        }
        counted += 1;
        if r.ranked.iter().take(k).any(|g| rel.contains(g)) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Data("no query has a relevant gallery entry".into()));
    }
    Ok(hits as f64 / counted as f64)
}

/// `(1/|rel|) sum over relevant ranks r of (#relevant in top r) / r`;
/// `None` for an empty relevant set.
pub fn average_precision(result: &RetrievalResult, relevant: &BTreeSet<usize>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, g) in result.ranked.iter().enumerate() {
        if relevant.contains(g) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// Elementwise mean.
pub fn multi_query_fuse(descriptors: &[Descriptor]) -> Result<Descriptor> {
    let first = descriptors.first().ok_or_else(|| Error::Data("nothing to fuse".into()))?;
    let len = first.vector.len();
    if descriptors.iter().any(|d| d.vector.len() != len) {
        return Err(Error::Shape("cannot fuse descriptors of different lengths".into()));
    }
    let mut mean = vec![0.0; len];
    for d in descriptors {
        for (m, v) in mean.iter_mut().zip(&d.vector) {
            *m += v;
        }
    }
    let n = descriptors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Descriptor { vector: mean, source: first.source })
}

/// Anything that maps images to fixed-length descriptors.
pub trait DescriptorExtractor {
    fn descriptor_len(&self) -> usize;
    fn extract(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f64>>>;
}

impl DescriptorExtractor for Encoder {
    fn descriptor_len(&self) -> usize {
        Encoder::descriptor_len(self)
    }

    /// Inference-mode part embeddings, concatenated innermost ring first.
    fn extract(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EXTRACT_BATCH) {
            let x = batch_tensor::<ChaCha8Rng>(chunk, None)?;
            let parts = self.infer(&x)?.parts;
            for i in 0..chunk.len() {
                let v: Vec<f64> = parts.iter().flat_map(|p| p.row(i).to_vec()).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Training("encoder produced a non-finite descriptor".into()));
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

pub fn extract_descriptor(encoder: &Encoder, sample: &ImageSample, source: usize) -> Result<Descriptor> {
    let mut v = encoder.extract(&[sample])?;
    Ok(Descriptor { vector: v.pop().unwrap(), source })
}

/// Embeds each location id as a fixed random direction, ignoring pixels:
/// a perfect encoder for testing the metric pipeline.
#[derive(Debug, Clone)]
pub struct OracleExtractor {
    pub dim: usize,
    pub seed: u64,
}

impl OracleExtractor {
    fn direction(&self, location: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (location as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl DescriptorExtractor for OracleExtractor {
    fn descriptor_len(&self) -> usize {
        self.dim
    }

    fn extract(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        Ok(samples.iter().map(|s| self.direction(s.location_id)).collect())
    }
}

/// Metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub excluded_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub name: String,
    pub location_id: usize,
    pub first_relevant_rank: Option<usize>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub queries: Vec<QueryRecord>,
    pub results: Vec<RetrievalResult>,
    /// Gallery entry names by source index.
    pub gallery_names: Vec<String>,
}

fn sample_name(dataset: &Dataset, index: usize) -> String {
    let s = &dataset.samples[index];
    match &s.source_path {
        Some(p) => p.display().to_string(),
        None => format!("{}/{}/{}#{index}", dataset.split.name(), dataset.class_names[s.location_id], s.view.name()),
    }
}

impl Evaluation {
    pub fn write_metrics_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.report)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("query,location_id,first_relevant_rank,ap\n");
        for q in &self.queries {
            let rank = q.first_relevant_rank.map_or(String::new(), |r| r.to_string());
            let ap = q.ap.map_or(String::new(), |a| a.to_string());
            s.push_str(&format!("{},{},{rank},{ap}\n", csv_field(&q.name), q.location_id));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Query name followed by the top `k` gallery names and scores.
    pub fn write_top_k(&self, path: &Path, k: usize) -> Result<()> {
        let mut s = String::from("query,rank,gallery,score\n");
        for (q, r) in self.queries.iter().zip(&self.results) {
            for (i, (g, score)) in r.ranked.iter().zip(&r.scores).take(k).enumerate() {
                s.push_str(&format!(
                    "{},{},{},{score}\n",
                    csv_field(&q.name),
                    i + 1,
                    csv_field(&self.gallery_names[*g])
                ));
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_view(dataset: &Dataset, view: View, role: &str) -> Result<()> {
    if let Some(s) = dataset.samples.iter().find(|s| s.view != view) {
        return Err(Error::Data(format!("{role} set must hold only {} images, found a {} image", view.name(), s.view.name())));
    }
    Ok(())
}

/// Rank every query against the gallery and average the metrics. Relevance
/// is location identity; gallery entries whose location has no query are
/// distractors.
pub fn evaluate(
    extractor: &dyn DescriptorExtractor,
    query: &Dataset,
    gallery: &Dataset,
    protocol: Protocol,
) -> Result<Evaluation> {
    check_view(query, protocol.query_view(), "query")?;
    check_view(gallery, protocol.query_view().flipped(), "gallery")?;
    if gallery.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }
    if query.is_empty() {
        return Err(Error::Data("query set is empty".into()));
    }
    let g_refs: Vec<&ImageSample> = gallery.samples.iter().collect();
    let g_desc: Vec<Descriptor> = extractor
        .extract(&g_refs)?
        .into_iter()
        .enumerate()
        .map(|(i, vector)| Descriptor { vector, source: i })
        .collect();
    let mut by_location: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, s) in gallery.samples.iter().enumerate() {
        by_location.entry(s.location_id).or_default().insert(i);
    }

    let q_refs: Vec<&ImageSample> = query.samples.iter().collect();
    let q_vecs = extractor.extract(&q_refs)?;
    // (name, location, descriptor)
    let queries: Vec<(String, usize, Descriptor)> = match protocol {
        Protocol::UavToSatSingle | Protocol::SatToUav => q_vecs
            .into_iter()
            .enumerate()
            .map(|(i, vector)| (sample_name(query, i), query.samples[i].location_id, Descriptor { vector, source: i }))
            .collect(),
        Protocol::UavToSatMulti => {
            let mut groups: BTreeMap<usize, Vec<Descriptor>> = BTreeMap::new();
            for (i, vector) in q_vecs.into_iter().enumerate() {
                let loc = query.samples[i].location_id;
                groups.entry(loc).or_default().push(Descriptor { vector, source: loc });
            }
            groups
                .into_iter()
                .map(|(loc, ds)| {
                    let name = format!("{}/{}/fused{}", query.split.name(), query.class_names[loc], ds.len());
                    multi_query_fuse(&ds).map(|d| (name, loc, d))
                })
                .collect::<Result<_>>()?
        }
    };

    let empty = BTreeSet::new();
    let mut results = Vec::with_capacity(queries.len());
    let mut relevance = Vec::with_capacity(queries.len());
    let mut records = Vec::with_capacity(queries.len());
    for (name, loc, d) in &queries {
        let r = rank_gallery(d, &g_desc)?;
        let rel = by_location.get(loc).unwrap_or(&empty);
        records.push(QueryRecord {
            name: name.clone(),
            location_id: *loc,
            first_relevant_rank: r.first_relevant_rank(rel),
            ap: average_precision(&r, rel),
        });
        results.push(r);
        relevance.push(rel.clone());
    }
    let excluded = relevance.iter().filter(|r| r.is_empty()).count();
    if excluded > 0 {
        log::warn!("{excluded} {protocol} queries have no relevant gallery entry and are excluded");
    }
    let aps: Vec<f64> = records.iter().filter_map(|r| r.ap).collect();
    if aps.is_empty() {
        return Err(Error::Data("no query has a relevant gallery entry".into()));
    }
    let report = MetricsReport {
        protocol,
        r1: recall_at_k(&results, &relevance, 1)?,
        r5: recall_at_k(&results, &relevance, 5)?,
        r10: recall_at_k(&results, &relevance, 10)?,
        ap: aps.iter().sum::<f64>() / aps.len() as f64,
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        excluded_queries: excluded,
    };
    let gallery_names = (0..gallery.len()).map(|i| sample_name(gallery, i)).collect();
    Ok(Evaluation { report, queries: records, results, gallery_names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[f64], source: usize) -> Descriptor {
        Descriptor { vector: v.to_vec(), source }
    }

    fn result(ranked: Vec<usize>) -> RetrievalResult {
        let scores = (0..ranked.len()).map(|i| -(i as f64)).collect();
        RetrievalResult { query: 0, ranked, scores }
    }

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn ranking_examples() {
        // similarities 0.2, 0.9, 0.5 with a unit query along x
        let q = d(&[1.0, 0.0], 0);
        let mk = |c: f64, id| d(&[c, (1.0 - c * c).sqrt()], id);
        let r = rank_gallery(&q, &[mk(0.2, 1), mk(0.9, 2), mk(0.5, 3)]).unwrap();
        assert_eq!(r.ranked, vec![2, 3, 1]);
        let r = rank_gallery(&q, &[mk(0.5, 7), mk(0.5, 4), mk(0.1, 1)]).unwrap();
        assert_eq!(r.ranked, vec![4, 7, 1]);
        assert!(rank_gallery(&q, &[]).is_err());
    }

    #[test]
    fn self_match_ranks_first() {
        let q = d(&[0.1, 0.7, -0.3], 9);
        let g = vec![d(&[1.0, 0.0, 0.0], 0), d(&[0.1, 0.7, -0.3], 5), d(&[0.0, 1.0, 0.0], 1)];
        assert_eq!(rank_gallery(&q, &g).unwrap().ranked[0], 5);
    }

    #[test]
    fn recall_examples() {
        let rel = vec![set(&[0])];
        let r = vec![result(vec![5, 6, 0, 7, 8])];
        assert_eq!(recall_at_k(&r, &rel, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &rel, 5).unwrap(), 1.0);
        // true-match ranks 1, 2, 6, 1
        let ranks = [1usize, 2, 6, 1];
        let results: Vec<_> = ranks
            .iter()
            .map(|&k| {
                let mut v: Vec<usize> = (1..=9).collect();
                v.insert(k - 1, 0);
                result(v)
            })
            .collect();
        let rel = vec![set(&[0]); 4];
        assert_eq!(recall_at_k(&results, &rel, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&results, &rel, 5).unwrap(), 0.75);
        assert_eq!(recall_at_k(&results, &rel, 10).unwrap(), 1.0);
        assert!(recall_at_k(&results, &rel, 0).is_err());
    }

    #[test]
    fn empty_relevance_is_excluded() {
        let r = vec![result(vec![0, 1]), result(vec![1, 0])];
        let rel = vec![set(&[0]), set(&[])];
        assert_eq!(recall_at_k(&r, &rel, 1).unwrap(), 1.0);
        assert_eq!(average_precision(&r[1], &rel[1]), None);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&result(vec![0, 1, 2]), &set(&[0])), Some(1.0));
        assert!((average_precision(&result(vec![1, 2, 0]), &set(&[0])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let ap = average_precision(&result(vec![0, 9, 3, 8]), &set(&[0, 3])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.83333).abs() < 1e-5);
    }

    #[test]
    fn fusion_examples() {
        let v = d(&[1.0, -2.0], 0);
        assert_eq!(multi_query_fuse(&[v.clone()]).unwrap().vector, v.vector);
        let neg = d(&[-1.0, 2.0], 1);
        assert_eq!(multi_query_fuse(&[v, neg]).unwrap().vector, vec![0.0, 0.0]);
        let f = multi_query_fuse(&[d(&[1.0, 0.0], 0), d(&[0.0, 1.0], 1)]).unwrap();
        assert_eq!(f.vector, vec![0.5, 0.5]);
        assert!(multi_query_fuse(&[d(&[1.0], 0), d(&[1.0, 2.0], 1)]).is_err());
        assert!(multi_query_fuse(&[]).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!("ground2sat".parse::<Protocol>().is_err());
    }

    proptest! {
        #[test]
        fn scale_invariance(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = b.iter().map(|x| x * c).collect();
            prop_assert!((cosine_similarity(&a, &b) - cosine_similarity(&a, &scaled)).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone_and_bounds_ap(ranks in prop::collection::vec(1usize..12, 1..10)) {
            let results: Vec<_> = ranks.iter().map(|&k| {
                let mut v: Vec<usize> = (1..12).collect();
                v.insert(k - 1, 0);
                result(v)
            }).collect();
            let rel = vec![set(&[0]); ranks.len()];
            let mut prev = 0.0;
            for k in 1..=12 {
                let r = recall_at_k(&results, &rel, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
            for (r, &k) in results.iter().zip(&ranks) {
                let ap = average_precision(r, &rel[0]).unwrap();
                prop_assert!((ap - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }
}
