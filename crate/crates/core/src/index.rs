//! Inverted index with Okapi BM25 scoring, top-k pre-ranking, grid search
//! over `(k1, b)` and training-pair sampling from the pre-ranking.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document, Query};
use crate::error::{Error, Result};
use crate::metrics::MetricId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BM25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for BM25Params {
    fn default() -> Self {
        BM25Params { k1: 1.2, b: 0.75 }
    }
}

impl BM25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("invalid BM25 parameters k1={k1}, b={b}")));
        }
        Ok(BM25Params { k1, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct BM25Index {
    doc_ids: Vec<String>,
    doc_pos: HashMap<String, usize>,
    doc_lengths: Vec<usize>,
    postings: HashMap<String, Vec<Posting>>,
    avg_doc_len: f64,
}

impl BM25Index {
    pub fn from_documents(documents: &[Document]) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Validation("cannot index an empty document collection".into()));
        }
        let mut doc_pos = HashMap::with_capacity(documents.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if doc_pos.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate doc_id `{}` in index input", d.doc_id)));
            }
            doc_lengths.push(d.tokens.len());
            let mut counts: HashMap<&str, u32> = HashMap::new();
            for t in &d.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            for (t, tf) in counts {
                postings.entry(t.to_string()).or_default().push(Posting { doc: i, tf });
            }
        }
        let total: usize = doc_lengths.iter().sum();
        let avg_doc_len = total as f64 / documents.len() as f64;
        if avg_doc_len <= 0.0 {
            return Err(Error::Validation("documents have no tokens".into()));
        }
        Ok(BM25Index {
            doc_ids: documents.iter().map(|d| d.doc_id.clone()).collect(),
            doc_pos,
            doc_lengths,
            postings,
            avg_doc_len,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.doc_pos.get(doc_id).map(|&i| self.doc_lengths[i])
    }

    /// Postings sorted by document position.
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn term_freq(&self, term: &str, doc_id: &str) -> Option<u32> {
        let pos = *self.doc_pos.get(doc_id)?;
        let postings = self.postings(term);
        Some(
            postings
                .binary_search_by_key(&pos, |p| p.doc)
                .map(|i| postings[i].tf)
                .unwrap_or(0),
        )
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always nonnegative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, params: &BM25Params, idf: f64, tf: u32, doc: usize) -> f64 {
        let tf = tf as f64;
        let norm = params.k1 * (1.0 - params.b + params.b * self.doc_lengths[doc] as f64 / self.avg_doc_len);
        idf * tf * (params.k1 + 1.0) / (tf + norm)
    }

    /// Scores every document; entries for documents sharing no term stay 0.
    fn score_all(&self, params: &BM25Params, query: &Query) -> Vec<f64> {
        let mut scores = vec![0.0; self.n_docs()];
        for term in &query.tokens {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in postings {
                scores[p.doc] += self.term_weight(params, idf, p.tf, p.doc);
            }
        }
        scores
    }
}

pub fn build_index(dataset: &Dataset) -> Result<BM25Index> {
    BM25Index::from_documents(dataset.documents())
}

/// BM25 score of one document; each query token (with repeats) contributes.
pub fn bm25_score(index: &BM25Index, params: &BM25Params, query: &Query, doc_id: &str) -> Result<f64> {
    let doc = *index
        .doc_pos
        .get(doc_id)
        .ok_or_else(|| Error::Lookup(format!("document `{doc_id}` is not indexed")))?;
    let mut score = 0.0;
    for term in &query.tokens {
        let postings = index.postings(term);
        if let Ok(i) = postings.binary_search_by_key(&doc, |p| p.doc) {
            score += index.term_weight(params, index.idf(term), postings[i].tf, doc);
        }
    }
    Ok(score)
}

/// Top-`k` documents with positive score, by descending score and then
/// ascending doc_id.
pub fn search_topk(index: &BM25Index, params: &BM25Params, query: &Query, k: usize) -> Vec<(String, f64)> {
    let scores = index.score_all(params, query);
    let mut hits: Vec<(usize, f64)> = scores
        .into_iter()
        .enumerate()
        .filter(|&(_, s)| s > 0.0)
        .collect();
    hits.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_ids[a.0].cmp(&index.doc_ids[b.0]))
    });
    hits.truncate(k);
    hits.into_iter()
        .map(|(i, s)| (index.doc_ids[i].clone(), s))
        .collect()
}

/// Writes `query_id Q0 doc_id rank score tag` lines, ranks starting at 1.
pub fn write_trec_run_lines(
    out: &mut dyn Write,
    query_id: &str,
    ranking: &[(String, f64)],
    tag: &str,
) -> std::io::Result<()> {
    for (rank, (doc_id, score)) in ranking.iter().enumerate() {
        writeln!(out, "{query_id} Q0 {doc_id} {} {score} {tag}", rank + 1)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BM25Grid {
    pub k1: Vec<f64>,
    pub b: Vec<f64>,
    pub metric: String,
    pub depth: usize,
}

impl Default for BM25Grid {
    fn default() -> Self {
        BM25Grid {
            k1: vec![0.6, 0.9, 1.2, 1.5, 2.0],
            b: vec![0.3, 0.5, 0.75, 0.9],
            metric: "map@100".into(),
            depth: 100,
        }
    }
}

/// Mean metric of BM25 rankings over the given queries; queries without
/// relevant judgments are skipped.
pub fn bm25_effectiveness(
    dataset: &Dataset,
    index: &BM25Index,
    params: &BM25Params,
    query_ids: &[String],
    depth: usize,
    metric: MetricId,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for id in query_ids {
        let Some(query) = dataset.query(id) else {
            return Err(Error::Lookup(format!("unknown query `{id}`")));
        };
        let Some(judged) = dataset.judgments(id) else { continue };
        if !judged.values().any(|&g| g >= 1) {
            continue;
        }
        let ranking: Vec<String> = search_topk(index, params, query, depth)
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        total += metric.evaluate(&ranking, judged);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!(
            "no judged queries to evaluate on `{}`",
            dataset.name()
        )));
    }
    Ok(total / n as f64)
}

/// Exhaustive search over the grid on the training queries. Ties keep the
/// lexicographically smallest `(k1, b)`.
pub fn grid_search_bm25(dataset: &Dataset, index: &BM25Index, grid: &BM25Grid) -> Result<BM25Params> {
    let metric: MetricId = grid.metric.parse()?;
    if grid.k1.is_empty() || grid.b.is_empty() {
        return Err(Error::Config("empty BM25 grid".into()));
    }
    let train: Vec<String> = dataset
        .split()
        .train
        .iter()
        .filter(|id| dataset.has_relevant(id))
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(Error::Config(format!(
            "`{}` has no judged training queries for BM25 grid search",
            dataset.name()
        )));
    }
    let mut points: Vec<BM25Params> = Vec::new();
    for &k1 in &grid.k1 {
        for &b in &grid.b {
            points.push(BM25Params::new(k1, b)?);
        }
    }
    points.sort_by(|x, y| x.k1.total_cmp(&y.k1).then(x.b.total_cmp(&y.b)));
    let mut best: Option<(BM25Params, f64)> = None;
    for p in points {
        let value = bm25_effectiveness(dataset, index, &p, &train, grid.depth, metric)?;
        if best.is_none_or(|(_, v)| value > v) {
            best = Some((p, value));
        }
    }
    Ok(best.expect("grid is non-empty").0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub query_id: String,
    pub positive_doc: String,
    pub negative_doc: String,
}

/// Min-max normalization to `[0, 1]`; a constant list maps to all ones.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if scores.is_empty() {
        return Vec::new();
    }
    if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; scores.len()]
    }
}

/// Cached BM25 pre-rankings of a query set, used to draw training pairs.
#[derive(Debug, Clone)]
pub struct PreRanked {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub bm25: Vec<f64>,
    pub bm25_norm: Vec<f64>,
    pub grades: Vec<u32>,
}

/// Positions into a [`PairPool`]: query, positive rank, negative rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolPair {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub struct PairPool {
    queries: Vec<PreRanked>,
}

impl PairPool {
    pub fn new(
        dataset: &Dataset,
        index: &BM25Index,
        params: &BM25Params,
        k: usize,
        query_ids: &[String],
    ) -> Result<Self> {
        let mut ids: Vec<&String> = query_ids.iter().collect();
        ids.sort();
        let mut queries = Vec::with_capacity(ids.len());
        for id in ids {
            let query = dataset
                .query(id)
                .ok_or_else(|| Error::Lookup(format!("unknown query `{id}`")))?;
            let hits = search_topk(index, params, query, k);
            let bm25: Vec<f64> = hits.iter().map(|(_, s)| *s).collect();
            queries.push(PreRanked {
                query_id: id.clone(),
                grades: hits.iter().map(|(d, _)| dataset.grade(id, d)).collect(),
                doc_ids: hits.into_iter().map(|(d, _)| d).collect(),
                bm25_norm: minmax_normalize(&bm25),
                bm25,
            });
        }
        Ok(PairPool { queries })
    }

    pub fn queries(&self) -> &[PreRanked] {
        &self.queries
    }

    /// One pair per relevant document in each top-k, with a negative drawn
    /// uniformly from strictly lower-graded documents of the same top-k.
    pub fn sample(&self, seed: u64) -> Vec<PoolPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for (qi, q) in self.queries.iter().enumerate() {
            for (pi, &g) in q.grades.iter().enumerate() {
                if g == 0 {
                    continue;
                }
                let lower: Vec<usize> = (0..q.grades.len()).filter(|&j| q.grades[j] < g).collect();
                if let Some(&negative) = lower.choose(&mut rng) {
                    pairs.push(PoolPair {
                        query: qi,
                        positive: pi,
                        negative,
                    });
                }
            }
        }
        pairs
    }

    pub fn resolve(&self, pair: &PoolPair) -> TrainingPair {
        let q = &self.queries[pair.query];
        TrainingPair {
            query_id: q.query_id.clone(),
            positive_doc: q.doc_ids[pair.positive].clone(),
            negative_doc: q.doc_ids[pair.negative].clone(),
        }
    }
}

/// Samples pairs over the dataset's training queries from their top-`k`
/// BM25 pre-rankings. Unjudged documents count as grade 0.
pub fn sample_training_pairs(
    dataset: &Dataset,
    index: &BM25Index,
    params: &BM25Params,
    k: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let pool = PairPool::new(dataset, index, params, k, &dataset.split().train)?;
    Ok(pool.sample(seed).iter().map(|p| pool.resolve(p)).collect())
}
