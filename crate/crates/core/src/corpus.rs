//! Datasets, dataset streams, TREC-style ingestion, the synthetic domain
//! generator and query-sampled sub-datasets.
//!
//! A [`Dataset`] is immutable once built: every constructor validates the
//! cross references (qrels against documents and queries, split against
//! queries) and precomputes the lookup tables used by the rest of the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{search_topk, BM25Index, BM25Params};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<String>,
}

/// One relevance judgment. Grade 0 is a judged non-relevant document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct QrelEntry {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

impl FromStr for QrelEntry {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(format!(
                "expected 4 columns `query_id 0 doc_id grade`, found {}",
                fields.len()
            ));
        }
        let grade = fields[3]
            .parse::<u32>()
            .map_err(|_| format!("grade `{}` is not a nonnegative integer", fields[3]))?;
        Ok(QrelEntry {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            grade,
        })
    }
}

/// Query-level train/test partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// How to split queries when loading a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Exact query counts, e.g. `27/18`.
    Counts { train: usize, test: usize },
    /// Proportions, e.g. `0.6/0.4`.
    Proportions { train: f64, test: f64 },
    /// Explicit query id lists.
    Explicit { train: Vec<String>, test: Vec<String> },
}

impl SplitSpec {
    pub fn from_id_files(train_path: &Path, test_path: &Path) -> Result<Self> {
        let read_ids = |path: &Path| -> Result<Vec<String>> {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        Ok(SplitSpec::Explicit {
            train: read_ids(train_path)?,
            test: read_ids(test_path)?,
        })
    }

    /// Applies this split to a set of query ids. Count and proportion splits
    /// shuffle the sorted ids with `seed` first.
    pub fn apply(&self, query_ids: &[String], seed: u64) -> Result<Split> {
        let mut ids: Vec<String> = query_ids.to_vec();
        ids.sort();
        let (n_train, n_test) = match self {
            SplitSpec::Explicit { train, test } => {
                return Ok(Split {
                    train: train.clone(),
                    test: test.clone(),
                })
            }
            SplitSpec::Counts { train, test } => {
                if train + test > ids.len() {
                    return Err(Error::Config(format!(
                        "split {train}/{test} needs {} queries, dataset has {}",
                        train + test,
                        ids.len()
                    )));
                }
                if train + test < ids.len() {
                    log::warn!(
                        "split {train}/{test} leaves {} queries unused",
                        ids.len() - train - test
                    );
                }
                (*train, *test)
            }
            SplitSpec::Proportions { train, test } => {
                let n_train = ((train / (train + test)) * ids.len() as f64).round() as usize;
                (n_train, ids.len() - n_train)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let mut train: Vec<String> = ids[..n_train].to_vec();
        let mut test: Vec<String> = ids[n_train..n_train + n_test].to_vec();
        train.sort();
        test.sort();
        Ok(Split { train, test })
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse split `{s}`; expected `27/18` or `0.6/0.4`"));
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let (a, b) = (a.trim(), b.trim());
        if a.contains('.') || b.contains('.') {
            let train: f64 = a.parse().map_err(|_| bad())?;
            let test: f64 = b.parse().map_err(|_| bad())?;
            if !(train >= 0.0 && test >= 0.0 && train + test > 0.0) {
                return Err(bad());
            }
            Ok(SplitSpec::Proportions { train, test })
        } else {
            Ok(SplitSpec::Counts {
                train: a.parse().map_err(|_| bad())?,
                test: b.parse().map_err(|_| bad())?,
            })
        }
    }
}

/// Documents, queries, judgments and a query split for one domain.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    documents: Vec<Document>,
    queries: Vec<Query>,
    qrels: Vec<QrelEntry>,
    split: Split,
    doc_pos: HashMap<String, usize>,
    query_pos: HashMap<String, usize>,
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.documents == other.documents
            && self.queries == other.queries
            && self.qrels == other.qrels
            && self.split == other.split
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        documents: Vec<Document>,
        queries: Vec<Query>,
        mut qrels: Vec<QrelEntry>,
        split: Split,
    ) -> Result<Self> {
        let name = name.into();
        let mut doc_pos = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if d.tokens.is_empty() {
                return Err(Error::Validation(format!("document `{}` has no tokens", d.doc_id)));
            }
            if doc_pos.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate doc_id `{}`", d.doc_id)));
            }
        }
        let mut query_pos = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.tokens.is_empty() {
                return Err(Error::Validation(format!("query `{}` has no tokens", q.query_id)));
            }
            if query_pos.insert(q.query_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate query_id `{}`", q.query_id)));
            }
        }
        qrels.sort();
        let mut judgments: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for q in &qrels {
            if !query_pos.contains_key(&q.query_id) {
                return Err(Error::Validation(format!(
                    "qrel references unknown query `{}`",
                    q.query_id
                )));
            }
            if !doc_pos.contains_key(&q.doc_id) {
                return Err(Error::Validation(format!(
                    "qrel references unknown document `{}`",
                    q.doc_id
                )));
            }
            let prev = judgments
                .entry(q.query_id.clone())
                .or_default()
                .insert(q.doc_id.clone(), q.grade);
            if prev.is_some() {
                return Err(Error::Validation(format!(
                    "duplicate qrel for ({}, {})",
                    q.query_id, q.doc_id
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for id in split.train.iter().chain(&split.test) {
            if !query_pos.contains_key(id) {
                return Err(Error::Validation(format!("split references unknown query `{id}`")));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!(
                    "query `{id}` appears twice in the train/test split"
                )));
            }
        }
        Ok(Dataset {
            name,
            documents,
            queries,
            qrels,
            split,
            doc_pos,
            query_pos,
            judgments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    /// Judgments sorted by (query_id, doc_id, grade).
    pub fn qrels(&self) -> &[QrelEntry] {
        &self.qrels
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_pos.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn query(&self, query_id: &str) -> Option<&Query> {
        self.query_pos.get(query_id).map(|&i| &self.queries[i])
    }

    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// All judgments, keyed by query.
    pub fn judgment_map(&self) -> &BTreeMap<String, BTreeMap<String, u32>> {
        &self.judgments
    }

    /// Grade of `(query_id, doc_id)`; unjudged pairs are grade 0.
    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|j| j.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// Number of judgments with grade ≥ 1.
    pub fn relevant_count(&self) -> usize {
        self.qrels.iter().filter(|q| q.grade >= 1).count()
    }

    /// Whether the query has at least one judged-relevant document.
    pub fn has_relevant(&self, query_id: &str) -> bool {
        self.judgments
            .get(query_id)
            .is_some_and(|j| j.values().any(|&g| g >= 1))
    }

    /// Same content under another name.
    pub fn renamed(&self, name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            ..self.clone()
        }
    }

    /// Same content with a different query split.
    pub fn with_split(&self, split: Split) -> Result<Dataset> {
        Dataset::new(
            self.name.clone(),
            self.documents.clone(),
            self.queries.clone(),
            self.qrels.clone(),
            split,
        )
    }
}

/// An ordered dataset stream `D1 -> ... -> Dn`.
#[derive(Debug, Clone)]
pub struct StreamSetting {
    name: String,
    datasets: Vec<Dataset>,
}

impl StreamSetting {
    pub fn new(name: impl Into<String>, datasets: Vec<Dataset>) -> Result<Self> {
        if datasets.len() < 2 {
            return Err(Error::Config(format!(
                "a stream needs at least 2 datasets, got {}",
                datasets.len()
            )));
        }
        let mut names = BTreeSet::new();
        for d in &datasets {
            if !names.insert(d.name()) {
                return Err(Error::Config(format!("dataset `{}` repeated in stream", d.name())));
            }
        }
        Ok(StreamSetting {
            name: name.into(),
            datasets,
        })
    }

    /// Orders datasets by decreasing number of training queries (stable).
    pub fn sorted_by_train_size(name: impl Into<String>, mut datasets: Vec<Dataset>) -> Result<Self> {
        datasets.sort_by_key(|d| std::cmp::Reverse(d.split().train.len()));
        Self::new(name, datasets)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Copy of the stream with dataset `position` replaced.
    pub fn with_dataset(&self, position: usize, dataset: Dataset) -> Result<Self> {
        let mut datasets = self.datasets.clone();
        datasets[position] = dataset;
        Self::new(self.name.clone(), datasets)
    }
}

impl fmt::Display for StreamSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.datasets.iter().map(|d| d.name()).collect();
        write!(f, "{}", names.join("->"))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}

fn parse_tsv<T>(path: &Path, build: impl Fn(String, Vec<String>) -> T) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message,
        };
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `id<TAB>text`".into()))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(parse_err("empty id".into()));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(parse_err(format!("`{id}` has no tokens after tokenization")));
        }
        out.push(build(id.to_string(), tokens));
    }
    Ok(out)
}

/// Loads documents (`doc_id<TAB>text`), queries (`query_id<TAB>text`) and
/// four-column qrels, then splits the queries.
pub fn load_trec_dataset(
    name: &str,
    doc_path: &Path,
    query_path: &Path,
    qrels_path: &Path,
    split_spec: &SplitSpec,
    seed: u64,
) -> Result<Dataset> {
    let documents = parse_tsv(doc_path, |doc_id, tokens| Document { doc_id, tokens })?;
    let queries = parse_tsv(query_path, |query_id, tokens| Query { query_id, tokens })?;
    let mut qrels = Vec::new();
    for (i, line) in read_lines(qrels_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        qrels.push(line.parse::<QrelEntry>().map_err(|message| Error::Parse {
            file: qrels_path.display().to_string(),
            line: i + 1,
            message,
        })?);
    }
    if qrels.is_empty() {
        log::warn!("{}: no relevance judgments", qrels_path.display());
    }
    let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
    let split = split_spec.apply(&ids, seed)?;
    Dataset::new(name, documents, queries, qrels, split)
}

/// File names used by [`write_trec_dataset`] and [`load_trec_dir`].
pub const DOCS_FILE: &str = "docs.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const TRAIN_IDS_FILE: &str = "train.ids";
pub const TEST_IDS_FILE: &str = "test.ids";

/// Writes the dataset as TREC-style files plus explicit split id lists.
/// Text is written as space-joined tokens, so reloading reproduces the
/// tokens exactly.
pub fn write_trec_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |file: &str, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(file);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))
    };
    write(DOCS_FILE, &|w| {
        for d in dataset.documents() {
            writeln!(w, "{}\t{}", d.doc_id, d.tokens.join(" "))?;
        }
        Ok(())
    })?;
    write(QUERIES_FILE, &|w| {
        for q in dataset.queries() {
            writeln!(w, "{}\t{}", q.query_id, q.tokens.join(" "))?;
        }
        Ok(())
    })?;
    write(QRELS_FILE, &|w| {
        for q in dataset.qrels() {
            writeln!(w, "{} 0 {} {}", q.query_id, q.doc_id, q.grade)?;
        }
        Ok(())
    })?;
    write(TRAIN_IDS_FILE, &|w| {
        for id in &dataset.split().train {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })?;
    write(TEST_IDS_FILE, &|w| {
        for id in &dataset.split().test {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })
}

/// Reloads a directory written by [`write_trec_dataset`].
pub fn load_trec_dir(name: &str, dir: &Path) -> Result<Dataset> {
    let split = SplitSpec::from_id_files(&dir.join(TRAIN_IDS_FILE), &dir.join(TEST_IDS_FILE))?;
    load_trec_dataset(
        name,
        &dir.join(DOCS_FILE),
        &dir.join(QUERIES_FILE),
        &dir.join(QRELS_FILE),
        &split,
        0,
    )
}

/// Parameters of one synthetic domain.
///
/// Background text is Zipf-distributed over the domain vocabulary
/// `w{offset}..w{offset + vocab_size}`. Each query owns a few topic terms;
/// relevant documents receive injected query terms and topic terms.
/// Distractor documents are judged grade 0 and receive either the query
/// terms or one query term plus the topic terms, per `distractor_mode`.
///
/// With `cluster_size > 0` the vocabulary is partitioned into consecutive
/// clusters of that size and topic terms are drawn from the clusters of the
/// query terms; [`crate::rankers::synthetic_embeddings`] gives cluster
/// members similar vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_docs: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub doc_len_mean: f64,
    pub query_len_mean: f64,
    pub relevance_density: f64,
    pub domain_vocab_offset: usize,
    pub train_fraction: f64,
    pub topic_terms: usize,
    /// Probability that a given query term is injected into a relevant doc.
    /// At least one query term is always injected.
    pub query_term_rate: f64,
    /// Probability that a given topic term is injected into a relevant doc.
    pub topic_term_rate: f64,
    pub distractors_per_query: usize,
    pub distractor_mode: DistractorMode,
    pub cluster_size: usize,
    /// Expected cosine similarity between members of a cluster.
    pub cluster_cohesion: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            n_docs: 200,
            n_queries: 20,
            vocab_size: 1000,
            doc_len_mean: 40.0,
            query_len_mean: 3.0,
            relevance_density: 0.02,
            domain_vocab_offset: 0,
            train_fraction: 0.6,
            topic_terms: 3,
            query_term_rate: 1.0,
            topic_term_rate: 0.7,
            distractors_per_query: 0,
            distractor_mode: DistractorMode::QueryTerms,
            cluster_size: 0,
            cluster_cohesion: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    /// Every query term, one or two copies each.
    QueryTerms,
    /// One query term plus every topic term, one or two copies each.
    TopicTerms,
}

struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..n)
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        Zipf { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c < u).min(self.cumulative.len() - 1)
    }
}

fn jittered_len(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    ((mean * rng.gen_range(0.5..1.5)).round() as usize).max(1)
}

fn insert_at_random(rng: &mut ChaCha8Rng, tokens: &mut Vec<String>, token: &str) {
    let at = rng.gen_range(0..=tokens.len());
    tokens.insert(at, token.to_string());
}

fn inject_copies(rng: &mut ChaCha8Rng, tokens: &mut Vec<String>, term: &str) {
    for _ in 0..rng.gen_range(1..=2) {
        insert_at_random(rng, tokens, term);
    }
}

/// First vocabulary index of the content range; query and topic terms avoid
/// the most frequent background terms below it.
fn content_start(vocab_size: usize) -> usize {
    if vocab_size >= 40 {
        vocab_size / 20
    } else {
        0
    }
}

/// Draws query terms and topic terms (as vocabulary indices).
fn draw_query_terms(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, qlen: usize) -> (Vec<usize>, Vec<usize>) {
    let content: Vec<usize> = (content_start(spec.vocab_size)..spec.vocab_size).collect();
    if spec.cluster_size == 0 {
        let n = qlen + spec.topic_terms.min(content.len() - qlen);
        let terms: Vec<usize> = content.choose_multiple(rng, n).copied().collect();
        return (terms[..qlen].to_vec(), terms[qlen..].to_vec());
    }
    let query: Vec<usize> = content.choose_multiple(rng, qlen).copied().collect();
    let neighbours: Vec<usize> = query
        .iter()
        .map(|&t| t / spec.cluster_size * spec.cluster_size)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .flat_map(|lo| lo.max(content[0])..(lo + spec.cluster_size).min(spec.vocab_size))
        .filter(|i| !query.contains(i))
        .collect();
    let topic = neighbours
        .choose_multiple(rng, spec.topic_terms.min(neighbours.len()))
        .copied()
        .collect();
    (query, topic)
}

/// Generates one synthetic domain; a pure function of `(seed, spec)`.
pub fn generate_synthetic_domain(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_docs == 0 || spec.n_queries == 0 || spec.vocab_size == 0 {
        return Err(Error::Config("synthetic counts must all be at least 1".into()));
    }
    if !(spec.relevance_density > 0.0 && spec.relevance_density <= 1.0) {
        return Err(Error::Config(format!(
            "relevance_density {} outside (0, 1]",
            spec.relevance_density
        )));
    }
    if (spec.vocab_size as f64) < spec.query_len_mean {
        return Err(Error::Config(format!(
            "vocab_size {} smaller than query_len_mean {}",
            spec.vocab_size, spec.query_len_mean
        )));
    }
    if !(spec.doc_len_mean >= 1.0 && spec.query_len_mean >= 1.0) {
        return Err(Error::Config("mean lengths must be at least 1".into()));
    }
    for (name, v) in [
        ("train_fraction", spec.train_fraction),
        ("query_term_rate", spec.query_term_rate),
        ("topic_term_rate", spec.topic_term_rate),
        ("cluster_cohesion", spec.cluster_cohesion),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..spec.vocab_size)
        .map(|i| format!("w{}", spec.domain_vocab_offset + i))
        .collect();
    let zipf = Zipf::new(spec.vocab_size);
    let n_content = spec.vocab_size - content_start(spec.vocab_size);

    let doc_width = spec.n_docs.to_string().len().max(4);
    let query_width = spec.n_queries.to_string().len().max(3);

    let mut doc_tokens: Vec<Vec<String>> = (0..spec.n_docs)
        .map(|_| {
            let len = jittered_len(&mut rng, spec.doc_len_mean);
            (0..len).map(|_| vocab[zipf.sample(&mut rng)].clone()).collect()
        })
        .collect();

    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Vec::new();
    let n_relevant = ((spec.relevance_density * spec.n_docs as f64).round() as usize).clamp(1, spec.n_docs);
    let doc_indices: Vec<usize> = (0..spec.n_docs).collect();
    for qi in 0..spec.n_queries {
        let query_id = format!("q{:0width$}", qi + 1, width = query_width);
        let qlen = jittered_len(&mut rng, spec.query_len_mean).min(n_content);
        let (query_idx, topic_idx) = draw_query_terms(&mut rng, spec, qlen);
        let query_terms: Vec<&str> = query_idx.iter().map(|&i| vocab[i].as_str()).collect();
        let topic_terms: Vec<&str> = topic_idx.iter().map(|&i| vocab[i].as_str()).collect();

        let relevant: Vec<usize> = doc_indices.choose_multiple(&mut rng, n_relevant).copied().collect();
        for &d in &relevant {
            let grade = if rng.gen_bool(0.3) { 2 } else { 1 };
            let forced = rng.gen_range(0..query_terms.len());
            for (ti, term) in query_terms.iter().enumerate() {
                if ti == forced || rng.gen_bool(spec.query_term_rate) {
                    for _ in 0..grade {
                        insert_at_random(&mut rng, &mut doc_tokens[d], term);
                    }
                }
            }
            for term in &topic_terms {
                if rng.gen_bool(spec.topic_term_rate) {
                    insert_at_random(&mut rng, &mut doc_tokens[d], term);
                }
            }
            qrels.push(QrelEntry {
                query_id: query_id.clone(),
                doc_id: format!("d{:0width$}", d + 1, width = doc_width),
                grade,
            });
        }
        let relevant_set: BTreeSet<usize> = relevant.iter().copied().collect();
        let others: Vec<usize> = doc_indices
            .iter()
            .copied()
            .filter(|d| !relevant_set.contains(d))
            .collect();
        let n_distractors = spec.distractors_per_query.min(others.len());
        for &d in others.choose_multiple(&mut rng, n_distractors) {
            match spec.distractor_mode {
                DistractorMode::QueryTerms => {
                    for term in &query_terms {
                        inject_copies(&mut rng, &mut doc_tokens[d], term);
                    }
                }
                DistractorMode::TopicTerms => {
                    let term = query_terms[rng.gen_range(0..query_terms.len())];
                    insert_at_random(&mut rng, &mut doc_tokens[d], term);
                    for term in &topic_terms {
                        inject_copies(&mut rng, &mut doc_tokens[d], term);
                    }
                }
            }
            qrels.push(QrelEntry {
                query_id: query_id.clone(),
                doc_id: format!("d{:0width$}", d + 1, width = doc_width),
                grade: 0,
            });
        }
        queries.push(Query {
            query_id,
            tokens: query_terms.iter().map(|t| t.to_string()).collect(),
        });
    }

    let documents: Vec<Document> = doc_tokens
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Document {
            doc_id: format!("d{:0width$}", i + 1, width = doc_width),
            tokens,
        })
        .collect();
    let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
    let split = fraction_split(&ids, spec.train_fraction, seed ^ 0x5eed_5eed)?;
    Dataset::new(spec.name.clone(), documents, queries, qrels, split)
}

/// Seeded proportional split keeping at least one query per side when
/// there are two or more queries.
fn fraction_split(ids: &[String], train_fraction: f64, seed: u64) -> Result<Split> {
    let n = ids.len();
    let mut n_train = (train_fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    SplitSpec::Counts {
        train: n_train,
        test: n - n_train,
    }
    .apply(ids, seed)
}

/// Samples `n_queries` queries without replacement and keeps the union of
/// their top-`k` BM25 documents, with qrels restricted to the kept pairs.
///
/// Sampled queries keep their original train/test membership; if one side
/// ends up empty the sample is re-split with the original train fraction.
pub fn sample_subdataset(
    dataset: &Dataset,
    n_queries: usize,
    index: &BM25Index,
    params: &BM25Params,
    k: i64,
    seed: u64,
) -> Result<Dataset> {
    if k <= 0 {
        return Err(Error::Config(format!("sub-dataset depth k must be positive, got {k}")));
    }
    if n_queries == 0 || n_queries > dataset.queries().len() {
        return Err(Error::Config(format!(
            "cannot sample {n_queries} queries from {} available",
            dataset.queries().len()
        )));
    }
    let k = k as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<&Query> = dataset.queries().choose_multiple(&mut rng, n_queries).collect();
    sampled.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut kept_docs: BTreeSet<String> = BTreeSet::new();
    let mut pairs: BTreeSet<(String, String)> = BTreeSet::new();
    for q in &sampled {
        for (doc_id, _) in search_topk(index, params, q, k) {
            pairs.insert((q.query_id.clone(), doc_id.clone()));
            kept_docs.insert(doc_id);
        }
    }
    let documents: Vec<Document> = dataset
        .documents()
        .iter()
        .filter(|d| kept_docs.contains(&d.doc_id))
        .cloned()
        .collect();
    let qrels: Vec<QrelEntry> = dataset
        .qrels()
        .iter()
        .filter(|e| pairs.contains(&(e.query_id.clone(), e.doc_id.clone())))
        .cloned()
        .collect();
    let queries: Vec<Query> = sampled.into_iter().cloned().collect();
    let ids: BTreeSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let train: Vec<String> = dataset
        .split()
        .train
        .iter()
        .filter(|id| ids.contains(id.as_str()))
        .cloned()
        .collect();
    let test: Vec<String> = dataset
        .split()
        .test
        .iter()
        .filter(|id| ids.contains(id.as_str()))
        .cloned()
        .collect();
    let split = if train.is_empty() || test.is_empty() {
        let total = dataset.split().train.len() + dataset.split().test.len();
        let fraction = if total == 0 {
            0.6
        } else {
            dataset.split().train.len() as f64 / total as f64
        };
        let all: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        fraction_split(&all, fraction, seed)?
    } else {
        Split { train, test }
    };
    if documents.is_empty() {
        return Err(Error::Validation(format!(
            "sub-dataset of `{}` with seed {seed} retrieved no documents",
            dataset.name()
        )));
    }
    Dataset::new(
        format!("{}#s{seed}", dataset.name()),
        documents,
        queries,
        qrels,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            name: "tiny".into(),
            n_docs: 30,
            n_queries: 6,
            vocab_size: 200,
            doc_len_mean: 12.0,
            query_len_mean: 2.0,
            relevance_density: 0.1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits_on_punctuation() {
        assert_eq!(tokenize("Hello, World!  COVID-19"), vec!["hello", "world", "covid", "19"]);
        assert!(tokenize(" ,;- ").is_empty());
    }

    #[test]
    fn qrel_line_maps_columns() {
        let e: QrelEntry = "Q1 0 D7 1".parse().unwrap();
        assert_eq!(
            e,
            QrelEntry {
                query_id: "Q1".into(),
                doc_id: "D7".into(),
                grade: 1
            }
        );
        assert!("Q1 0 D7".parse::<QrelEntry>().is_err());
        assert!("Q1 0 D7 -1".parse::<QrelEntry>().is_err());
    }

    #[test]
    fn split_counts_over_45_queries() {
        let ids: Vec<String> = (0..45).map(|i| format!("q{i:02}")).collect();
        let spec: SplitSpec = "27/18".parse().unwrap();
        let split = spec.apply(&ids, 7).unwrap();
        assert_eq!(split.train.len(), 27);
        assert_eq!(split.test.len(), 18);
        let train: BTreeSet<_> = split.train.iter().collect();
        assert!(split.test.iter().all(|id| !train.contains(id)));
        assert_eq!(split, spec.apply(&ids, 7).unwrap());
    }

    #[test]
    fn split_spec_parsing() {
        assert_eq!(
            "0.8/0.2".parse::<SplitSpec>().unwrap(),
            SplitSpec::Proportions { train: 0.8, test: 0.2 }
        );
        assert!("27-18".parse::<SplitSpec>().is_err());
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        assert!(SplitSpec::Counts { train: 3, test: 1 }.apply(&ids, 0).is_err());
    }

    #[test]
    fn dataset_rejects_unknown_references() {
        let docs = vec![Document {
            doc_id: "d1".into(),
            tokens: vec!["a".into()],
        }];
        let queries = vec![Query {
            query_id: "q1".into(),
            tokens: vec!["a".into()],
        }];
        let bad = vec![QrelEntry {
            query_id: "q1".into(),
            doc_id: "d9".into(),
            grade: 1,
        }];
        let err = Dataset::new("x", docs.clone(), queries.clone(), bad, Split::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let overlap = Split {
            train: vec!["q1".into()],
            test: vec!["q1".into()],
        };
        assert!(Dataset::new("x", docs, queries, vec![], overlap).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic_domain(3, &tiny_spec()).unwrap();
        let b = generate_synthetic_domain(3, &tiny_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domain(4, &tiny_spec()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_full_density() {
        let spec = SyntheticSpec {
            n_docs: 3,
            n_queries: 2,
            vocab_size: 50,
            relevance_density: 1.0,
            ..tiny_spec()
        };
        let d = generate_synthetic_domain(1, &spec).unwrap();
        assert_eq!(d.qrels().len(), 6);
        assert!(d.qrels().iter().all(|q| q.grade >= 1));
    }

    #[test]
    fn synthetic_offsets_give_disjoint_vocabularies() {
        let a = generate_synthetic_domain(1, &tiny_spec()).unwrap();
        let b = generate_synthetic_domain(
            1,
            &SyntheticSpec {
                domain_vocab_offset: 10_000,
                ..tiny_spec()
            },
        )
        .unwrap();
        let vocab = |d: &Dataset| -> BTreeSet<String> {
            d.documents()
                .iter()
                .flat_map(|doc| doc.tokens.iter().cloned())
                .chain(d.queries().iter().flat_map(|q| q.tokens.iter().cloned()))
                .collect()
        };
        assert!(vocab(&a).is_disjoint(&vocab(&b)));
    }

    #[test]
    fn synthetic_every_query_has_a_relevant_doc_containing_a_query_term() {
        let d = generate_synthetic_domain(9, &tiny_spec()).unwrap();
        for q in d.queries() {
            let rel: Vec<&String> = d
                .judgments(&q.query_id)
                .unwrap()
                .iter()
                .filter(|(_, &g)| g >= 1)
                .map(|(id, _)| id)
                .collect();
            assert!(!rel.is_empty());
            for id in rel {
                let doc = d.document(id).unwrap();
                assert!(q.tokens.iter().any(|t| doc.tokens.contains(t)));
            }
        }
    }

    #[test]
    fn synthetic_config_errors() {
        let spec = SyntheticSpec {
            vocab_size: 2,
            query_len_mean: 3.0,
            ..tiny_spec()
        };
        assert!(matches!(generate_synthetic_domain(0, &spec), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            relevance_density: 0.0,
            ..tiny_spec()
        };
        assert!(generate_synthetic_domain(0, &spec).is_err());
    }

    #[test]
    fn trec_round_trip() {
        let d = generate_synthetic_domain(5, &tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trec_dataset(&d, dir.path()).unwrap();
        let back = load_trec_dir("tiny", dir.path()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn malformed_lines_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("docs.tsv");
        let queries = dir.path().join("queries.tsv");
        let qrels = dir.path().join("qrels.txt");
        fs::write(&docs, "d1\thello world\nbroken line\n").unwrap();
        fs::write(&queries, "q1\thello\n").unwrap();
        fs::write(&qrels, "").unwrap();
        let err = load_trec_dataset("x", &docs, &queries, &qrels, &"1/0".parse().unwrap(), 0).unwrap_err();
        match err {
            Error::Parse { file, line, .. } => {
                assert!(file.ends_with("docs.tsv"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&docs, "d1\thello world\n").unwrap();
        let d = load_trec_dataset("x", &docs, &queries, &qrels, &"1/0".parse().unwrap(), 0).unwrap();
        assert!(d.qrels().is_empty());
        fs::write(&qrels, "q1 0 d2 1\n").unwrap();
        let err = load_trec_dataset("x", &docs, &queries, &qrels, &"1/0".parse().unwrap(), 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn subdataset_protocol() {
        let d = generate_synthetic_domain(11, &tiny_spec()).unwrap();
        let index = build_index(&d).unwrap();
        let params = BM25Params::default();
        let sub = sample_subdataset(&d, 3, &index, &params, 5, 1).unwrap();
        assert_eq!(sub.queries().len(), 3);
        let original: BTreeSet<&QrelEntry> = d.qrels().iter().collect();
        assert!(sub.qrels().iter().all(|e| original.contains(e)));
        for doc in sub.documents() {
            assert!(sub.queries().iter().any(|q| search_topk(&index, &params, q, 5)
                .iter()
                .any(|(id, _)| *id == doc.doc_id)));
        }
        assert_eq!(sub, sample_subdataset(&d, 3, &index, &params, 5, 1).unwrap());
        assert!(matches!(
            sample_subdataset(&d, 3, &index, &params, 0, 1),
            Err(Error::Config(_))
        ));

        let full = sample_subdataset(&d, d.queries().len(), &index, &params, 10_000, 2).unwrap();
        let ids = |x: &Dataset| x.queries().iter().map(|q| q.query_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&full), ids(&d));
    }

    #[test]
    fn repeated_subsamples_are_distinct() {
        let spec = SyntheticSpec {
            n_queries: 40,
            n_docs: 60,
            ..tiny_spec()
        };
        let d = generate_synthetic_domain(2, &spec).unwrap();
        let index = build_index(&d).unwrap();
        let params = BM25Params::default();
        let mut seen = BTreeSet::new();
        for seed in 1..=300 {
            let sub = sample_subdataset(&d, 15, &index, &params, 100, seed).unwrap();
            let ids: Vec<String> = sub.queries().iter().map(|q| q.query_id.clone()).collect();
            seen.insert(ids);
        }
        assert_eq!(seen.len(), 300);
    }
}
