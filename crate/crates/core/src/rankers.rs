//! Interaction-based neural rankers (KNRM, DRMM) over an embedding table,
//! and the BM25 interpolation used for re-ranking.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tape, Tensor, Var};
use crate::corpus::{Dataset, Query, SyntheticSpec};
use crate::error::{Error, Result};
use crate::index::{minmax_normalize, search_topk, BM25Index, BM25Params};

pub const EMBEDDING_PARAM: &str = "embedding";
pub const KNRM_EPSILON: f64 = 1e-10;

/// 64-bit FNV-1a, used to derive per-token seeds independent of vocabulary order.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn token_vector(seed: u64, token_hash: u64, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ token_hash);
    (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// A token resolved against an [`EmbeddingTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRef {
    Row(usize),
    /// Unseen token; its vector is a fixed function of the token hash.
    Oov(u64),
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    dim: usize,
    matrix: Vec<f64>,
    trainable: bool,
    oov_seed: u64,
}

impl EmbeddingTable {
    /// Random vectors, uniform in [-0.1, 0.1], one per distinct token.
    /// Rows are numbered in sorted token order.
    pub fn random<'a>(tokens: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64, trainable: bool) -> Self {
        let mut sorted: Vec<&str> = tokens.into_iter().collect::<HashSet<_>>().into_iter().collect();
        sorted.sort_unstable();
        let mut matrix = Vec::with_capacity(sorted.len() * dim);
        let mut vocab = HashMap::with_capacity(sorted.len());
        for (i, t) in sorted.iter().enumerate() {
            matrix.extend(token_vector(seed, fnv1a(t), dim, 0.1));
            vocab.insert(t.to_string(), i);
        }
        EmbeddingTable {
            vocab,
            dim,
            matrix,
            trainable,
            oov_seed: seed.wrapping_add(1),
        }
    }

    /// Whitespace-delimited text: a token followed by `dim` reals per line.
    /// When `keep` is given, other tokens are skipped.
    pub fn load_text(path: &Path, keep: Option<&HashSet<String>>, trainable: bool, oov_seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = HashMap::new();
        let mut matrix = Vec::new();
        let mut dim = 0usize;
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let parse_err = |message: String| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message,
            };
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("bad number `{f}`"))))
                .collect::<Result<_>>()?;
            if dim == 0 {
                dim = values.len();
                if dim == 0 {
                    return Err(parse_err("no vector components".into()));
                }
            } else if values.len() != dim {
                return Err(parse_err(format!("expected {dim} components, got {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err("non-finite component".into()));
            }
            let token = token.to_lowercase();
            if keep.is_some_and(|k| !k.contains(&token)) || vocab.contains_key(&token) {
                continue;
            }
            vocab.insert(token, vocab.len());
            matrix.extend(values);
        }
        if dim == 0 {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: 0,
                message: "empty embedding file".into(),
            });
        }
        Ok(EmbeddingTable {
            vocab,
            dim,
            matrix,
            trainable,
            oov_seed,
        })
    }

    /// Builds a table from explicit rows; tokens must be distinct.
    pub fn from_rows(tokens: Vec<String>, dim: usize, matrix: Vec<f64>, trainable: bool, oov_seed: u64) -> Result<Self> {
        if dim == 0 || matrix.len() != tokens.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} tokens of dim {dim}",
                matrix.len(),
                tokens.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding values must be finite".into()));
        }
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.into_iter().enumerate() {
            if vocab.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate embedding token `{t}`")));
            }
        }
        Ok(EmbeddingTable {
            vocab,
            dim,
            matrix,
            trainable,
            oov_seed,
        })
    }

    /// Writes the table in the whitespace-delimited text format, rows in index order.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut tokens: Vec<(&String, &usize)> = self.vocab.iter().collect();
        tokens.sort_by_key(|(_, &i)| i);
        let mut out = String::new();
        for (t, &i) in tokens {
            out.push_str(t);
            for v in &self.matrix[i * self.dim..(i + 1) * self.dim] {
                out.push(' ');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Feeds tokens in row order, values and flags to `sink`, for content hashing.
    pub fn digest_into(&self, sink: &mut dyn FnMut(&[u8])) {
        let mut tokens: Vec<(&String, &usize)> = self.vocab.iter().collect();
        tokens.sort_by_key(|(_, &i)| i);
        for (t, _) in tokens {
            sink(t.as_bytes());
            sink(&[0]);
        }
        for v in &self.matrix {
            sink(&v.to_le_bytes());
        }
        sink(&(self.dim as u64).to_le_bytes());
        sink(&[u8::from(self.trainable)]);
        sink(&self.oov_seed.to_le_bytes());
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn lookup(&self, token: &str) -> TokenRef {
        match self.vocab.get(token) {
            Some(&i) => TokenRef::Row(i),
            None => TokenRef::Oov(fnv1a(token)),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenRef> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    /// Vector of a token; trainable rows are read from `params`.
    fn vector<'a>(&'a self, params: &'a ParamVector, t: TokenRef, oov: &'a mut Vec<f64>) -> &'a [f64] {
        match t {
            TokenRef::Row(i) => {
                let src = if self.trainable {
                    params.get(EMBEDDING_PARAM).unwrap_or(&self.matrix)
                } else {
                    &self.matrix
                };
                &src[i * self.dim..(i + 1) * self.dim]
            }
            TokenRef::Oov(h) => {
                *oov = token_vector(self.oov_seed, h, self.dim, 0.1);
                oov
            }
        }
    }

    fn gather_values(&self, params: &ParamVector, tokens: &[TokenRef]) -> Tensor {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        let mut scratch = Vec::new();
        for &t in tokens {
            data.extend_from_slice(self.vector(params, t, &mut scratch));
        }
        Tensor::new(tokens.len(), self.dim, data).expect("gathered rows match dim")
    }
}

fn unit_vector(seed: u64, hash: u64, dim: usize) -> Vec<f64> {
    let mut v = token_vector(seed, hash, dim, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Embeddings for the vocabularies of synthetic domains. Within a domain
/// that declares clusters, each vector mixes a shared cluster direction
/// (weight `sqrt(cohesion)`) with a token-specific one, so members of a
/// cluster have cosine similarity close to the cohesion.
pub fn synthetic_embeddings(specs: &[SyntheticSpec], dim: usize, seed: u64, trainable: bool) -> Result<EmbeddingTable> {
    let mut tokens = Vec::new();
    let mut matrix = Vec::new();
    let mut seen = HashSet::new();
    for spec in specs {
        let (a, b) = (spec.cluster_cohesion.sqrt(), (1.0 - spec.cluster_cohesion).sqrt());
        for i in 0..spec.vocab_size {
            let token = format!("w{}", spec.domain_vocab_offset + i);
            if !seen.insert(token.clone()) {
                continue;
            }
            let own = unit_vector(seed, fnv1a(&token), dim);
            if spec.cluster_size > 0 {
                let cluster = fnv1a(&format!("cluster:{}:{}", spec.domain_vocab_offset, i / spec.cluster_size));
                let centre = unit_vector(seed, cluster, dim);
                matrix.extend(centre.iter().zip(&own).map(|(c, o)| a * c + b * o));
            } else {
                matrix.extend(own);
            }
            tokens.push(token);
        }
    }
    EmbeddingTable::from_rows(tokens, dim, matrix, trainable, seed.wrapping_add(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knrm,
    Drmm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Knrm => "knrm",
            ModelKind::Drmm => "drmm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub mu: f64,
    pub sigma: f64,
}

/// 11 kernels: exact match (mu 1, sigma 1e-3) then mu 0.9 .. -0.9 with sigma 0.1.
pub fn default_kernels() -> Vec<Kernel> {
    let mut k = vec![Kernel { mu: 1.0, sigma: 1e-3 }];
    for i in 0..10 {
        k.push(Kernel {
            mu: (9 - 2 * i) as f64 / 10.0,
            sigma: 0.1,
        });
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub kind: ModelKind,
    pub embedding_dim: usize,
    pub kernels: Vec<Kernel>,
    /// Multiplier on each pooled KNRM feature before the output layer.
    pub feature_scale: f64,
    pub histogram_bins: usize,
    pub hidden: Vec<usize>,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            kind: ModelKind::Knrm,
            embedding_dim: 32,
            kernels: default_kernels(),
            feature_scale: 1.0,
            histogram_bins: 30,
            hidden: vec![10, 1],
        }
    }
}

impl RankerConfig {
    pub fn knrm() -> Self {
        Self::default()
    }

    pub fn drmm() -> Self {
        RankerConfig {
            kind: ModelKind::Drmm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::Knrm => {
                if self.kernels.is_empty() {
                    return Err(Error::Config("KNRM needs at least one kernel".into()));
                }
                if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
                    return Err(Error::Config("feature_scale must be positive".into()));
                }
                if self.kernels.iter().any(|k| !(k.sigma > 0.0)) {
                    return Err(Error::Config("kernel sigma must be positive".into()));
                }
                if self.kernels.windows(2).any(|w| !(w[0].mu > w[1].mu)) {
                    return Err(Error::Config("kernel mu values must be strictly decreasing".into()));
                }
            }
            ModelKind::Drmm => {
                if self.histogram_bins < 2 {
                    return Err(Error::Config("DRMM needs at least 2 histogram bins".into()));
                }
                if self.hidden.last() != Some(&1) || self.hidden.contains(&0) {
                    return Err(Error::Config(
                        "DRMM hidden sizes must be positive and end with 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Interpolated score `alpha * s_nn + (1 - alpha) * s_bm25`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuralScore {
    pub s_nn: f64,
    pub alpha: f64,
    pub s_bm25: f64,
    pub s_global: f64,
}

impl NeuralScore {
    pub fn new(s_nn: f64, s_bm25: f64, alpha: f64) -> Result<Self> {
        Ok(NeuralScore {
            s_nn,
            alpha,
            s_bm25,
            s_global: combined_score(s_nn, s_bm25, alpha)?,
        })
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} outside [0, 1]")))
    }
}

pub fn combined_score(s_nn: f64, s_bm25: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * s_nn + (1.0 - alpha) * s_bm25)
}

/// Parameter leaves of one forward/backward pass.
///
/// Dense arrays are bound once; embedding rows are gathered per call and
/// their gradients scattered back to the flat layout by [`Binding::sparse_grad`].
pub struct Binding<'t> {
    tape: &'t Tape,
    named: Vec<(String, usize, Var<'t>)>,
    gathers: Vec<(Vec<TokenRef>, Var<'t>)>,
    embedding_offset: Option<usize>,
}

impl<'t> Binding<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.named
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| *v)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    /// Flat-index gradient contributions accumulated on the tape, merged by index.
    pub fn sparse_grad(&self, dim: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (_, offset, v) in &self.named {
            out.extend(v.grad().data().iter().enumerate().map(|(i, &g)| (offset + i, g)));
        }
        if let Some(base) = self.embedding_offset {
            for (tokens, v) in &self.gathers {
                let g = v.grad();
                for (r, t) in tokens.iter().enumerate() {
                    if let TokenRef::Row(i) = t {
                        for c in 0..dim {
                            out.push((base + i * dim + c, g.get(r, c)));
                        }
                    }
                }
            }
        }
        out.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(out.len());
        for (i, g) in out {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += g,
                _ => merged.push((i, g)),
            }
        }
        merged
    }

    pub fn accumulate_grad(&self, acc: &mut [f64], dim: usize, scale: f64) {
        for (i, g) in self.sparse_grad(dim) {
            acc[i] += scale * g;
        }
    }
}

/// Query tokens plus the idf of each (for DRMM gating).
#[derive(Debug, Clone)]
pub struct EncodedQuery {
    pub tokens: Vec<TokenRef>,
    pub idf: Vec<f64>,
}

/// Token references of a dataset, resolved once per ranker.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub docs: HashMap<String, Vec<TokenRef>>,
    pub queries: HashMap<String, EncodedQuery>,
}

impl EncodedDataset {
    pub fn doc(&self, id: &str) -> Result<&[TokenRef]> {
        self.docs
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("document `{id}` not encoded")))
    }

    pub fn query(&self, id: &str) -> Result<&EncodedQuery> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("query `{id}` not encoded")))
    }
}

/// A neural ranking model: architecture plus embedding table. Parameters
/// live in a separate [`ParamVector`].
#[derive(Debug, Clone)]
pub struct Ranker {
    config: RankerConfig,
    embeddings: EmbeddingTable,
}

impl Ranker {
    pub fn new(config: RankerConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has dim {}, config says {}",
                embeddings.dim(),
                config.embedding_dim
            )));
        }
        Ok(Ranker { config, embeddings })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.config.histogram_bins];
        sizes.extend(&self.config.hidden);
        sizes
    }

    /// Fresh parameters: embedding copy when trainable, everything else
    /// uniform in [-0.1, 0.1].
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect() };
        let mut p = ParamVector::new();
        if self.embeddings.trainable {
            p.push(
                EMBEDDING_PARAM,
                vec![self.embeddings.len(), self.embeddings.dim],
                self.embeddings.matrix.clone(),
            )
            .expect("fresh layout");
        }
        match self.config.kind {
            ModelKind::Knrm => {
                let k = self.config.kernels.len();
                p.push("knrm.w", vec![k], uniform(k)).expect("fresh layout");
                p.push("knrm.b", vec![1], uniform(1)).expect("fresh layout");
            }
            ModelKind::Drmm => {
                let sizes = self.layer_sizes();
                for (l, w) in sizes.windows(2).enumerate() {
                    p.push(format!("drmm.w{l}"), vec![w[0], w[1]], uniform(w[0] * w[1]))
                        .expect("fresh layout");
                    p.push(format!("drmm.b{l}"), vec![w[1]], uniform(w[1])).expect("fresh layout");
                }
                p.push("drmm.gate", vec![1], uniform(1)).expect("fresh layout");
            }
        }
        p
    }

    /// Binds dense (non-embedding) arrays as tape leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, params: &ParamVector) -> Result<Binding<'t>> {
        let mut named = Vec::new();
        let mut embedding_offset = None;
        for spec in params.specs() {
            if spec.name == EMBEDDING_PARAM {
                if spec.shape != [self.embeddings.len(), self.embeddings.dim] {
                    return Err(Error::Shape(format!(
                        "embedding parameter shape {:?} does not match table {}x{}",
                        spec.shape,
                        self.embeddings.len(),
                        self.embeddings.dim
                    )));
                }
                embedding_offset = Some(spec.offset);
                continue;
            }
            let values = params.get(&spec.name).expect("spec from same vector").to_vec();
            let (rows, cols) = match spec.shape.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                other => return Err(Error::Shape(format!("unsupported parameter rank {other:?}"))),
            };
            named.push((spec.name.clone(), spec.offset, tape.leaf(Tensor::new(rows, cols, values)?)));
        }
        if self.embeddings.trainable && embedding_offset.is_none() {
            return Err(Error::Contract("trainable embeddings missing from parameters".into()));
        }
        Ok(Binding {
            tape,
            named,
            gathers: Vec::new(),
            embedding_offset,
        })
    }

    fn gather<'t>(&self, binding: &mut Binding<'t>, params: &ParamVector, tokens: &[TokenRef]) -> Var<'t> {
        let values = self.embeddings.gather_values(params, tokens);
        if binding.embedding_offset.is_some() {
            let v = binding.tape.leaf(values);
            binding.gathers.push((tokens.to_vec(), v));
            v
        } else {
            binding.tape.constant(values)
        }
    }

    pub fn encode_dataset(&self, dataset: &Dataset, index: &BM25Index) -> EncodedDataset {
        EncodedDataset {
            docs: dataset
                .documents()
                .iter()
                .map(|d| (d.doc_id.clone(), self.embeddings.encode(&d.tokens)))
                .collect(),
            queries: dataset
                .queries()
                .iter()
                .map(|q| (q.query_id.clone(), self.encode_query(q, index)))
                .collect(),
        }
    }

    pub fn encode_query(&self, query: &Query, index: &BM25Index) -> EncodedQuery {
        EncodedQuery {
            tokens: self.embeddings.encode(&query.tokens),
            idf: query
                .tokens
                .iter()
                .map(|t| if index.doc_freq(t) > 0 { index.idf(t) } else { 0.0 })
                .collect(),
        }
    }

    /// Neural relevance score of one (query, document) pair.
    pub fn score<'t>(
        &self,
        binding: &mut Binding<'t>,
        params: &ParamVector,
        query: &EncodedQuery,
        doc: &[TokenRef],
    ) -> Result<Var<'t>> {
        if query.tokens.is_empty() {
            return Err(Error::Scoring("empty query".into()));
        }
        if doc.is_empty() {
            return Err(Error::Scoring("empty document".into()));
        }
        match self.config.kind {
            ModelKind::Knrm => self.knrm(binding, params, &query.tokens, doc),
            ModelKind::Drmm => self.drmm(binding, params, query, doc),
        }
    }

    fn knrm<'t>(
        &self,
        binding: &mut Binding<'t>,
        params: &ParamVector,
        query: &[TokenRef],
        doc: &[TokenRef],
    ) -> Result<Var<'t>> {
        let q = self.gather(binding, params, query);
        let d = self.gather(binding, params, doc);
        let sim = q.cosine_similarity_matrix(d)?;
        let mut features = Vec::with_capacity(self.config.kernels.len());
        for k in &self.config.kernels {
            let soft_tf = sim
                .add_const(-k.mu)
                .square()
                .mul_const(-1.0 / (2.0 * k.sigma * k.sigma))
                .exp()
                .sum_rows();
            features.push(soft_tf.add_const(KNRM_EPSILON).log()?.sum().mul_const(self.config.feature_scale));
        }
        let phi = binding.tape.stack(&features)?;
        phi.dot(binding.var("knrm.w")?)?
            .add(binding.var("knrm.b")?)
            .map(Var::tanh)
    }

    /// Log-count histograms (one row per query term) of cosine similarities.
    pub fn drmm_histograms(&self, params: &ParamVector, query: &[TokenRef], doc: &[TokenRef]) -> Tensor {
        let tape = Tape::new();
        let q = tape.constant(self.embeddings.gather_values(params, query));
        let d = tape.constant(self.embeddings.gather_values(params, doc));
        let sim = q.cosine_similarity_matrix(d).expect("same dim").value();
        histogram_rows(&sim, self.config.histogram_bins)
    }

    fn drmm<'t>(
        &self,
        binding: &mut Binding<'t>,
        params: &ParamVector,
        query: &EncodedQuery,
        doc: &[TokenRef],
    ) -> Result<Var<'t>> {
        let tape = binding.tape;
        let mut h = tape.constant(self.drmm_histograms(params, &query.tokens, doc));
        for l in 0..self.config.hidden.len() {
            h = h
                .matmul(binding.var(&format!("drmm.w{l}"))?)?
                .add_row(binding.var(&format!("drmm.b{l}"))?)?
                .tanh();
        }
        let gates = drmm_gates(tape, binding.var("drmm.gate")?, &query.idf)?;
        gates.dot(h)
    }
}

/// Softmax over query terms of `gate * idf`.
pub fn drmm_gates<'t>(tape: &'t Tape, gate: Var<'t>, idf: &[f64]) -> Result<Var<'t>> {
    let logits = tape.constant(Tensor::column(idf.to_vec())).mul(gate)?;
    let shift = logits.value().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.add_const(-shift).exp();
    e.div(e.sum())
}

/// Histogram of each row of `sim` over equal-width bins on [-1, 1]; a
/// similarity of exactly 1 falls in the top bin. Counts become `ln(1 + c)`.
pub fn histogram_rows(sim: &Tensor, bins: usize) -> Tensor {
    let (rows, cols) = sim.shape();
    let mut data = vec![0.0; rows * bins];
    for i in 0..rows {
        for j in 0..cols {
            let s = sim.get(i, j).clamp(-1.0, 1.0);
            let b = (((s + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1);
            data[i * bins + b] += 1.0;
        }
    }
    for x in &mut data {
        *x = f64::ln_1p(*x);
    }
    Tensor::new(rows, bins, data).expect("histogram shape")
}

/// Forward-only neural score.
pub fn neural_score(ranker: &Ranker, params: &ParamVector, query: &EncodedQuery, doc: &[TokenRef]) -> Result<f64> {
    let tape = Tape::new();
    let mut binding = ranker.bind(&tape, params)?;
    Ok(ranker.score(&mut binding, params, query, doc)?.item())
}

/// Scores `search_topk(k)` with the neural model and sorts by the global
/// score (descending, doc_id ascending on ties). BM25 scores are min-max
/// normalized over the candidate list before interpolation.
#[allow(clippy::too_many_arguments)]
pub fn rerank(
    ranker: &Ranker,
    params: &ParamVector,
    encoded: &EncodedDataset,
    index: &BM25Index,
    bm25_params: &BM25Params,
    query: &Query,
    k: usize,
    alpha: f64,
) -> Result<Vec<(String, f64)>> {
    check_alpha(alpha)?;
    if k == 0 {
        return Err(Error::Config("re-ranking depth must be at least 1".into()));
    }
    let hits = search_topk(index, bm25_params, query, k);
    let bm25: Vec<f64> = hits.iter().map(|(_, s)| *s).collect();
    let doc_ids: Vec<String> = hits.into_iter().map(|(d, _)| d).collect();
    rerank_candidates(ranker, params, encoded, &query.query_id, &doc_ids, &minmax_normalize(&bm25), alpha)
}

/// Re-scores a pre-ranked candidate list whose BM25 scores are already
/// normalized.
pub fn rerank_candidates(
    ranker: &Ranker,
    params: &ParamVector,
    encoded: &EncodedDataset,
    query_id: &str,
    doc_ids: &[String],
    bm25_norm: &[f64],
    alpha: f64,
) -> Result<Vec<(String, f64)>> {
    check_alpha(alpha)?;
    if doc_ids.len() != bm25_norm.len() {
        return Err(Error::Contract("candidate and score lists differ in length".into()));
    }
    let enc_query = encoded.query(query_id)?;
    let mut scored = Vec::with_capacity(doc_ids.len());
    for (doc_id, &b) in doc_ids.iter().zip(bm25_norm) {
        let s_nn = if alpha > 0.0 {
            neural_score(ranker, params, enc_query, encoded.doc(doc_id)?)?
        } else {
            0.0
        };
        scored.push((doc_id.clone(), combined_score(s_nn, b, alpha)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(tokens: &[&str], dim: usize, trainable: bool) -> EmbeddingTable {
        EmbeddingTable::random(tokens.iter().copied(), dim, 3, trainable)
    }

    #[test]
    fn combined_score_cases() {
        assert_eq!(combined_score(0.2, 0.4, 1.0).unwrap(), 0.2);
        assert_eq!(combined_score(0.2, 0.4, 0.0).unwrap(), 0.4);
        assert!((combined_score(0.2, 0.4, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(combined_score(0.2, 0.4, 1.5), Err(Error::Config(_))));
        let s = NeuralScore::new(0.2, 0.4, 0.5).unwrap();
        assert_eq!(s.s_global, 0.5 * 0.2 + 0.5 * 0.4);
    }

    #[test]
    fn config_validation() {
        assert!(RankerConfig::knrm().validate().is_ok());
        assert!(RankerConfig::drmm().validate().is_ok());
        let mut bad = RankerConfig::knrm();
        bad.kernels.swap(1, 2);
        assert!(bad.validate().is_err());
        let bad = RankerConfig {
            histogram_bins: 1,
            ..RankerConfig::drmm()
        };
        assert!(bad.validate().is_err());
        let defaults = default_kernels();
        assert_eq!(defaults.len(), 11);
        assert!((defaults[10].mu + 0.9).abs() < 1e-12);
    }

    #[test]
    fn oov_vectors_are_fixed() {
        let t = table(&["a"], 4, false);
        let p = ParamVector::new();
        let oov = t.lookup("zzz");
        assert!(matches!(oov, TokenRef::Oov(_)));
        assert_eq!(t.gather_values(&p, &[oov]), t.gather_values(&p, &[t.lookup("zzz")]));
    }

    #[test]
    fn knrm_zero_weights_give_zero() {
        let t = table(&["a", "b", "c"], 8, true);
        let ranker = Ranker::new(RankerConfig { embedding_dim: 8, ..RankerConfig::knrm() }, t).unwrap();
        let mut p = ranker.init_params(1);
        p.get_mut("knrm.w").unwrap().fill(0.0);
        p.get_mut("knrm.b").unwrap().fill(0.0);
        let q = EncodedQuery {
            tokens: ranker.embeddings().encode(&["a".into()]),
            idf: vec![1.0],
        };
        let d = ranker.embeddings().encode(&["b".into(), "c".into()]);
        assert_eq!(neural_score(&ranker, &p, &q, &d).unwrap(), 0.0);
        let empty = EncodedQuery { tokens: vec![], idf: vec![] };
        assert!(matches!(neural_score(&ranker, &p, &empty, &d), Err(Error::Scoring(_))));
    }

    #[test]
    fn exact_match_kernel_is_one_before_pooling() {
        let tape = Tape::new();
        let t = table(&["a"], 8, false);
        let p = ParamVector::new();
        let e = tape.constant(t.gather_values(&p, &[t.lookup("a")]));
        let sim = e.cosine_similarity_matrix(e).unwrap();
        let k = sim.add_const(-1.0).square().mul_const(-1.0 / (2.0 * 1e-6)).exp();
        assert!((k.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_single_bin() {
        let sim = Tensor::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let h = histogram_rows(&sim, 30);
        for b in 0..29 {
            assert_eq!(h.get(0, b), 0.0);
        }
        assert!((h.get(0, 29) - 4f64.ln()).abs() < 1e-15);
        let h = histogram_rows(&Tensor::new(1, 2, vec![-1.0, 0.0]).unwrap(), 4);
        assert_eq!(h.get(0, 0), 2f64.ln());
        assert_eq!(h.get(0, 2), 2f64.ln());
    }

    #[test]
    fn uniform_idf_gives_uniform_gates() {
        let tape = Tape::new();
        let gate = tape.leaf(Tensor::scalar(0.7));
        let g = drmm_gates(&tape, gate, &[2.0, 2.0, 2.0, 2.0]).unwrap().value();
        for &x in g.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_text_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        fs::write(&path, "the 0.1 0.2\nCat 1 -1\n").unwrap();
        let t = EmbeddingTable::load_text(&path, None, false, 0).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 2));
        assert_eq!(t.lookup("cat"), TokenRef::Row(1));
        fs::write(&path, "the 0.1 0.2\ncat 1\n").unwrap();
        assert!(matches!(
            EmbeddingTable::load_text(&path, None, false, 0),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
