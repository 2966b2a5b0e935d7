//! Configuration-driven orchestration: oracles, transfer streams, the
//! sub-dataset regression study, an on-disk cache and report files.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamVector;
use crate::characteristics::{
    build_design, compute_features, ols_fit, FeatureVector, RegressionDesign, RegressionReport, RegressionRun,
    FEATURE_NAMES,
};
use crate::corpus::{
    generate_synthetic_domain, load_trec_dataset, load_trec_dir, sample_subdataset, write_trec_dataset, Dataset,
    SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::index::{build_index, grid_search_bm25, search_topk, BM25Grid, BM25Index, BM25Params};
use crate::lifelong::{
    estimate_fisher_diagonal, EwcState, FisherDiagonal, TransferStrategy, DEFAULT_FISHER_PAIRS, DEFAULT_LAMBDA,
};
use crate::metrics::{bwt, delta_map, evaluate_run, pr, rem, MetricId, PerformanceMatrix, RankedRun};
use crate::rankers::{check_alpha, synthetic_embeddings, EmbeddingTable, Ranker, RankerConfig};
use crate::training::{
    evaluate_model, train_model, LogRow, OracleModel, Strategy, TrainConfig, TrainContext, TrainingLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Uniform random vectors over the vocabulary of the setting.
    #[default]
    Random,
    /// Cluster-structured vectors for synthetic domains.
    Synthetic,
    /// Whitespace-delimited text file, one token and its vector per line.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub path: Option<PathBuf>,
    pub trainable: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbeddingKind::Random,
            dim: 32,
            path: None,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated with seed `run seed + seed_offset`.
    Synthetic {
        #[serde(default)]
        seed_offset: u64,
        #[serde(default)]
        spec: SyntheticSpec,
    },
    /// Documents, queries and qrels files. The split is either a
    /// `train/test` count or proportion string, or a pair of id files.
    Trec {
        docs: PathBuf,
        queries: PathBuf,
        qrels: PathBuf,
        #[serde(default)]
        split: Option<String>,
        #[serde(default)]
        train_ids: Option<PathBuf>,
        #[serde(default)]
        test_ids: Option<PathBuf>,
    },
    /// A directory written by [`write_trec_dataset`].
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingConfig {
    pub name: String,
    pub datasets: Vec<String>,
    /// Reorder by decreasing number of training queries instead of config order.
    #[serde(default)]
    pub sort_by_train_size: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq2Config {
    pub setting: String,
    pub n_samples: usize,
    /// Queries per sub-dataset: one size, or a list cycled over samples.
    #[serde(deserialize_with = "one_or_many")]
    pub sample_queries: Vec<usize>,
    pub depth: i64,
    /// Sample `i` (0-based) uses seed `first_seed + i`.
    pub first_seed: u64,
    pub strategy: TransferStrategy,
}

impl Default for Rq2Config {
    fn default() -> Self {
        Rq2Config {
            setting: String::new(),
            n_samples: 300,
            sample_queries: vec![50],
            depth: 100,
            first_seed: 1,
            strategy: TransferStrategy::Finetune,
        }
    }
}

impl Rq2Config {
    /// Query count of sample `i`.
    pub fn sample_size(&self, i: usize) -> usize {
        self.sample_queries[i % self.sample_queries.len()]
    }
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(v) => v,
    })
}

/// Full description of an experiment. Relative dataset and embedding paths
/// resolve against `base_dir` (the config file's directory when loaded
/// with [`ExperimentConfig::from_file`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Interpolation weight of the neural score; overrides `train.alpha`.
    pub alpha: f64,
    /// Evaluation measure for the performance matrix.
    pub metric: String,
    /// Re-ranking depth at evaluation time.
    pub eval_depth: usize,
    pub strategies: Vec<TransferStrategy>,
    pub ewc_lambda: f64,
    pub fisher_pairs: usize,
    pub cache: bool,
    pub cache_dir: Option<PathBuf>,
    pub bm25: BM25Grid,
    pub train: TrainConfig,
    pub embeddings: EmbeddingConfig,
    pub models: Vec<RankerConfig>,
    pub datasets: Vec<DatasetConfig>,
    pub settings: Vec<SettingConfig>,
    pub rq2: Option<Rq2Config>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            alpha: 0.5,
            metric: "map@100".into(),
            eval_depth: 100,
            strategies: vec![TransferStrategy::Finetune, TransferStrategy::Ewc],
            ewc_lambda: DEFAULT_LAMBDA,
            fisher_pairs: DEFAULT_FISHER_PAIRS,
            cache: true,
            cache_dir: None,
            bm25: BM25Grid::default(),
            train: TrainConfig::default(),
            embeddings: EmbeddingConfig::default(),
            models: vec![RankerConfig::knrm()],
            datasets: Vec::new(),
            settings: Vec::new(),
            rq2: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetConfig> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("dataset `{name}` is not defined")))
    }

    pub fn setting(&self, name: &str) -> Result<&SettingConfig> {
        self.settings
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("setting `{name}` is not defined")))
    }

    /// The model config as used: embedding width taken from the embeddings section.
    pub fn model_config(&self, model: &RankerConfig) -> RankerConfig {
        RankerConfig {
            embedding_dim: self.embeddings.dim,
            ..model.clone()
        }
    }

    pub fn model(&self, name: &str) -> Result<RankerConfig> {
        self.models
            .iter()
            .find(|m| m.kind.to_string() == name)
            .map(|m| self.model_config(m))
            .ok_or_else(|| Error::Config(format!("model `{name}` is not configured")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        check_alpha(self.alpha)?;
        self.metric.parse::<MetricId>()?;
        self.bm25.metric.parse::<MetricId>()?;
        if self.eval_depth == 0 {
            return Err(Error::Config("eval_depth must be positive".into()));
        }
        if !(self.ewc_lambda >= 0.0 && self.ewc_lambda.is_finite()) {
            return Err(Error::Config(format!("ewc_lambda must be >= 0, got {}", self.ewc_lambda)));
        }
        if self.fisher_pairs == 0 {
            return Err(Error::Config("fisher_pairs must be positive".into()));
        }
        self.train.validate()?;
        let mut kinds = HashSet::new();
        for m in &self.models {
            self.model_config(m).validate()?;
            if !kinds.insert(m.kind) {
                return Err(Error::Config(format!("model `{}` configured twice", m.kind)));
            }
        }
        match self.embeddings.kind {
            EmbeddingKind::File if self.embeddings.path.is_none() => {
                return Err(Error::Config("file embeddings need `path`".into()));
            }
            _ => {}
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dataset `{}` defined twice", d.name)));
            }
        }
        let mut setting_names = HashSet::new();
        for s in &self.settings {
            if !setting_names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("setting `{}` defined twice", s.name)));
            }
            if s.datasets.len() < 2 {
                return Err(Error::Config(format!("setting `{}` needs at least 2 datasets", s.name)));
            }
            for d in &s.datasets {
                let dc = self.dataset(d)?;
                if self.embeddings.kind == EmbeddingKind::Synthetic
                    && !matches!(dc.source, DatasetSource::Synthetic { .. })
                {
                    return Err(Error::Config(format!(
                        "synthetic embeddings need synthetic datasets; `{d}` is not"
                    )));
                }
            }
        }
        if let Some(rq2) = &self.rq2 {
            self.setting(&rq2.setting)?;
            if rq2.n_samples == 0 || rq2.sample_queries.is_empty() || rq2.sample_queries.contains(&0) {
                return Err(Error::Config("rq2 needs n_samples and sample_queries >= 1".into()));
            }
            if rq2.depth <= 0 {
                return Err(Error::Config(format!("rq2 depth must be positive, got {}", rq2.depth)));
            }
        }
        Ok(())
    }
}

/// A dataset with its index, tuned BM25 parameters and BM25 test-split reference.
#[derive(Debug)]
pub struct PreparedDataset {
    pub dataset: Dataset,
    pub index: BM25Index,
    pub bm25_params: BM25Params,
    pub bm25_run: RankedRun,
    pub bm25_test: f64,
    pub hash: String,
}

/// SHA-256 over documents, queries, qrels and split.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(dataset.name().as_bytes());
    h.update([0xff]);
    for d in dataset.documents() {
        h.update(d.doc_id.as_bytes());
        h.update([0]);
        h.update(d.tokens.join(" ").as_bytes());
        h.update([1]);
    }
    h.update([0xfe]);
    for q in dataset.queries() {
        h.update(q.query_id.as_bytes());
        h.update([0]);
        h.update(q.tokens.join(" ").as_bytes());
        h.update([1]);
    }
    h.update([0xfd]);
    for e in dataset.qrels() {
        h.update(format!("{} {} {}\n", e.query_id, e.doc_id, e.grade).as_bytes());
    }
    h.update([0xfc]);
    h.update(dataset.split().train.join(" ").as_bytes());
    h.update([0xfb]);
    h.update(dataset.split().test.join(" ").as_bytes());
    hex::encode(h.finalize())
}

fn params_hash(p: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in p.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn key_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// BM25 top-`depth` run over the listed queries.
pub fn bm25_run(prepared: &Dataset, index: &BM25Index, params: &BM25Params, query_ids: &[String], depth: usize) -> Result<RankedRun> {
    let mut run = RankedRun::new("bm25");
    for id in query_ids {
        let q = prepared
            .query(id)
            .ok_or_else(|| Error::Lookup(format!("unknown query `{id}`")))?;
        run.insert(id.clone(), search_topk(index, params, q, depth));
    }
    Ok(run)
}

/// Indexes the dataset, grid-searches BM25 on its training queries and
/// measures BM25 on its test queries.
pub fn prepare_dataset(dataset: Dataset, grid: &BM25Grid, metric: MetricId, depth: usize) -> Result<PreparedDataset> {
    let index = build_index(&dataset)?;
    let bm25_params = grid_search_bm25(&dataset, &index, grid)?;
    let test = &dataset.split().test;
    let run = bm25_run(&dataset, &index, &bm25_params, test, depth)?;
    let eval = evaluate_run(&run, dataset.judgment_map(), Some(test), metric);
    if eval.per_query.is_empty() {
        return Err(Error::Config(format!("`{}` has no judged test queries", dataset.name())));
    }
    log::info!(
        "{}: k1={} b={} bm25 {}={:.4}",
        dataset.name(),
        bm25_params.k1,
        bm25_params.b,
        metric,
        eval.mean
    );
    Ok(PreparedDataset {
        hash: dataset_hash(&dataset),
        dataset,
        index,
        bm25_params,
        bm25_run: run,
        bm25_test: eval.mean,
    })
}

/// Content-addressed store for oracle checkpoints and Fisher diagonals.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DiskCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn oracle_paths(&self, key: &str) -> (PathBuf, PathBuf) {
        let d = self.dir.join("oracles");
        (d.join(format!("{key}.params")), d.join(format!("{key}.log.csv")))
    }

    pub fn load_oracle(&self, key: &str) -> Option<OracleModel> {
        let (params_path, log_path) = self.oracle_paths(key);
        if !params_path.exists() {
            return None;
        }
        let attempt = || -> Result<OracleModel> {
            let (params, meta) = ParamVector::load(&params_path)?;
            let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = parse_log_csv(&text, &log_path)?;
            let get = |k: &str| {
                meta.get(k)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("{}: missing `{k}`", params_path.display())))
            };
            let bad = |k: &str| Error::Validation(format!("{}: bad `{k}`", params_path.display()));
            log.best_epoch = get("best_epoch")?.parse().map_err(|_| bad("best_epoch"))?;
            log.best_metric = get("best_metric")?.parse().map_err(|_| bad("best_metric"))?;
            Ok(OracleModel {
                params,
                dataset: get("dataset")?,
                selection_metric: log.best_metric,
                log,
            })
        };
        match attempt() {
            Ok(o) => Some(o),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn store_oracle(&self, key: &str, oracle: &OracleModel) -> Result<()> {
        let (params_path, log_path) = self.oracle_paths(key);
        let meta = BTreeMap::from([
            ("kind".to_string(), "oracle".to_string()),
            ("dataset".to_string(), oracle.dataset.clone()),
            ("best_epoch".to_string(), oracle.log.best_epoch.to_string()),
            ("best_metric".to_string(), format!("{:?}", oracle.log.best_metric)),
        ]);
        oracle.params.save(&params_path, &meta)?;
        write_file(&log_path, |w| oracle.log.write_csv(w))
    }

    fn fisher_path(&self, key: &str) -> PathBuf {
        self.dir.join("fisher").join(format!("{key}.params"))
    }

    pub fn load_fisher(&self, key: &str) -> Option<FisherDiagonal> {
        let path = self.fisher_path(key);
        if !path.exists() {
            return None;
        }
        FisherDiagonal::load(&path)
            .map_err(|e| log::warn!("ignoring unreadable cache entry {key}: {e}"))
            .ok()
    }

    pub fn store_fisher(&self, key: &str, fisher: &FisherDiagonal, like: &ParamVector, lambda: f64) -> Result<()> {
        fisher.save(&self.fisher_path(key), like, lambda)
    }
}

/// Parses the CSV written by [`TrainingLog::write_csv`]; best epoch and metric are left at defaults.
pub fn parse_log_csv(text: &str, path: &Path) -> Result<TrainingLog> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |m: &str| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: m.to_string(),
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(err("expected 4 columns"));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err("bad number"))
            }
        };
        rows.push(LogRow {
            epoch: cells[0].parse().map_err(|_| err("bad epoch"))?,
            mean_loss: opt(cells[1])?,
            penalty: opt(cells[2])?,
            selection_metric: cells[3].parse().map_err(|_| err("bad number"))?,
        });
    }
    Ok(TrainingLog {
        rows,
        ..Default::default()
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Results of one (setting, model, strategy, seed) run.
#[derive(Debug, Clone)]
pub struct SettingReport {
    pub setting: String,
    pub stream: Vec<String>,
    pub model: String,
    pub strategy: TransferStrategy,
    pub seed: u64,
    pub metric: String,
    /// Interpolated score, `alpha` from the config.
    pub matrix: PerformanceMatrix,
    /// Neural score only, `alpha = 1`.
    pub matrix_n: PerformanceMatrix,
    pub bwt: f64,
    pub rem: f64,
    pub bwt_n: f64,
    pub remn: f64,
    pub pr: f64,
    pub pr_n: f64,
    pub delta_map: f64,
    pub delta_map_n: f64,
    /// Relative path under the output directory and the run written there.
    pub runs: Vec<(PathBuf, RankedRun)>,
    pub logs: Vec<(PathBuf, TrainingLog)>,
    pub oracle_seconds: f64,
    pub transfer_seconds: f64,
}

/// A stage that failed, recorded in the summary instead of numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub setting: String,
    pub model: String,
    pub strategy: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub reports: Vec<SettingReport>,
    pub failures: Vec<Failure>,
}

/// Mean of `delta_map(R[i,i], bm25[i])` over the right datasets `i >= 2`.
fn mean_delta(m: &PerformanceMatrix) -> Result<f64> {
    let mut total = 0.0;
    for i in 2..=m.n {
        let r = m.r.get(&(i, i)).copied().ok_or_else(|| Error::Contract(format!("R[{i},{i}] missing")))?;
        let b = m.bm25_ref.get(&i).copied().ok_or_else(|| Error::Contract(format!("BM25 reference {i} missing")))?;
        total += delta_map(r, b)?;
    }
    Ok(total / (m.n - 1) as f64)
}

pub struct Pipeline {
    config: ExperimentConfig,
    cache: Option<DiskCache>,
    prepared: RefCell<HashMap<(String, u64), Rc<PreparedDataset>>>,
    oracles: RefCell<HashMap<String, OracleModel>>,
    fishers: RefCell<HashMap<String, FisherDiagonal>>,
}

/// A ranker with the content hash used in cache keys.
pub struct PreparedRanker {
    pub ranker: Ranker,
    pub name: String,
    pub hash: String,
}

const SCORINGS: [(&str, bool); 2] = [("combined", false), ("neural", true)];

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cache = config.cache.then(|| {
            DiskCache::new(config.cache_dir.clone().unwrap_or_else(|| config.out_dir.join("cache")))
        });
        Ok(Pipeline {
            config,
            cache,
            prepared: RefCell::default(),
            oracles: RefCell::default(),
            fishers: RefCell::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn metric(&self) -> MetricId {
        self.config.metric.parse().expect("validated")
    }

    /// Loads or generates a configured dataset.
    pub fn load_dataset(&self, name: &str, seed: u64) -> Result<Dataset> {
        let dc = self.config.dataset(name)?;
        match &dc.source {
            DatasetSource::Synthetic { seed_offset, spec } => {
                let spec = SyntheticSpec {
                    name: dc.name.clone(),
                    ..spec.clone()
                };
                generate_synthetic_domain(seed.wrapping_add(*seed_offset), &spec)
            }
            DatasetSource::Trec {
                docs,
                queries,
                qrels,
                split,
                train_ids,
                test_ids,
            } => {
                let split_spec = match (split, train_ids, test_ids) {
                    (Some(s), None, None) => s.parse()?,
                    (None, Some(a), Some(b)) => SplitSpec::from_id_files(&self.config.resolve(a), &self.config.resolve(b))?,
                    (None, None, None) => SplitSpec::Proportions { train: 0.8, test: 0.2 },
                    _ => {
                        return Err(Error::Config(format!(
                            "dataset `{name}`: give either `split` or both `train_ids` and `test_ids`"
                        )))
                    }
                };
                load_trec_dataset(
                    &dc.name,
                    &self.config.resolve(docs),
                    &self.config.resolve(queries),
                    &self.config.resolve(qrels),
                    &split_spec,
                    seed,
                )
            }
            DatasetSource::Dir { path } => load_trec_dir(&dc.name, &self.config.resolve(path)),
        }
    }

    pub fn prepare(&self, name: &str, seed: u64) -> Result<Rc<PreparedDataset>> {
        let key = (name.to_string(), seed);
        if let Some(p) = self.prepared.borrow().get(&key) {
            return Ok(p.clone());
        }
        let p = Rc::new(self.prepare_owned(self.load_dataset(name, seed)?)?);
        self.prepared.borrow_mut().insert(key, p.clone());
        Ok(p)
    }

    pub fn prepare_owned(&self, dataset: Dataset) -> Result<PreparedDataset> {
        prepare_dataset(dataset, &self.config.bm25, self.metric(), self.config.eval_depth)
    }

    /// Datasets of a setting in stream order.
    pub fn prepare_setting(&self, setting: &SettingConfig, seed: u64) -> Result<Vec<Rc<PreparedDataset>>> {
        let mut out = setting
            .datasets
            .iter()
            .map(|d| self.prepare(d, seed))
            .collect::<Result<Vec<_>>>()?;
        if setting.sort_by_train_size {
            out.sort_by_key(|p| std::cmp::Reverse(p.dataset.split().train.len()));
        }
        Ok(out)
    }

    /// Embedding table over the vocabularies of `datasets`.
    pub fn build_embeddings(&self, datasets: &[&Dataset], seed: u64) -> Result<EmbeddingTable> {
        let ec = &self.config.embeddings;
        match ec.kind {
            EmbeddingKind::Random => {
                let tokens = datasets.iter().flat_map(|d| {
                    d.documents()
                        .iter()
                        .flat_map(|x| x.tokens.iter())
                        .chain(d.queries().iter().flat_map(|q| q.tokens.iter()))
                        .map(String::as_str)
                });
                Ok(EmbeddingTable::random(tokens, ec.dim, seed, ec.trainable))
            }
            EmbeddingKind::Synthetic => {
                let specs = datasets
                    .iter()
                    .map(|d| match &self.config.dataset(d.name())?.source {
                        DatasetSource::Synthetic { spec, .. } => Ok(spec.clone()),
                        _ => Err(Error::Config(format!("`{}` is not synthetic", d.name()))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                synthetic_embeddings(&specs, ec.dim, seed, ec.trainable)
            }
            EmbeddingKind::File => {
                let keep: HashSet<String> = datasets
                    .iter()
                    .flat_map(|d| {
                        d.documents()
                            .iter()
                            .flat_map(|x| x.tokens.iter())
                            .chain(d.queries().iter().flat_map(|q| q.tokens.iter()))
                    })
                    .cloned()
                    .collect();
                let path = self.config.resolve(ec.path.as_deref().expect("validated"));
                let table = EmbeddingTable::load_text(&path, Some(&keep), ec.trainable, seed)?;
                if table.dim() != ec.dim {
                    return Err(Error::Config(format!(
                        "{}: vectors have dim {}, config says {}",
                        path.display(),
                        table.dim(),
                        ec.dim
                    )));
                }
                Ok(table)
            }
        }
    }

    pub fn build_ranker(&self, model: &RankerConfig, datasets: &[&Dataset], seed: u64) -> Result<PreparedRanker> {
        let config = self.config.model_config(model);
        let table = self.build_embeddings(datasets, seed)?;
        let mut h = Sha256::new();
        h.update(format!("{config:?}").as_bytes());
        table.digest_into(&mut |b| h.update(b));
        Ok(PreparedRanker {
            name: config.kind.to_string(),
            hash: hex::encode(h.finalize()),
            ranker: Ranker::new(config, table)?,
        })
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.config.alpha,
            seed,
            ..self.config.train.clone()
        }
    }

    /// Oracle for one dataset, shared across strategies through the
    /// in-memory and on-disk caches.
    pub fn oracle(&self, ctx: &TrainContext<'_>, ranker_hash: &str, dataset_hash: &str, seed: u64) -> Result<OracleModel> {
        let cfg = self.train_config(seed);
        let key = key_hash(&[
            "oracle",
            dataset_hash,
            ranker_hash,
            &format!("{cfg:?}"),
            &format!("{:?}", ctx.bm25_params),
        ]);
        if let Some(o) = self.oracles.borrow().get(&key) {
            return Ok(o.clone());
        }
        let oracle = match self.cache.as_ref().and_then(|c| c.load_oracle(&key)) {
            Some(o) => {
                log::info!("oracle for {} loaded from cache", ctx.dataset.name());
                o
            }
            None => {
                let init = ctx.ranker.init_params(cfg.seed);
                let out = train_model(ctx, &cfg, &init, Strategy::Plain)?;
                let o = OracleModel {
                    params: out.params,
                    dataset: ctx.dataset.name().to_string(),
                    selection_metric: out.log.best_metric,
                    log: out.log,
                };
                if let Some(c) = &self.cache {
                    c.store_oracle(&key, &o)?;
                }
                o
            }
        };
        self.oracles.borrow_mut().insert(key, oracle.clone());
        Ok(oracle)
    }

    fn fisher(&self, ctx: &TrainContext<'_>, params: &ParamVector, ranker_hash: &str, dataset_hash: &str, seed: u64) -> Result<FisherDiagonal> {
        let cfg = self.train_config(seed);
        let key = key_hash(&[
            "fisher",
            dataset_hash,
            ranker_hash,
            &params_hash(params),
            &format!("{cfg:?}"),
            &format!("{:?}", ctx.bm25_params),
            &self.config.fisher_pairs.to_string(),
        ]);
        if let Some(f) = self.fishers.borrow().get(&key) {
            return Ok(f.clone());
        }
        let fisher = match self.cache.as_ref().and_then(|c| c.load_fisher(&key)) {
            Some(f) => f,
            None => {
                let f = estimate_fisher_diagonal(ctx, params, &cfg, self.config.fisher_pairs, seed)?;
                if let Some(c) = &self.cache {
                    c.store_fisher(&key, &f, params, self.config.ewc_lambda)?;
                }
                f
            }
        };
        self.fishers.borrow_mut().insert(key, fisher.clone());
        Ok(fisher)
    }

    /// Runs the protocol on a prepared stream for every strategy. Oracles
    /// are trained once and shared by all strategies.
    pub fn run_stream(
        &self,
        setting: &str,
        stream: &[Rc<PreparedDataset>],
        ranker: &PreparedRanker,
        strategies: &[TransferStrategy],
        seed: u64,
    ) -> Result<Vec<SettingReport>> {
        let n = stream.len();
        if n < 2 {
            return Err(Error::Config(format!("setting `{setting}` needs at least 2 datasets")));
        }
        let metric = self.metric();
        let depth = self.config.eval_depth;
        let cfg = self.train_config(seed);
        let encoded: Vec<_> = stream
            .iter()
            .map(|p| ranker.ranker.encode_dataset(&p.dataset, &p.index))
            .collect();
        let ctxs: Vec<TrainContext<'_>> = stream
            .iter()
            .zip(&encoded)
            .map(|(p, e)| TrainContext {
                ranker: &ranker.ranker,
                dataset: &p.dataset,
                index: &p.index,
                bm25_params: &p.bm25_params,
                encoded: e,
            })
            .collect();
        let base = PathBuf::from(setting).join(&ranker.name).join(format!("seed{seed}"));
        let alphas = [self.config.alpha, 1.0];
        let evaluate = |j: usize, params: &ParamVector, tag: &str| -> Result<[(RankedRun, f64); 2]> {
            let test = &stream[j].dataset.split().test;
            let mut out = alphas.iter().zip(SCORINGS).map(|(&a, (s, _))| {
                evaluate_model(&ctxs[j], params, test, depth, a, metric, &format!("{tag}.{s}")).map(|(r, e)| (r, e.mean))
            });
            Ok([out.next().expect("two")?, out.next().expect("two")?])
        };

        let t0 = Instant::now();
        let mut shared_runs = Vec::new();
        let mut shared_logs = Vec::new();
        let mut matrices = [PerformanceMatrix::new(n, metric.to_string()), PerformanceMatrix::new(n, metric.to_string())];
        let mut oracles = Vec::with_capacity(n);
        for (j, p) in stream.iter().enumerate() {
            let o = self.oracle(&ctxs[j], &ranker.hash, &p.hash, seed)?;
            let name = p.dataset.name();
            for (k, (run, value)) in evaluate(j, &o.params, &format!("{}-oracle-{name}", ranker.name))?.into_iter().enumerate() {
                matrices[k].r_star.insert(j + 1, value);
                matrices[k].bm25_ref.insert(j + 1, p.bm25_test);
                shared_runs.push((base.join("oracle").join(format!("R{0}_{0}.{1}.run", j + 1, SCORINGS[k].0)), run));
            }
            shared_logs.push((base.join(format!("oracle_{name}.csv")), o.log.clone()));
            shared_runs.push((PathBuf::from(setting).join("bm25").join(format!("seed{seed}")).join(format!("{name}.run")), p.bm25_run.clone()));
            oracles.push(o);
        }
        let oracle_seconds = t0.elapsed().as_secs_f64();

        let mut reports = Vec::new();
        for &strategy in strategies {
            let t1 = Instant::now();
            let mut mats = matrices.clone();
            let mut runs = shared_runs.clone();
            let mut logs = shared_logs.clone();
            let mut params = oracles[0].params.clone();
            let mut state = EwcState::new(self.config.ewc_lambda)?;
            if strategy == TransferStrategy::Ewc {
                let f = self.fisher(&ctxs[0], &params, &ranker.hash, &stream[0].hash, seed)?;
                state.push_anchor(params.clone(), f)?;
            }
            for k in 1..n {
                let mode = match strategy {
                    TransferStrategy::Finetune => Strategy::Plain,
                    TransferStrategy::Ewc => Strategy::Ewc(&state),
                };
                let out = train_model(&ctxs[k], &cfg, &params, mode)?;
                params = out.params;
                logs.push((base.join(strategy.to_string()).join(format!("step{}_{}.csv", k + 1, stream[k].dataset.name())), out.log));
                if strategy == TransferStrategy::Ewc && k + 1 < n {
                    let f = self.fisher(&ctxs[k], &params, &ranker.hash, &stream[k].hash, seed)?;
                    state.push_anchor(params.clone(), f)?;
                }
                for j in 0..=k {
                    let tag = format!("{}-{strategy}-R{}_{}", ranker.name, k + 1, j + 1);
                    for (s, (run, value)) in evaluate(j, &params, &tag)?.into_iter().enumerate() {
                        mats[s].r.insert((k + 1, j + 1), value);
                        runs.push((base.join(strategy.to_string()).join(format!("R{}_{}.{}.run", k + 1, j + 1, SCORINGS[s].0)), run));
                    }
                }
            }
            let [m, m_n] = mats;
            let (b, b_n) = (bwt(&m)?, bwt(&m_n)?);
            reports.push(SettingReport {
                setting: setting.to_string(),
                stream: stream.iter().map(|p| p.dataset.name().to_string()).collect(),
                model: ranker.name.clone(),
                strategy,
                seed,
                metric: metric.to_string(),
                bwt: b,
                rem: rem(b),
                bwt_n: b_n,
                remn: rem(b_n),
                pr: pr(&m)?,
                pr_n: pr(&m_n)?,
                delta_map: mean_delta(&m)?,
                delta_map_n: mean_delta(&m_n)?,
                matrix: m,
                matrix_n: m_n,
                runs,
                logs,
                oracle_seconds,
                transfer_seconds: t1.elapsed().as_secs_f64(),
            });
            log::info!(
                "{setting} {} {strategy} seed {seed}: REM {:.4} REMN {:.4} PR {:.4}",
                ranker.name,
                reports.last().expect("pushed").rem,
                reports.last().expect("pushed").remn,
                reports.last().expect("pushed").pr
            );
        }
        Ok(reports)
    }

    /// Runs one configured setting for one model and seed.
    pub fn run_setting(&self, setting: &str, model: &str, strategies: &[TransferStrategy], seed: u64) -> Result<Vec<SettingReport>> {
        let sc = self.config.setting(setting)?;
        let stream = self.prepare_setting(sc, seed)?;
        let datasets: Vec<&Dataset> = stream.iter().map(|p| &p.dataset).collect();
        let ranker = self.build_ranker(&self.config.model(model)?, &datasets, seed)?;
        self.run_stream(&sc.name, &stream, &ranker, strategies, seed)
    }

    /// Every setting × model × seed with the configured strategies. Failed
    /// runs are recorded, not propagated.
    pub fn run_all(&self) -> ExperimentOutcome {
        let mut outcome = ExperimentOutcome::default();
        for s in &self.config.settings {
            for m in &self.config.models {
                for &seed in &self.config.seeds {
                    let model = m.kind.to_string();
                    match self.run_setting(&s.name, &model, &self.config.strategies, seed) {
                        Ok(r) => outcome.reports.extend(r),
                        Err(e) => {
                            log::error!("{} {model} seed {seed} failed: {e}", s.name);
                            for st in &self.config.strategies {
                                outcome.failures.push(Failure {
                                    setting: s.name.clone(),
                                    model: model.clone(),
                                    strategy: st.to_string(),
                                    seed,
                                    error: e.to_string(),
                                });
                            }
                        }
                    }
                }
            }
        }
        outcome
    }

    /// Sub-dataset study: replace the left dataset of the configured
    /// setting by sampled sub-datasets, measure REM per model and regress
    /// it on the sub-dataset characteristics. Sub-datasets are written to
    /// `out_dir/subdatasets/<name>/`.
    pub fn run_rq2(&self, seed: u64) -> Result<Rq2Outcome> {
        let rq2 = self
            .config
            .rq2
            .clone()
            .ok_or_else(|| Error::Config("no [rq2] section in the config".into()))?;
        let sc = self.config.setting(&rq2.setting)?;
        let stream = self.prepare_setting(sc, seed)?;
        let datasets: Vec<&Dataset> = stream.iter().map(|p| &p.dataset).collect();
        let rankers = self
            .config
            .models
            .iter()
            .map(|m| self.build_ranker(m, &datasets, seed))
            .collect::<Result<Vec<_>>>()?;
        let left = &stream[0];
        let mut outcome = Rq2Outcome {
            setting: sc.name.clone(),
            ..Default::default()
        };
        for i in 0..rq2.n_samples {
            let sample_seed = rq2.first_seed.wrapping_add(i as u64);
            let name = format!("{}-s{:03}", left.dataset.name(), i + 1);
            let attempt = || -> Result<(FeatureVector, Vec<(String, f64)>)> {
                let sub = sample_subdataset(
                    &left.dataset,
                    rq2.sample_size(i),
                    &left.index,
                    &left.bm25_params,
                    rq2.depth,
                    sample_seed,
                )?
                .renamed(name.clone());
                write_trec_dataset(&sub, &self.config.out_dir.join("subdatasets").join(&name))?;
                let prepared = Rc::new(self.prepare_owned(sub)?);
                let features = compute_features(
                    &prepared.dataset,
                    &prepared.index,
                    &prepared.bm25_params,
                    self.config.eval_depth,
                )?;
                let mut sub_stream = stream.clone();
                sub_stream[0] = prepared;
                let mut rems = Vec::new();
                for r in &rankers {
                    let reports = self.run_stream(&format!("{}/{name}", sc.name), &sub_stream, r, &[rq2.strategy], seed)?;
                    rems.push((r.name.clone(), reports[0].rem));
                }
                Ok((features, rems))
            };
            match attempt() {
                Ok((features, rems)) => {
                    for (model, rem_value) in rems {
                        outcome.rows.push(RegressionRun {
                            subsetting: name.clone(),
                            dataset: left.dataset.name().to_string(),
                            model,
                            rem: rem_value,
                            features: features.clone(),
                        });
                    }
                    outcome.features.push((name, features));
                }
                Err(e) => {
                    log::warn!("sample {name} failed: {e}");
                    outcome.failures.push((name, e.to_string()));
                }
            }
        }
        if !outcome.failures.is_empty() {
            log::warn!("{} of {} samples failed and are excluded", outcome.failures.len(), rq2.n_samples);
        }
        match build_design(&outcome.rows).and_then(|d| ols_fit(&d).map(|r| (d, r))) {
            Ok((d, r)) => {
                outcome.design = Some(d);
                outcome.report = Some(r);
            }
            Err(e) => outcome.regression_error = Some(e.to_string()),
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Rq2Outcome {
    pub setting: String,
    /// One feature row per successful sample.
    pub features: Vec<(String, FeatureVector)>,
    /// One regression row per (sample, model).
    pub rows: Vec<RegressionRun>,
    pub failures: Vec<(String, String)>,
    pub design: Option<RegressionDesign>,
    pub report: Option<RegressionReport>,
    pub regression_error: Option<String>,
}

/// One line of `summary.csv`. Numbers are absent for failed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub setting: String,
    pub stream: String,
    pub model: String,
    pub strategy: String,
    pub seed: u64,
    pub metric: String,
    pub values: Option<[f64; 8]>,
    pub status: String,
}

pub const SUMMARY_HEADER: &str =
    "setting,stream,model,strategy,seed,metric,bwt,rem,bwt_n,remn,pr,pr_n,delta_map,delta_map_n,status";
const VALUE_NAMES: [&str; 8] = ["BWT", "REM", "BWTn", "REMN", "PR", "PRn", "dMAP%", "dMAPn%"];

impl SummaryRow {
    pub fn from_report(r: &SettingReport) -> Self {
        SummaryRow {
            setting: r.setting.clone(),
            stream: r.stream.join("->"),
            model: r.model.clone(),
            strategy: r.strategy.to_string(),
            seed: r.seed,
            metric: r.metric.clone(),
            values: Some([r.bwt, r.rem, r.bwt_n, r.remn, r.pr, r.pr_n, r.delta_map, r.delta_map_n]),
            status: "ok".into(),
        }
    }

    pub fn from_failure(f: &Failure) -> Self {
        SummaryRow {
            setting: f.setting.clone(),
            stream: String::new(),
            model: f.model.clone(),
            strategy: f.strategy.clone(),
            seed: f.seed,
            metric: String::new(),
            values: None,
            status: format!("failed: {}", f.error.replace([',', '\n'], ";")),
        }
    }

    pub fn to_csv(&self) -> String {
        let values = match &self.values {
            Some(v) => v.iter().map(|x| format!("{x:.10}")).collect::<Vec<_>>().join(","),
            None => [""; 8].join(","),
        };
        format!(
            "{},{},{},{},{},{},{values},{}",
            self.setting, self.stream, self.model, self.strategy, self.seed, self.metric, self.status
        )
    }

    pub fn parse_csv(text: &str, file: &str) -> Result<Vec<SummaryRow>> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        match lines.next() {
            Some((_, h)) if h == SUMMARY_HEADER => {}
            _ => return Err(parse_err(1, "missing summary header".into())),
        }
        lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let c: Vec<&str> = line.splitn(15, ',').collect();
                if c.len() != 15 {
                    return Err(parse_err(i + 1, format!("expected 15 columns, got {}", c.len())));
                }
                let values = if c[6..14].iter().all(|s| s.is_empty()) {
                    None
                } else {
                    let mut v = [0.0; 8];
                    for (slot, s) in v.iter_mut().zip(&c[6..14]) {
                        *slot = s.parse().map_err(|_| parse_err(i + 1, format!("bad number `{s}`")))?;
                    }
                    Some(v)
                };
                Ok(SummaryRow {
                    setting: c[0].into(),
                    stream: c[1].into(),
                    model: c[2].into(),
                    strategy: c[3].into(),
                    seed: c[4].parse().map_err(|_| parse_err(i + 1, "bad seed".into()))?,
                    metric: c[5].into(),
                    values,
                    status: c[14].into(),
                })
            })
            .collect()
    }
}

/// Aligned text rendering of summary rows.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![["Setting", "Model", "Strategy", "Seed"]
        .iter()
        .map(|s| s.to_string())
        .chain(VALUE_NAMES.iter().map(|s| s.to_string()))
        .chain(std::iter::once("Status".to_string()))
        .collect()];
    for r in rows {
        let mut line = vec![r.stream.clone(), r.model.clone(), r.strategy.clone(), r.seed.to_string()];
        if r.stream.is_empty() {
            line[0] = r.setting.clone();
        }
        match &r.values {
            Some(v) => line.extend(v.iter().map(|x| format!("{x:.4}"))),
            None => line.extend(std::iter::repeat_n("-".to_string(), 8)),
        }
        line.push(r.status.clone());
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if (4..12).contains(&c) { format!("{v:>w$}") } else { format!("{v:<w$}") })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// Writes `summary.csv`, `summary.txt`, `matrices.csv`, `timing.csv`, the
/// run files under `runs/` and training logs under `logs/`.
pub fn emit_reports(outcome: &ExperimentOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<SummaryRow> = outcome
        .reports
        .iter()
        .map(SummaryRow::from_report)
        .chain(outcome.failures.iter().map(SummaryRow::from_failure))
        .collect();
    write_file(&out_dir.join("summary.csv"), |w| {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for r in &rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        Ok(())
    })?;
    let text = render_summary(&rows);
    write_file(&out_dir.join("summary.txt"), |w| w.write_all(text.as_bytes()))?;

    write_file(&out_dir.join("matrices.csv"), |w| {
        writeln!(w, "setting,model,strategy,seed,scoring,cell,i,j,value")?;
        for r in &outcome.reports {
            for ((scoring, _), m) in SCORINGS.iter().zip([&r.matrix, &r.matrix_n]) {
                let prefix = format!("{},{},{},{},{scoring}", r.setting, r.model, r.strategy, r.seed);
                for (j, v) in &m.r_star {
                    writeln!(w, "{prefix},oracle,{j},{j},{v:.10}")?;
                }
                for (j, v) in &m.bm25_ref {
                    writeln!(w, "{prefix},bm25,{j},{j},{v:.10}")?;
                }
                for ((i, j), v) in &m.r {
                    writeln!(w, "{prefix},transfer,{i},{j},{v:.10}")?;
                }
            }
        }
        Ok(())
    })?;
    write_file(&out_dir.join("timing.csv"), |w| {
        writeln!(w, "setting,model,strategy,seed,oracle_seconds,transfer_seconds")?;
        for r in &outcome.reports {
            writeln!(
                w,
                "{},{},{},{},{:.3},{:.3}",
                r.setting, r.model, r.strategy, r.seed, r.oracle_seconds, r.transfer_seconds
            )?;
        }
        Ok(())
    })?;

    let runs: BTreeMap<&PathBuf, &RankedRun> = outcome.reports.iter().flat_map(|r| r.runs.iter().map(|(p, x)| (p, x))).collect();
    for (rel, run) in runs {
        write_file(&out_dir.join("runs").join(rel), |w| run.write_trec(w))?;
    }
    let logs: BTreeMap<&PathBuf, &TrainingLog> = outcome.reports.iter().flat_map(|r| r.logs.iter().map(|(p, x)| (p, x))).collect();
    for (rel, log) in logs {
        write_file(&out_dir.join("logs").join(rel), |w| log.write_csv(w))?;
    }
    Ok(())
}

/// Writes `rq2/features.csv`, `rq2/rem.csv`, `rq2/failures.csv` and, when
/// the fit succeeded, `rq2/design.csv`, `rq2/regression.csv` and `rq2/regression.txt`.
pub fn emit_rq2(outcome: &Rq2Outcome, out_dir: &Path) -> Result<()> {
    let dir = out_dir.join("rq2");
    write_file(&dir.join("features.csv"), |w| {
        writeln!(w, "sample,{}", FEATURE_NAMES.join(","))?;
        for (name, f) in &outcome.features {
            let cells: Vec<String> = f.values().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    })?;
    write_file(&dir.join("rem.csv"), |w| {
        writeln!(w, "sample,dataset,model,rem")?;
        for r in &outcome.rows {
            writeln!(w, "{},{},{},{:.10}", r.subsetting, r.dataset, r.model, r.rem)?;
        }
        Ok(())
    })?;
    write_file(&dir.join("failures.csv"), |w| {
        writeln!(w, "sample,error")?;
        for (name, e) in &outcome.failures {
            writeln!(w, "{name},{}", e.replace([',', '\n'], ";"))?;
        }
        Ok(())
    })?;
    if let Some(d) = &outcome.design {
        write_file(&dir.join("design.csv"), |w| d.write_csv(w))?;
    }
    if let Some(r) = &outcome.report {
        write_file(&dir.join("regression.csv"), |w| r.write_csv(w))?;
        let table = r.render_table();
        write_file(&dir.join("regression.txt"), |w| w.write_all(table.as_bytes()))?;
    }
    Ok(())
}

/// Writes the effective configuration next to the reports.
pub fn write_config_echo(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let text = config.to_toml()?;
    write_file(&out_dir.join("config.toml"), |w| w.write_all(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seeds = [1]
            [[datasets]]
            name = "a"
            source = "synthetic"
            [[datasets]]
            name = "b"
            source = "synthetic"
            seed_offset = 7
            [datasets.spec]
            n_docs = 50
            [[settings]]
            name = "ab"
            datasets = ["a", "b"]
            "#,
            "inline",
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.strategies, vec![TransferStrategy::Finetune, TransferStrategy::Ewc]);
        match &cfg.datasets[1].source {
            DatasetSource::Synthetic { seed_offset, spec } => assert_eq!((*seed_offset, spec.n_docs), (7, 50)),
            other => panic!("{other:?}"),
        }
        let echo = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), "echo").unwrap();
        assert_eq!(echo, cfg);

        let mut bad = cfg.clone();
        bad.settings[0].datasets.push("missing".into());
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.strategies.clear();
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 1", "x").is_err());
    }

    #[test]
    fn summary_round_trip() {
        let rows = vec![
            SummaryRow {
                setting: "s".into(),
                stream: "a->b".into(),
                model: "knrm".into(),
                strategy: "ewc".into(),
                seed: 3,
                metric: "map@100".into(),
                values: Some([-0.1, 0.9, 0.0, 1.0, 0.97, 1.01, 12.5, -3.0]),
                status: "ok".into(),
            },
            SummaryRow::from_failure(&Failure {
                setting: "s".into(),
                model: "drmm".into(),
                strategy: "finetune".into(),
                seed: 3,
                error: "boom, twice".into(),
            }),
        ];
        let text = format!("{SUMMARY_HEADER}\n{}\n{}\n", rows[0].to_csv(), rows[1].to_csv());
        assert_eq!(SummaryRow::parse_csv(&text, "x").unwrap(), rows);
        let rendered = render_summary(&rows);
        assert_eq!(rendered.lines().count(), 3);
        assert!(rendered.contains("0.9000"));
    }

    #[test]
    fn empty_report_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&ExperimentOutcome::default(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text, format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainingLog {
            rows: vec![
                LogRow {
                    epoch: 0,
                    mean_loss: None,
                    penalty: None,
                    selection_metric: 0.25,
                },
                LogRow {
                    epoch: 1,
                    mean_loss: Some(0.5),
                    penalty: Some(0.0),
                    selection_metric: 0.375,
                },
            ],
            best_epoch: 0,
            best_metric: 0.0,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let parsed = parse_log_csv(std::str::from_utf8(&buf).unwrap(), Path::new("x")).unwrap();
        assert_eq!(parsed.rows, log.rows);
    }
}
