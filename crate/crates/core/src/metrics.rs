//! IR effectiveness metrics (AP, P@k, NDCG@k), TREC run/qrels I/O and the
//! forgetting measures computed from a [`PerformanceMatrix`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Judgments of one query: doc_id -> grade.
pub type Judgments = BTreeMap<String, u32>;

/// Judgments of a whole collection: query_id -> doc_id -> grade.
pub type Qrels = BTreeMap<String, Judgments>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricId {
    Map(usize),
    Precision(usize),
    Ndcg(usize),
}

impl MetricId {
    pub const MAP_100: MetricId = MetricId::Map(100);
    pub const P_20: MetricId = MetricId::Precision(20);
    pub const NDCG_20: MetricId = MetricId::Ndcg(20);

    pub fn evaluate(&self, ranking: &[String], judged: &Judgments) -> f64 {
        match *self {
            MetricId::Map(c) => average_precision(ranking, judged, c),
            MetricId::Precision(k) => precision_at_k(ranking, judged, k),
            MetricId::Ndcg(k) => ndcg_at_k(ranking, judged, k),
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricId::Map(c) => write!(f, "map@{c}"),
            MetricId::Precision(k) => write!(f, "p@{k}"),
            MetricId::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let unknown = || Error::Config(format!("unknown metric `{s}` (expected map@N, p@N or ndcg@N)"));
        let (name, cutoff) = lower.split_once('@').ok_or_else(unknown)?;
        let cutoff: usize = cutoff.parse().map_err(|_| unknown())?;
        if cutoff == 0 {
            return Err(unknown());
        }
        match name {
            "map" | "ap" => Ok(MetricId::Map(cutoff)),
            "p" | "precision" => Ok(MetricId::Precision(cutoff)),
            "ndcg" => Ok(MetricId::Ndcg(cutoff)),
            _ => Err(unknown()),
        }
    }
}

fn is_relevant(judged: &Judgments, doc: &str) -> bool {
    judged.get(doc).is_some_and(|&g| g >= 1)
}

/// Average precision within `cutoff`, normalized by
/// `min(#relevant, cutoff)`. Zero when nothing relevant is judged.
pub fn average_precision(ranking: &[String], judged: &Judgments, cutoff: usize) -> f64 {
    let n_relevant = judged.values().filter(|&&g| g >= 1).count();
    if n_relevant == 0 || cutoff == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, doc) in ranking.iter().take(cutoff).enumerate() {
        if is_relevant(judged, doc) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / n_relevant.min(cutoff) as f64
}

pub fn precision_at_k(ranking: &[String], judged: &Judgments, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|d| is_relevant(judged, d)).count();
    hits as f64 / k as f64
}

/// NDCG with gain `2^grade - 1` and `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranking: &[String], judged: &Judgments, k: usize) -> f64 {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// A ranked run: per query, documents in descending score order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    pub tag: String,
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new(tag: impl Into<String>) -> Self {
        RankedRun {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query_id: impl Into<String>, ranking: Vec<(String, f64)>) {
        self.rankings.insert(query_id.into(), ranking);
    }

    pub fn doc_ids(&self, query_id: &str) -> Vec<String> {
        self.rankings
            .get(query_id)
            .map(|r| r.iter().map(|(d, _)| d.clone()).collect())
            .unwrap_or_default()
    }

    pub fn write_trec(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for (q, ranking) in &self.rankings {
            crate::index::write_trec_run_lines(out, q, ranking, &self.tag)?;
        }
        Ok(())
    }

    /// Parses `query_id Q0 doc_id rank score tag` lines. Documents are
    /// re-sorted by descending score, rank breaking ties.
    pub fn parse_trec(text: &str, file: &str) -> Result<Self> {
        let mut run = RankedRun::default();
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err("expected `query_id Q0 doc_id rank score tag`"));
            }
            let rank: usize = f[3].parse().map_err(|_| err("bad rank"))?;
            let score: f64 = f[4].parse().map_err(|_| err("bad score"))?;
            run.tag = f[5].to_string();
            let entries = rows.entry(f[0].to_string()).or_default();
            if entries.iter().any(|(_, d, _)| d == f[2]) {
                return Err(err("duplicate document for query"));
            }
            entries.push((rank, f[2].to_string(), score));
        }
        for (q, mut entries) in rows {
            entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            run.insert(q, entries.into_iter().map(|(_, d, s)| (d, s)).collect());
        }
        Ok(run)
    }
}

/// Parses four-column qrels text.
pub fn parse_qrels(text: &str, file: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: crate::corpus::QrelEntry = line.parse().map_err(|message| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            message,
        })?;
        qrels.entry(e.query_id).or_default().insert(e.doc_id, e.grade);
    }
    Ok(qrels)
}

/// Per-query metric values and their mean over the evaluated queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub metric: MetricId,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Evaluates `run` on `query_ids` (or every judged query when `None`).
/// Queries without a relevant judgment are skipped; a query missing from
/// the run scores 0.
pub fn evaluate_run(run: &RankedRun, qrels: &Qrels, query_ids: Option<&[String]>, metric: MetricId) -> RunEvaluation {
    let ids: Vec<String> = match query_ids {
        Some(ids) => ids.to_vec(),
        None => qrels.keys().cloned().collect(),
    };
    let mut per_query = BTreeMap::new();
    for q in ids {
        let Some(judged) = qrels.get(&q) else { continue };
        if !judged.values().any(|&g| g >= 1) {
            continue;
        }
        let value = metric.evaluate(&run.doc_ids(&q), judged);
        per_query.insert(q, value);
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    RunEvaluation {
        metric,
        per_query,
        mean,
    }
}

/// Measured cells of a transfer experiment over `n` datasets (1-based).
///
/// `r[(i, j)]` is the performance on `D_j` of the model obtained after
/// learning `D_i`; `r_star[j]` the oracle of `D_j`; `bm25_ref[j]` BM25 on
/// `D_j`'s test split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerformanceMatrix {
    pub n: usize,
    pub r: BTreeMap<(usize, usize), f64>,
    pub r_star: BTreeMap<usize, f64>,
    pub bm25_ref: BTreeMap<usize, f64>,
    pub metric: String,
}

impl PerformanceMatrix {
    pub fn new(n: usize, metric: impl Into<String>) -> Self {
        PerformanceMatrix {
            n,
            metric: metric.into(),
            ..Default::default()
        }
    }

    fn cell(&self, i: usize, j: usize) -> Result<f64> {
        self.r
            .get(&(i, j))
            .copied()
            .ok_or_else(|| Error::Contract(format!("performance cell R[{i},{j}] missing")))
    }

    fn oracle(&self, j: usize) -> Result<f64> {
        self.r_star
            .get(&j)
            .copied()
            .ok_or_else(|| Error::Contract(format!("oracle cell R*[{j},{j}] missing")))
    }
}

/// Backward transfer: mean over `i > j` of `(R[i,j] - R*[j,j]) / bm25[j]`.
pub fn bwt(m: &PerformanceMatrix) -> Result<f64> {
    if m.n < 2 {
        return Err(Error::Contract(format!("BWT needs n >= 2, got {}", m.n)));
    }
    let mut total = 0.0;
    for i in 2..=m.n {
        for j in 1..i {
            let reference = m
                .bm25_ref
                .get(&j)
                .copied()
                .ok_or_else(|| Error::Contract(format!("BM25 reference for D{j} missing")))?;
            if reference == 0.0 {
                return Err(Error::Contract(format!("BM25 reference for D{j} is zero")));
            }
            total += (m.cell(i, j)? - m.oracle(j)?) / reference;
        }
    }
    Ok(total / (m.n * (m.n - 1) / 2) as f64)
}

/// Remembering: `1 - |min(bwt, 0)|`.
pub fn rem(bwt_value: f64) -> f64 {
    1.0 - bwt_value.min(0.0).abs()
}

/// Performance ratio: mean over `i >= 2` of `R[i,i] / R*[i,i]`.
pub fn pr(m: &PerformanceMatrix) -> Result<f64> {
    if m.n < 2 {
        return Err(Error::Contract(format!("PR needs n >= 2, got {}", m.n)));
    }
    let mut total = 0.0;
    for i in 2..=m.n {
        let oracle = m.oracle(i)?;
        if oracle == 0.0 {
            return Err(Error::Contract(format!("oracle performance R*[{i},{i}] is zero")));
        }
        total += m.cell(i, i)? / oracle;
    }
    Ok(total / (m.n - 1) as f64)
}

/// Relative improvement over BM25, in percent.
pub fn delta_map(model_perf: f64, bm25_perf: f64) -> Result<f64> {
    if bm25_perf == 0.0 {
        return Err(Error::Contract("BM25 reference performance is zero".into()));
    }
    Ok(100.0 * (model_perf - bm25_perf) / bm25_perf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(pairs: &[(&str, u32)]) -> Judgments {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn ranking(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ap_closed_form() {
        let j = judged(&[("a", 1), ("c", 1)]);
        let ap = average_precision(&ranking(&["a", "b", "c"]), &j, 100);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&ranking(&["b", "d"]), &j, 100), 0.0);
    }

    #[test]
    fn precision_and_ndcg_edges() {
        let j = judged(&[("a", 2), ("b", 1), ("c", 0)]);
        assert_eq!(precision_at_k(&ranking(&["a", "b"]), &j, 2), 1.0);
        assert!((ndcg_at_k(&ranking(&["a", "b", "c"]), &j, 20) - 1.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ranking(&["a"]), &judged(&[("a", 0)]), 20), 0.0);
    }

    #[test]
    fn metric_ids_parse() {
        assert_eq!("MAP@100".parse::<MetricId>().unwrap(), MetricId::MAP_100);
        assert_eq!("p@20".parse::<MetricId>().unwrap(), MetricId::P_20);
        assert_eq!("ndcg@20".parse::<MetricId>().unwrap().to_string(), "ndcg@20");
        assert!("err@20".parse::<MetricId>().is_err());
        assert!("map".parse::<MetricId>().is_err());
    }

    #[test]
    fn run_round_trip_and_evaluation() {
        let mut run = RankedRun::new("tag");
        run.insert("q1", vec![("a".into(), 2.0), ("b".into(), 1.0)]);
        run.insert("q2", vec![("c".into(), 0.5)]);
        let mut buf = Vec::new();
        run.write_trec(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("q1 Q0 a 1 2 tag\n"));
        assert_eq!(RankedRun::parse_trec(&text, "x").unwrap(), run);

        let qrels = parse_qrels("q1 0 b 1\nq2 0 c 0\nq3 0 z 1\n", "q").unwrap();
        let eval = evaluate_run(&run, &qrels, None, MetricId::MAP_100);
        // q2 has no relevant docs and is skipped; q3 is missing from the run
        assert_eq!(eval.per_query.len(), 2);
        assert!((eval.mean - 0.25).abs() < 1e-15);
    }

    fn matrix2(r21: f64, r1: f64, r22: f64, r2: f64, b1: f64) -> PerformanceMatrix {
        let mut m = PerformanceMatrix::new(2, "map@100");
        m.r.insert((2, 1), r21);
        m.r.insert((2, 2), r22);
        m.r_star.insert(1, r1);
        m.r_star.insert(2, r2);
        m.bm25_ref.insert(1, b1);
        m.bm25_ref.insert(2, 0.3);
        m
    }

    #[test]
    fn bwt_rem_pr_two_datasets() {
        let m = matrix2(0.25, 0.30, 0.48, 0.50, 0.20);
        let b = bwt(&m).unwrap();
        assert!((b + 0.25).abs() < 1e-12);
        assert!((rem(b) - 0.75).abs() < 1e-12);
        assert!((pr(&m).unwrap() - 0.96).abs() < 1e-12);
        let same = matrix2(0.3, 0.3, 0.5, 0.5, 0.2);
        assert_eq!(bwt(&same).unwrap(), 0.0);
        assert_eq!(pr(&same).unwrap(), 1.0);
    }

    #[test]
    fn rem_values() {
        assert_eq!(rem(0.3), 1.0);
        assert_eq!(rem(0.0), 1.0);
        assert!((rem(-0.25) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn missing_cells_and_zero_references() {
        let mut m = matrix2(0.25, 0.30, 0.48, 0.50, 0.20);
        m.r.remove(&(2, 1));
        assert!(matches!(bwt(&m), Err(Error::Contract(_))));
        let mut m = matrix2(0.25, 0.30, 0.48, 0.50, 0.0);
        assert!(bwt(&m).is_err());
        m.r_star.insert(2, 0.0);
        assert!(pr(&m).is_err());
        assert!(delta_map(0.3, 0.0).is_err());
    }

    #[test]
    fn delta_map_percent() {
        assert_eq!(delta_map(0.3, 0.3).unwrap(), 0.0);
        assert!((delta_map(0.36, 0.30).unwrap() - 20.0).abs() < 1e-12);
        assert!((delta_map(0.15, 0.30).unwrap() + 50.0).abs() < 1e-12);
    }
}
