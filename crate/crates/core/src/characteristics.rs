//! Dataset characteristics and the linear regression explaining forgetting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::index::{search_topk, BM25Index, BM25Params};
use crate::metrics::average_precision;

pub const KL_BINS: usize = 20;
pub const KL_SMOOTHING: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; 9] = ["RS", "RD", "SD", "Vocab", "DL", "QL", "QD", "MAP", "std-AP"];

pub const FEATURE_DESCRIPTIONS: [&str; 9] = [
    "Retrieval space size",
    "Relevance density",
    "Score relevance divergence",
    "Vocabulary size",
    "Average length of documents",
    "Average length of queries",
    "Average query difficulty",
    "Average BM25 effectiveness",
    "Variation of BM25 effectiveness",
];

/// The nine characteristics of one (sub-)dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dataset: String,
    pub rs: f64,
    pub rd: f64,
    pub sd: f64,
    pub vocab: f64,
    pub dl: f64,
    pub ql: f64,
    pub qd: f64,
    pub map: f64,
    pub std_ap: f64,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.rs,
            self.rd,
            self.sd,
            self.vocab,
            self.dl,
            self.ql,
            self.qd,
            self.map,
            self.std_ap,
        ]
    }
}

/// Histogram both score sets on shared equal-width bins over the pooled
/// range and return `KL(P+ || P-)`. Each bin frequency is increased by
/// `smoothing` and the histogram renormalized.
pub fn kl_histograms(pos: &[f64], neg: &[f64], bins: usize, smoothing: f64) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Feature("KL needs scores on both sides".into()));
    }
    if bins == 0 {
        return Err(Error::Feature("KL needs at least one bin".into()));
    }
    let (lo, hi) = pos
        .iter()
        .chain(neg)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let b = if hi > lo {
                (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            h[b] += 1.0;
        }
        let z = xs.len() as f64;
        let total = 1.0 + bins as f64 * smoothing;
        h.iter().map(|c| (c / z + smoothing) / total).collect()
    };
    Ok(kl_divergence(&hist(pos), &hist(neg)))
}

/// `sum_i p_i ln(p_i / q_i)` over bins with `p_i > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// KL between BM25 scores of relevant (grade >= 1) and other documents in
/// the top-`depth` of each listed query, pooled over queries.
pub fn kl_rsv(
    index: &BM25Index,
    params: &BM25Params,
    dataset: &Dataset,
    query_ids: &[String],
    depth: usize,
    bins: usize,
) -> Result<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for id in query_ids {
        let query = dataset
            .query(id)
            .ok_or_else(|| Error::Lookup(format!("unknown query `{id}`")))?;
        for (doc, score) in search_topk(index, params, query, depth) {
            if dataset.grade(id, &doc) >= 1 {
                pos.push(score);
            } else {
                neg.push(score);
            }
        }
    }
    kl_histograms(&pos, &neg, bins, KL_SMOOTHING).map_err(|e| match e {
        Error::Feature(m) => Error::Feature(format!("{}: {m}", dataset.name())),
        other => other,
    })
}

/// Computes the nine characteristics. Size, density, length and difficulty
/// features use every query; MAP, std-AP and SD use the judged test queries.
pub fn compute_features(
    dataset: &Dataset,
    index: &BM25Index,
    params: &BM25Params,
    depth: usize,
) -> Result<FeatureVector> {
    let n_docs = dataset.documents().len() as f64;
    let n_queries = dataset.queries().len() as f64;
    let space = n_docs * n_queries;
    if space == 0.0 {
        return Err(Error::Feature(format!("{}: empty documents or queries", dataset.name())));
    }
    let relevant = dataset.relevant_count();
    if relevant == 0 {
        return Err(Error::Feature(format!(
            "{}: no relevant judgments, relevance density undefined",
            dataset.name()
        )));
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        s / n as f64
    };
    let dl = mean(&mut dataset.documents().iter().map(|d| d.tokens.len() as f64));
    let ql = mean(&mut dataset.queries().iter().map(|q| q.tokens.len() as f64));
    let qd = mean(&mut dataset.queries().iter().map(|q| {
        q.tokens.iter().map(|t| index.idf(t)).sum::<f64>() / q.tokens.len() as f64
    }));

    let judged_test: Vec<String> = dataset
        .split()
        .test
        .iter()
        .filter(|q| dataset.has_relevant(q))
        .cloned()
        .collect();
    if judged_test.is_empty() {
        return Err(Error::Feature(format!("{}: no judged test queries", dataset.name())));
    }
    let aps: Vec<f64> = judged_test
        .iter()
        .map(|id| {
            let query = dataset.query(id).expect("split ids are validated");
            let ranking: Vec<String> = search_topk(index, params, query, depth)
                .into_iter()
                .map(|(d, _)| d)
                .collect();
            average_precision(&ranking, dataset.judgments(id).expect("judged"), depth)
        })
        .collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let std_ap = (aps.iter().map(|a| (a - map).powi(2)).sum::<f64>() / aps.len() as f64).sqrt();

    Ok(FeatureVector {
        dataset: dataset.name().to_string(),
        rs: space.log10(),
        rd: (relevant as f64 / space).log10(),
        sd: kl_rsv(index, params, dataset, &judged_test, depth, KL_BINS)?,
        vocab: index.vocabulary_size() as f64,
        dl,
        ql,
        qd,
        map,
        std_ap,
    })
}

/// One observation of the regression: the forgetting measured for a model
/// on a sub-setting, with the characteristics of its left dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRun {
    pub subsetting: String,
    pub dataset: String,
    pub model: String,
    pub rem: f64,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDesign {
    pub column_names: Vec<String>,
    /// Row-major, intercept first.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub row_labels: Vec<String>,
    pub feature_means: BTreeMap<String, f64>,
    pub reference_dataset: String,
    pub reference_model: String,
    /// Features left out because they are constant across rows.
    pub dropped: Vec<String>,
}

impl RegressionDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    /// Design matrix without centering, dummies or intercept changes: used
    /// to compare against fits on raw characteristics.
    pub fn with_columns(&self, names: &[&str]) -> Result<RegressionDesign> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.column_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Lookup(format!("no design column `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(RegressionDesign {
            column_names: idx.iter().map(|&i| self.column_names[i].clone()).collect(),
            x: self.x.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
            ..self.clone()
        })
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "row,rem,{}", self.column_names.join(","))?;
        for ((label, y), row) in self.row_labels.iter().zip(&self.y).zip(&self.x) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.10}")).collect();
            writeln!(out, "{label},{y:.10},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Intercept, centered characteristics, then one dummy per non-reference
/// dataset and model level (references sort first).
pub fn build_design(runs: &[RegressionRun]) -> Result<RegressionDesign> {
    let distinct: BTreeSet<Vec<u64>> = runs
        .iter()
        .map(|r| r.features.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < 2 {
        return Err(Error::Fit("the design needs at least two distinct feature rows".into()));
    }
    let datasets: Vec<String> = runs.iter().map(|r| r.dataset.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let models: Vec<String> = runs.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();

    let n = runs.len() as f64;
    let mut means = [0.0; 9];
    for r in runs {
        for (m, v) in means.iter_mut().zip(r.features.values()) {
            *m += v / n;
        }
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, name) in FEATURE_NAMES.iter().enumerate() {
        let first = runs[0].features.values()[k];
        if runs.iter().all(|r| r.features.values()[k] == first) {
            log::warn!("characteristic {name} is constant across the design and is left out");
            dropped.push(name.to_string());
        } else {
            kept.push(k);
        }
    }

    let mut column_names = vec!["intercept".to_string()];
    column_names.extend(kept.iter().map(|&k| FEATURE_NAMES[k].to_string()));
    column_names.extend(datasets.iter().skip(1).map(|d| format!("dataset={d}")));
    column_names.extend(models.iter().skip(1).map(|m| format!("model={m}")));

    let x = runs
        .iter()
        .map(|r| {
            let v = r.features.values();
            let mut row = vec![1.0];
            row.extend(kept.iter().map(|&k| v[k] - means[k]));
            row.extend(datasets.iter().skip(1).map(|d| f64::from(u8::from(&r.dataset == d))));
            row.extend(models.iter().skip(1).map(|m| f64::from(u8::from(&r.model == m))));
            row
        })
        .collect();
    Ok(RegressionDesign {
        column_names,
        x,
        y: runs.iter().map(|r| r.rem).collect(),
        row_labels: runs.iter().map(|r| format!("{}|{}", r.subsetting, r.model)).collect(),
        feature_means: FEATURE_NAMES
            .iter()
            .zip(means)
            .map(|(n, m)| (n.to_string(), m))
            .collect(),
        reference_dataset: datasets[0].clone(),
        reference_model: models[0].clone(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t: f64,
    pub p: f64,
    pub stars: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub coefficients: Vec<Coefficient>,
    pub r_squared: f64,
    pub n: usize,
    pub df_resid: usize,
    pub reference_dataset: String,
    pub reference_model: String,
    pub dropped: Vec<String>,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

/// Relative tolerance under which a column is treated as a combination of
/// the preceding ones.
const COLLINEARITY_TOL: f64 = 1e-10;

/// Names of columns that lie in the span of the columns before them.
pub fn collinear_columns(design: &RegressionDesign) -> Vec<String> {
    let (n, p) = (design.n_rows(), design.n_cols());
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..p {
        let mut v: Vec<f64> = (0..n).map(|i| design.x[i][j]).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= COLLINEARITY_TOL * norm0 {
            out.push(design.column_names[j].clone());
        } else {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Ordinary least squares via the normal equations, solved with an LU
/// decomposition with partial pivoting.
pub fn ols_fit(design: &RegressionDesign) -> Result<RegressionReport> {
    let (n, p) = (design.n_rows(), design.n_cols());
    if n <= p {
        return Err(Error::Fit(format!("{n} rows for {p} columns: need more rows than columns")));
    }
    let collinear = collinear_columns(design);
    if !collinear.is_empty() {
        return Err(Error::Fit(format!("rank-deficient design, collinear columns: {}", collinear.join(", "))));
    }
    let x = DMatrix::from_fn(n, p, |i, j| design.x[i][j]);
    let y = DVector::from_column_slice(&design.y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let lu = xtx.lu();
    let beta = lu
        .solve(&xty)
        .ok_or_else(|| Error::Fit("normal equations are singular".into()))?;
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Fit("normal equations are singular".into()))?;
    let resid = &y - &x * &beta;
    let ss_res = resid.norm_squared();
    let y_mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let constant_y = design.y.iter().all(|v| *v == design.y[0]);
    let df = n - p;
    let sigma2 = ss_res / df as f64;
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Fit(e.to_string()))?;
    let coefficients = (0..p)
        .map(|j| {
            let estimate = beta[j];
            let std_error = (sigma2 * inv[(j, j)]).max(0.0).sqrt();
            let (t, pv) = if std_error > 0.0 {
                let t = estimate / std_error;
                (t, (2.0 * t_dist.sf(t.abs())).min(1.0))
            } else if estimate != 0.0 {
                (estimate.signum() * f64::INFINITY, 0.0)
            } else {
                (0.0, 1.0)
            };
            Coefficient {
                name: design.column_names[j].clone(),
                estimate,
                std_error,
                t,
                p: pv,
                stars: significance_stars(pv),
            }
        })
        .collect();
    Ok(RegressionReport {
        coefficients,
        r_squared: if constant_y { 0.0 } else { 1.0 - ss_res / ss_tot },
        n,
        df_resid: df,
        reference_dataset: design.reference_dataset.clone(),
        reference_model: design.reference_model.clone(),
        dropped: design.dropped.clone(),
    })
}

impl RegressionReport {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "term,estimate,std_error,t,p,stars")?;
        for c in &self.coefficients {
            writeln!(
                out,
                "{},{:.10},{:.10},{:.6},{:.6e},{}",
                c.name, c.estimate, c.std_error, c.t, c.p, c.stars
            )?;
        }
        writeln!(out, "# r_squared,{:.10}", self.r_squared)?;
        writeln!(out, "# n,{}", self.n)?;
        writeln!(out, "# df_resid,{}", self.df_resid)?;
        Ok(())
    }

    /// Aligned text table: characteristic, description, coefficient, stars.
    pub fn render_table(&self) -> String {
        let description = |name: &str| -> String {
            if let Some(i) = FEATURE_NAMES.iter().position(|n| *n == name) {
                FEATURE_DESCRIPTIONS[i].to_string()
            } else if let Some(d) = name.strip_prefix("dataset=") {
                format!("Dataset {d} (vs {})", self.reference_dataset)
            } else if let Some(m) = name.strip_prefix("model=") {
                format!("Model {m} (vs {})", self.reference_model)
            } else {
                "Intercept".to_string()
            }
        };
        let rows: Vec<(String, String, String, &str)> = self
            .coefficients
            .iter()
            .map(|c| (c.name.clone(), description(&c.name), format!("{:.4}", c.estimate), c.stars))
            .collect();
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Characteristic".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("Description".len());
        let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0).max("Coef".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<w0$}  {:<w1$}  {:>w2$}  Sig", "Characteristic", "Description", "Coef");
        for (name, desc, coef, stars) in &rows {
            let _ = writeln!(s, "{name:<w0$}  {desc:<w1$}  {coef:>w2$}  {stars}");
        }
        let _ = writeln!(s, "R2 = {:.3}, n = {}, residual df = {}", self.r_squared, self.n, self.df_resid);
        let _ = writeln!(s, "Significance: ***: p<=0.001, **: p<=0.01, *: p<=0.05");
        if !self.dropped.is_empty() {
            let _ = writeln!(s, "Constant characteristics left out: {}", self.dropped.join(", "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, QrelEntry, Query, Split};
    use crate::index::build_index;

    fn features(name: &str, v: [f64; 9]) -> FeatureVector {
        FeatureVector {
            dataset: name.into(),
            rs: v[0],
            rd: v[1],
            sd: v[2],
            vocab: v[3],
            dl: v[4],
            ql: v[5],
            qd: v[6],
            map: v[7],
            std_ap: v[8],
        }
    }

    fn toy(n_docs: usize, n_queries: usize, all_relevant: bool) -> Dataset {
        let docs = (0..n_docs)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                tokens: vec!["x".into(), format!("t{i}")],
            })
            .collect();
        let queries: Vec<Query> = (0..n_queries)
            .map(|i| Query {
                query_id: format!("q{i}"),
                tokens: vec!["x".into(), format!("t{i}")],
            })
            .collect();
        let mut qrels = Vec::new();
        for q in 0..n_queries {
            for d in 0..n_docs {
                if all_relevant || d == q {
                    qrels.push(QrelEntry {
                        query_id: format!("q{q}"),
                        doc_id: format!("d{d}"),
                        grade: 1,
                    });
                }
            }
        }
        let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
        let split = Split {
            train: ids[..1].to_vec(),
            test: ids[1..].to_vec(),
        };
        Dataset::new("toy", docs, queries, qrels, split).unwrap()
    }

    #[test]
    fn size_and_density() {
        let ds = toy(10, 5, false);
        let idx = build_index(&ds).unwrap();
        let f = compute_features(&ds, &idx, &BM25Params::default(), 100).unwrap();
        assert!((f.rs - 50f64.log10()).abs() < 1e-12);
        assert!((f.rd - (5.0f64 / 50.0).log10()).abs() < 1e-12);
        assert_eq!((f.vocab, f.dl, f.ql), (11.0, 2.0, 2.0));
        assert!(f.sd >= 0.0);
    }

    #[test]
    fn full_density_is_zero() {
        let ds = toy(3, 3, true);
        let idx = build_index(&ds).unwrap();
        let err = compute_features(&ds, &idx, &BM25Params::default(), 100);
        // every retrieved document is relevant, so D- is empty
        assert!(matches!(err, Err(Error::Feature(_))));
        let rd = (ds.relevant_count() as f64 / 9.0).log10();
        assert_eq!(rd, 0.0);
    }

    #[test]
    fn kl_cases() {
        let xs = [0.1, 0.5, 0.9, 0.3];
        assert!(kl_histograms(&xs, &xs, 20, KL_SMOOTHING).unwrap().abs() < 1e-12);
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.25, 0.25, 0.25, 0.25];
        let hand = 0.1 * (0.4f64).ln() + 0.2 * (0.8f64).ln() + 0.3 * (1.2f64).ln() + 0.4 * (1.6f64).ln();
        assert!((kl_divergence(&p, &q) - hand).abs() < 1e-15);
        assert!(kl_divergence(&q, &p) != kl_divergence(&p, &q));
        assert!(matches!(kl_histograms(&[], &xs, 20, 1e-6), Err(Error::Feature(_))));
    }

    fn runs_for(y: impl Fn(&[f64; 9], usize) -> f64) -> Vec<RegressionRun> {
        (0..12)
            .map(|i| {
                let x = i as f64;
                let v = [x, (x * 0.7).sin(), x * x / 10.0, 5.0, (x * 1.3).cos(), 3.0, x.sqrt(), 0.2, 0.1];
                let model = if i % 2 == 0 { "knrm" } else { "drmm" };
                RegressionRun {
                    subsetting: format!("s{i}"),
                    dataset: "ms".into(),
                    model: model.into(),
                    rem: y(&v, i),
                    features: features("ms", v),
                }
            })
            .collect()
    }

    #[test]
    fn design_centering_and_dummies() {
        let d = build_design(&runs_for(|v, _| v[0])).unwrap();
        assert_eq!(d.reference_model, "drmm");
        assert!(d.column_names.contains(&"model=knrm".to_string()));
        assert_eq!(d.column_names.iter().filter(|c| c.starts_with("model=")).count(), 1);
        assert!(d.column_names.iter().all(|c| !c.starts_with("dataset=")));
        for j in 1..d.n_cols() - 1 {
            let s: f64 = d.x.iter().map(|r| r[j]).sum();
            assert!(s.abs() < 1e-10, "{} sums to {s}", d.column_names[j]);
        }
        assert_eq!(d.dropped, vec!["Vocab", "QL", "MAP", "std-AP"]);
    }

    #[test]
    fn exact_fit() {
        let d = build_design(&runs_for(|v, _| 2.0 * v[0] + 1.0)).unwrap();
        let d = d.with_columns(&["intercept", "RS"]).unwrap();
        let r = ols_fit(&d).unwrap();
        assert!((r.coefficient("RS").unwrap().estimate - 2.0).abs() < 1e-10);
        // centered: the intercept is the mean of y
        assert!((r.coefficient("intercept").unwrap().estimate - 12.0).abs() < 1e-10);
        assert!((r.r_squared - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_response() {
        let d = build_design(&runs_for(|_, _| 0.7)).unwrap();
        let r = ols_fit(&d).unwrap();
        for c in &r.coefficients[1..] {
            assert!(c.estimate.abs() < 1e-9, "{} = {}", c.name, c.estimate);
        }
        assert_eq!(r.r_squared, 0.0);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let mut d = build_design(&runs_for(|v, i| v[0] + i as f64 * 0.01)).unwrap();
        d.column_names.push("RS_copy".into());
        for row in &mut d.x {
            let rs = row[1];
            row.push(2.0 * rs);
        }
        let err = ols_fit(&d).unwrap_err().to_string();
        assert!(err.contains("RS_copy"), "{err}");
        let small = d.with_columns(&["intercept", "RS"]).unwrap();
        let tiny = RegressionDesign {
            x: small.x[..2].to_vec(),
            y: small.y[..2].to_vec(),
            ..small
        };
        assert!(matches!(ols_fit(&tiny), Err(Error::Fit(_))));
    }

    #[test]
    fn stars() {
        assert_eq!(significance_stars(0.001), "***");
        assert_eq!(significance_stars(0.0011), "**");
        assert_eq!(significance_stars(0.01), "**");
        assert_eq!(significance_stars(0.05), "*");
        assert_eq!(significance_stars(0.051), "");
    }
}
