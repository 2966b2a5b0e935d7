//! Pairwise hinge-loss training with Adam and validation-based model selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tape, Var};
use crate::corpus::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::index::{BM25Index, BM25Params, PairPool, PoolPair, PreRanked};
use crate::lifelong::{ewc_penalty_grad, EwcState};
use crate::metrics::{evaluate_run, MetricId, RankedRun, RunEvaluation};
use crate::rankers::{check_alpha, rerank_candidates, EncodedDataset, Ranker};

const VALIDATION_STREAM: u64 = 0x7661_6c69;
const EPOCH_STREAM: u64 = 0x6570_6f63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub selection_metric: String,
    /// Share of training queries held out for model selection.
    pub validation_fraction: f64,
    /// BM25 pre-ranking depth for pairs and re-ranking.
    pub rerank_depth: usize,
    /// Interpolation weight of the trained score.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batches_per_epoch: 32,
            pairs_per_batch: 16,
            learning_rate: 0.001,
            early_stop_patience: 10,
            selection_metric: "p@20".into(),
            validation_fraction: 0.2,
            rerank_depth: 100,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.pairs_per_batch == 0 {
            return Err(Error::Config("batches_per_epoch and pairs_per_batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.rerank_depth == 0 {
            return Err(Error::Config("rerank_depth must be at least 1".into()));
        }
        check_alpha(self.alpha)?;
        self.selection_metric.parse::<MetricId>()?;
        Ok(())
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut ParamVector, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let dim = params.total_dim();
    if grads.len() != dim || state.m.len() != dim || state.v.len() != dim {
        return Err(Error::Contract(format!(
            "Adam dimensions differ: params {dim}, grads {}, state {}",
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let theta = params.values_mut();
    for i in 0..dim {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `max(0, 1 - s_pos + s_neg)`.
pub fn hinge_loss<'t>(s_pos: Var<'t>, s_neg: Var<'t>) -> Result<Var<'t>> {
    Ok(s_neg.sub(s_pos)?.add_const(1.0).relu())
}

#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    Plain,
    Ewc(&'a EwcState),
}

/// Everything needed to score and train on one dataset.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub ranker: &'a Ranker,
    pub dataset: &'a Dataset,
    pub index: &'a BM25Index,
    pub bm25_params: &'a BM25Params,
    pub encoded: &'a EncodedDataset,
}

/// Hinge loss of one pool pair on the interpolated score, and its sparse gradient.
pub fn pair_gradient(
    ctx: &TrainContext<'_>,
    params: &ParamVector,
    pre: &PreRanked,
    pair: &PoolPair,
    alpha: f64,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let tape = Tape::new();
    let mut binding = ctx.ranker.bind(&tape, params)?;
    let query = ctx.encoded.query(&pre.query_id)?;
    let mut global = |rank: usize| -> Result<Var<'_>> {
        let doc = ctx.encoded.doc(&pre.doc_ids[rank])?;
        let s = ctx.ranker.score(&mut binding, params, query, doc)?;
        Ok(s.mul_const(alpha).add_const((1.0 - alpha) * pre.bm25_norm[rank]))
    };
    let s_pos = global(pair.positive)?;
    let s_neg = global(pair.negative)?;
    let loss = hinge_loss(s_pos, s_neg)?;
    tape.backward(loss)?;
    Ok((loss.item(), binding.sparse_grad(ctx.ranker.embeddings().dim())))
}

/// Splits training queries into fitting and validation sets. With fewer
/// than two queries or a zero fraction, all queries serve both roles.
pub fn selection_split(train: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids = train.to_vec();
    ids.sort();
    if ids.len() < 2 || fraction <= 0.0 {
        return (ids.clone(), ids);
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut val = ids[..n_val].to_vec();
    let mut fit = ids[n_val..].to_vec();
    val.sort();
    fit.sort();
    (fit, val)
}

/// Re-ranks each pre-ranked candidate list; queries run in parallel.
pub fn rerank_pool(
    ctx: &TrainContext<'_>,
    params: &ParamVector,
    pool: &[PreRanked],
    alpha: f64,
    tag: &str,
) -> Result<RankedRun> {
    let rankings: Vec<(String, Vec<(String, f64)>)> = pool
        .par_iter()
        .map(|pre| {
            rerank_candidates(ctx.ranker, params, ctx.encoded, &pre.query_id, &pre.doc_ids, &pre.bm25_norm, alpha)
                .map(|r| (pre.query_id.clone(), r))
        })
        .collect::<Result<_>>()?;
    let mut run = RankedRun::new(tag);
    for (q, r) in rankings {
        run.insert(q, r);
    }
    Ok(run)
}

/// Re-ranks `query_ids` and evaluates the run against the dataset's qrels.
pub fn evaluate_model(
    ctx: &TrainContext<'_>,
    params: &ParamVector,
    query_ids: &[String],
    depth: usize,
    alpha: f64,
    metric: MetricId,
    tag: &str,
) -> Result<(RankedRun, RunEvaluation)> {
    let pool = PairPool::new(ctx.dataset, ctx.index, ctx.bm25_params, depth, query_ids)?;
    let run = rerank_pool(ctx, params, pool.queries(), alpha, tag)?;
    let eval = evaluate_run(&run, ctx.dataset.judgment_map(), Some(query_ids), metric);
    Ok((run, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub selection_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl TrainingLog {
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "epoch,mean_loss,penalty,selection_metric")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.10}",
                r.epoch,
                opt(r.mean_loss),
                opt(r.penalty),
                r.selection_metric
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub log: TrainingLog,
}

/// Trains from `init` and returns the snapshot with the best validation
/// metric. The initial parameters (epoch 0) are a selection candidate.
pub fn train_model(
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    init: &ParamVector,
    strategy: Strategy<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            params: init.clone(),
            log: TrainingLog::default(),
        });
    }
    let metric: MetricId = cfg.selection_metric.parse()?;
    let (fit_ids, val_ids) = selection_split(
        &ctx.dataset.split().train,
        cfg.validation_fraction,
        derive_seed(cfg.seed, VALIDATION_STREAM),
    );
    let pool = PairPool::new(ctx.dataset, ctx.index, ctx.bm25_params, cfg.rerank_depth, &fit_ids)?;
    let val_pool = PairPool::new(ctx.dataset, ctx.index, ctx.bm25_params, cfg.rerank_depth, &val_ids)?;
    let evaluate = |p: &ParamVector| -> Result<f64> {
        let run = rerank_pool(ctx, p, val_pool.queries(), cfg.alpha, "selection")?;
        Ok(evaluate_run(&run, ctx.dataset.judgment_map(), Some(&val_ids), metric).mean)
    };

    let mut params = init.clone();
    let mut adam = AdamState::new(params.total_dim());
    let mut best = params.clone();
    let mut log = TrainingLog {
        rows: Vec::new(),
        best_epoch: 0,
        best_metric: evaluate(&params)?,
    };
    log.rows.push(LogRow {
        epoch: 0,
        mean_loss: None,
        penalty: None,
        selection_metric: log.best_metric,
    });
    let mut stale = 0usize;
    let mut grad = vec![0.0; params.total_dim()];
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive_seed(cfg.seed, EPOCH_STREAM.wrapping_add(epoch as u64));
        let mut pairs = pool.sample(epoch_seed);
        if pairs.is_empty() {
            return Err(Error::Training(format!(
                "dataset `{}` yields no training pairs",
                ctx.dataset.name()
            )));
        }
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut loss_sum, mut penalty_sum) = (0.0, 0.0);
        for b in 0..cfg.batches_per_epoch {
            let batch: Vec<PoolPair> = (0..cfg.pairs_per_batch)
                .map(|i| pairs[(b * cfg.pairs_per_batch + i) % pairs.len()])
                .collect();
            let results: Vec<(f64, Vec<(usize, f64)>)> = batch
                .par_iter()
                .map(|pair| pair_gradient(ctx, &params, &pool.queries()[pair.query], pair, cfg.alpha))
                .collect::<Result<_>>()?;
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for (loss, g) in &results {
                loss_sum += loss * scale;
                for &(i, v) in g {
                    grad[i] += v * scale;
                }
            }
            if let Strategy::Ewc(state) = strategy {
                let (penalty, pg) = ewc_penalty_grad(&params, state)?;
                penalty_sum += penalty;
                for (g, p) in grad.iter_mut().zip(pg) {
                    *g += p;
                }
            }
            adam_step(&mut params, &grad, &mut adam, cfg.learning_rate)?;
        }
        let value = evaluate(&params)?;
        let n = cfg.batches_per_epoch as f64;
        log.rows.push(LogRow {
            epoch,
            mean_loss: Some(loss_sum / n),
            penalty: Some(penalty_sum / n),
            selection_metric: value,
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.4} {} {value:.4}",
            ctx.dataset.name(),
            loss_sum / n,
            cfg.selection_metric
        );
        if value > log.best_metric {
            log.best_metric = value;
            log.best_epoch = epoch;
            best.values_mut().copy_from_slice(params.values());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { params: best, log })
}

/// A model trained and selected on a single dataset.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub params: ParamVector,
    pub dataset: String,
    pub selection_metric: f64,
    pub log: TrainingLog,
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train_oracle(ctx: &TrainContext<'_>, cfg: &TrainConfig) -> Result<OracleModel> {
    let init = ctx.ranker.init_params(cfg.seed);
    let out = train_model(ctx, cfg, &init, Strategy::Plain)?;
    Ok(OracleModel {
        params: out.params,
        dataset: ctx.dataset.name().to_string(),
        selection_metric: out.log.best_metric,
        log: out.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn hinge_cases() {
        let tape = Tape::new();
        let h = |p: f64, n: f64| hinge_loss(tape.scalar(p), tape.scalar(n)).unwrap().item();
        assert_eq!(h(1.0, 0.0), 0.0);
        assert_eq!(h(0.3, 0.3), 1.0);
        assert!((h(-0.2, 0.3) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn hinge_gradient_vanishes_beyond_margin() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(2.0));
        let n = tape.leaf(Tensor::scalar(0.5));
        tape.backward(hinge_loss(p, n).unwrap()).unwrap();
        assert_eq!((p.grad().item(), n.grad().item()), (0.0, 0.0));
    }

    fn scalar_params(x: f64) -> ParamVector {
        let mut p = ParamVector::new();
        p.push("x", vec![1], vec![x]).unwrap();
        p
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = scalar_params(0.7);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 0.001).unwrap();
        assert_eq!(p.values(), &[0.7]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[-3.0], &mut s, 0.001).unwrap();
        assert!((p.values()[0] - 1.001).abs() < 1e-10);
        assert!(matches!(adam_step(&mut p, &[1.0, 2.0], &mut s, 0.001), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(1);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = 2.0 * p.values()[0];
            adam_step(&mut p, &[g], &mut s, 0.1).unwrap();
            let go = 2.0 * th;
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.values()[0] - th).abs() < 1e-12);
            assert!(th.abs() < prev);
            prev = th.abs();
        }
    }

    #[test]
    fn selection_split_is_disjoint_and_seeded() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let (fit, val) = selection_split(&ids, 0.2, 5);
        assert_eq!((fit.len(), val.len()), (8, 2));
        assert!(val.iter().all(|v| !fit.contains(v)));
        assert_eq!(selection_split(&ids, 0.2, 5), (fit, val));
        let one = vec!["q".to_string()];
        assert_eq!(selection_split(&one, 0.2, 0), (one.clone(), one));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            selection_metric: "mrr".into(),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha: 2.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
