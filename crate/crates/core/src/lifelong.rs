//! Transfer across a dataset stream: fine-tuning and EWC with a diagonal
//! empirical Fisher.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::index::PairPool;
use crate::training::{pair_gradient, train_model, Strategy, TrainConfig, TrainContext, TrainOutcome};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_FISHER_PAIRS: usize = 512;

/// Per-coordinate importance weights aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub dataset: String,
    pub n_samples: usize,
}

impl FisherDiagonal {
    /// Mean of squared per-sample gradients given as sparse `(index, value)` lists.
    pub fn from_gradients<I>(grads: I, dim: usize, dataset: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[(usize, f64)]>,
    {
        let mut values = vec![0.0; dim];
        let mut n = 0usize;
        for g in grads {
            for &(i, v) in g.as_ref() {
                let slot = values
                    .get_mut(i)
                    .ok_or_else(|| Error::Contract(format!("gradient index {i} outside dimension {dim}")))?;
                *slot += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Estimation("no gradient samples".into()));
        }
        for v in &mut values {
            *v /= n as f64;
        }
        Ok(FisherDiagonal {
            values,
            dataset: dataset.into(),
            n_samples: n,
        })
    }

    /// Stores the values in the layout of `like`, with dataset and sample count as metadata.
    pub fn save(&self, path: &Path, like: &ParamVector, lambda: f64) -> Result<()> {
        let pv = like.with_values(self.values.clone())?;
        let meta = BTreeMap::from([
            ("kind".to_string(), "fisher".to_string()),
            ("dataset".to_string(), self.dataset.clone()),
            ("n_samples".to_string(), self.n_samples.to_string()),
            ("lambda".to_string(), lambda.to_string()),
        ]);
        pv.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (pv, meta) = ParamVector::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("{}: missing `{k}` metadata", path.display())))
        };
        let n_samples = field("n_samples")?
            .parse()
            .map_err(|_| Error::Validation(format!("{}: bad n_samples", path.display())))?;
        Ok(FisherDiagonal {
            values: pv.values().to_vec(),
            dataset: field("dataset")?,
            n_samples,
        })
    }
}

/// Snapshot and importance weights of one previously learned dataset.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub params: ParamVector,
    pub fisher: FisherDiagonal,
}

#[derive(Debug, Clone)]
pub struct EwcState {
    pub lambda: f64,
    /// In stream order.
    pub anchors: Vec<Anchor>,
}

impl EwcState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("EWC lambda must be a nonnegative real, got {lambda}")));
        }
        Ok(EwcState {
            lambda,
            anchors: Vec::new(),
        })
    }

    pub fn push_anchor(&mut self, params: ParamVector, fisher: FisherDiagonal) -> Result<()> {
        if fisher.values.len() != params.total_dim() {
            return Err(Error::Contract(format!(
                "Fisher dimension {} differs from parameter dimension {}",
                fisher.values.len(),
                params.total_dim()
            )));
        }
        self.anchors.push(Anchor { params, fisher });
        Ok(())
    }
}

/// `sum_i sum_j (lambda / 2) F_ij (theta_j - theta^i_j)^2` on the tape; `theta` is a 1 x D row.
pub fn ewc_penalty<'t>(theta: Var<'t>, state: &EwcState) -> Result<Var<'t>> {
    let tape = theta.tape();
    let dim = theta.shape().1;
    let mut total = tape.scalar(0.0);
    for a in &state.anchors {
        if a.params.total_dim() != dim || a.fisher.values.len() != dim || theta.shape().0 != 1 {
            return Err(Error::Contract(format!(
                "anchor dimension {} does not match parameters {dim}",
                a.params.total_dim()
            )));
        }
        let anchor = tape.constant(Tensor::row(a.params.values().to_vec()));
        let fisher = tape.constant(Tensor::row(a.fisher.values.clone()));
        let term = theta
            .sub(anchor)?
            .square()
            .mul(fisher)?
            .sum()
            .mul_const(state.lambda / 2.0);
        total = total.add(term)?;
    }
    Ok(total)
}

/// Penalty value and its dense gradient at `params`.
pub fn ewc_penalty_grad(params: &ParamVector, state: &EwcState) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let theta = tape.leaf(Tensor::row(params.values().to_vec()));
    let p = ewc_penalty(theta, state)?;
    tape.backward(p)?;
    Ok((p.item(), theta.grad().into_data()))
}

pub fn ewc_penalty_value(params: &ParamVector, state: &EwcState) -> Result<f64> {
    let tape = Tape::new();
    let theta = tape.constant(Tensor::row(params.values().to_vec()));
    Ok(ewc_penalty(theta, state)?.item())
}

/// Empirical diagonal Fisher: mean squared hinge-loss gradient over
/// `n_pairs` pairs drawn with replacement from the training split.
pub fn estimate_fisher_diagonal(
    ctx: &TrainContext<'_>,
    params: &ParamVector,
    cfg: &TrainConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<FisherDiagonal> {
    if n_pairs == 0 {
        return Err(Error::Estimation("n_pairs must be at least 1".into()));
    }
    let pool = PairPool::new(ctx.dataset, ctx.index, ctx.bm25_params, cfg.rerank_depth, &ctx.dataset.split().train)?;
    let candidates = pool.sample(seed);
    if candidates.is_empty() {
        return Err(Error::Estimation(format!(
            "dataset `{}` yields no training pairs",
            ctx.dataset.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17));
    let draws: Vec<_> = (0..n_pairs)
        .map(|_| candidates[rng.gen_range(0..candidates.len())])
        .collect();
    let grads: Vec<Vec<(usize, f64)>> = draws
        .par_iter()
        .map(|p| pair_gradient(ctx, params, &pool.queries()[p.query], p, cfg.alpha).map(|(_, g)| g))
        .collect::<Result<_>>()?;
    FisherDiagonal::from_gradients(&grads, params.total_dim(), ctx.dataset.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStrategy {
    Finetune,
    Ewc,
}

impl std::fmt::Display for TransferStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransferStrategy::Finetune => "finetune",
            TransferStrategy::Ewc => "ewc",
        })
    }
}

impl std::str::FromStr for TransferStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(TransferStrategy::Finetune),
            "ewc" => Ok(TransferStrategy::Ewc),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Trains on the next dataset starting from `init`. For EWC the returned
/// state gains an anchor for the new dataset.
pub fn transfer(
    strategy: TransferStrategy,
    ctx: &TrainContext<'_>,
    init: &ParamVector,
    state: EwcState,
    cfg: &TrainConfig,
    fisher_pairs: usize,
    fisher_seed: u64,
) -> Result<(TrainOutcome, EwcState)> {
    match strategy {
        TransferStrategy::Finetune => Ok((train_model(ctx, cfg, init, Strategy::Plain)?, state)),
        TransferStrategy::Ewc => {
            let out = train_model(ctx, cfg, init, Strategy::Ewc(&state))?;
            let fisher = estimate_fisher_diagonal(ctx, &out.params, cfg, fisher_pairs, fisher_seed)?;
            let mut state = state;
            state.push_anchor(out.params.clone(), fisher)?;
            Ok((out, state))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[f64]) -> ParamVector {
        let mut p = ParamVector::new();
        p.push("theta", vec![values.len()], values.to_vec()).unwrap();
        p
    }

    fn state(lambda: f64, anchors: &[(&[f64], &[f64])]) -> EwcState {
        let mut s = EwcState::new(lambda).unwrap();
        for (a, f) in anchors {
            s.push_anchor(
                pv(a),
                FisherDiagonal {
                    values: f.to_vec(),
                    dataset: "d".into(),
                    n_samples: 1,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn penalty_closed_forms() {
        let s = state(0.5, &[(&[0.0], &[2.0])]);
        assert_eq!(ewc_penalty_value(&pv(&[1.0]), &s).unwrap(), 0.5);
        assert_eq!(ewc_penalty_value(&pv(&[0.0]), &s).unwrap(), 0.0);
        let empty = EwcState::new(0.5).unwrap();
        assert_eq!(ewc_penalty_value(&pv(&[3.0]), &empty).unwrap(), 0.0);
    }

    #[test]
    fn penalty_is_additive_over_anchors() {
        let a: (&[f64], &[f64]) = (&[0.1, -0.2], &[1.0, 3.0]);
        let b: (&[f64], &[f64]) = (&[0.5, 0.0], &[0.2, 0.7]);
        let theta = pv(&[0.3, 0.4]);
        let both = ewc_penalty_value(&theta, &state(0.5, &[a, b])).unwrap();
        let sep = ewc_penalty_value(&theta, &state(0.5, &[a])).unwrap()
            + ewc_penalty_value(&theta, &state(0.5, &[b])).unwrap();
        assert!((both - sep).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_closed_form() {
        let s = state(0.5, &[(&[1.0, 2.0], &[2.0, 4.0])]);
        let (value, g) = ewc_penalty_grad(&pv(&[2.0, 2.0]), &s).unwrap();
        assert_eq!(value, 0.5);
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let s = state(0.5, &[(&[0.0], &[2.0])]);
        assert!(matches!(ewc_penalty_value(&pv(&[1.0, 2.0]), &s), Err(Error::Contract(_))));
        let mut s = EwcState::new(0.5).unwrap();
        let f = FisherDiagonal {
            values: vec![1.0],
            dataset: "d".into(),
            n_samples: 1,
        };
        assert!(s.push_anchor(pv(&[1.0, 2.0]), f).is_err());
        assert!(EwcState::new(-1.0).is_err());
    }

    #[test]
    fn fisher_from_single_gradient() {
        let f = FisherDiagonal::from_gradients([vec![(0, 3.0)]], 2, "d").unwrap();
        assert_eq!(f.values, vec![9.0, 0.0]);
        let none: Vec<Vec<(usize, f64)>> = vec![];
        assert!(matches!(
            FisherDiagonal::from_gradients(none, 2, "d"),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn fisher_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = FisherDiagonal {
            values: vec![0.25, 4.0],
            dataset: "ms".into(),
            n_samples: 512,
        };
        f.save(&path, &pv(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(FisherDiagonal::load(&path).unwrap(), f);
    }

    #[test]
    fn strategy_names() {
        assert_eq!("ewc".parse::<TransferStrategy>().unwrap(), TransferStrategy::Ewc);
        assert_eq!(TransferStrategy::Finetune.to_string(), "finetune");
        assert!("replay".parse::<TransferStrategy>().is_err());
    }
}
