#![allow(dead_code)]

use std::path::PathBuf;

use forgetbench::corpus::{Document, QrelEntry, Query, Split, Dataset};
use forgetbench::pipeline::ExperimentConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped desk-scale forgetting config.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_file(&repo_root().join("configs/desk.toml")).expect("configs/desk.toml parses")
}

/// The desk config shrunk for quick end-to-end runs.
pub fn small_config(out: PathBuf) -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.out_dir = out;
    cfg.cache = false;
    cfg.seeds = vec![7];
    cfg.train.max_epochs = 2;
    cfg.train.batches_per_epoch = 4;
    cfg.fisher_pairs = 32;
    for d in &mut cfg.datasets {
        if let forgetbench::pipeline::DatasetSource::Synthetic { spec, .. } = &mut d.source {
            spec.n_docs = 300;
            spec.n_queries = 20;
            spec.vocab_size = 800;
            spec.relevance_density = 0.02;
            spec.distractors_per_query = spec.distractors_per_query.min(5);
        }
    }
    cfg
}

/// Random documents over a small vocabulary `t0..t{vocab}`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n_docs: usize, n_queries: usize, vocab: usize) -> Dataset {
    let word = |rng: &mut ChaCha8Rng| format!("t{}", rng.gen_range(0..vocab));
    let documents: Vec<Document> = (0..n_docs)
        .map(|i| Document {
            doc_id: format!("d{i:02}"),
            tokens: (0..rng.gen_range(1..12)).map(|_| word(rng)).collect(),
        })
        .collect();
    let queries: Vec<Query> = (0..n_queries)
        .map(|i| Query {
            query_id: format!("q{i}"),
            tokens: (0..rng.gen_range(1..4)).map(|_| word(rng)).collect(),
        })
        .collect();
    let mut qrels = Vec::new();
    for q in &queries {
        for d in &documents {
            if rng.gen_bool(0.2) {
                qrels.push(QrelEntry {
                    query_id: q.query_id.clone(),
                    doc_id: d.doc_id.clone(),
                    grade: rng.gen_range(0..3),
                });
            }
        }
    }
    let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
    let cut = (ids.len() / 2).max(1);
    let split = Split {
        train: ids[..cut].to_vec(),
        test: ids[cut..].to_vec(),
    };
    Dataset::new("random", documents, queries, qrels, split).expect("valid random dataset")
}
