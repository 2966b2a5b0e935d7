use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use forgetbench::corpus::write_trec_dataset;
use forgetbench::lifelong::TransferStrategy;
use forgetbench::metrics::{evaluate_run, parse_qrels, MetricId, RankedRun};
use forgetbench::pipeline::{
    emit_reports, emit_rq2, render_summary, write_config_echo, ExperimentConfig, ExperimentOutcome, Failure,
    Pipeline, SummaryRow,
};
use forgetbench::training::{evaluate_model, TrainContext};

/// Catastrophic-forgetting benchmark for neural re-rankers.
#[derive(Debug, Parser)]
#[command(name = "forgetbench", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run with this seed only, instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the BM25 index of a dataset, tune (k1, b) and write its BM25 test run.
    Index {
        #[arg(long)]
        dataset: String,
        /// Also write the dataset in TREC layout.
        #[arg(long)]
        export: bool,
    },
    /// Train and evaluate the oracle model of one dataset.
    TrainOracle {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "knrm")]
        model: String,
    },
    /// Run transfer experiments; every configured setting and model unless narrowed.
    RunSetting {
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Strategies to run (finetune, ewc); defaults to the config.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<TransferStrategy>,
    },
    /// Sub-dataset study and regression of REM on dataset characteristics.
    RunRq2,
    /// Evaluate a TREC run file against qrels.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Measures, e.g. map@100,p@20,ndcg@20.
        #[arg(long, value_delimiter = ',', default_value = "map@100,p@20,ndcg@20")]
        metric: Vec<String>,
        /// Print one line per query as well.
        #[arg(long)]
        per_query: bool,
        /// Score judged queries missing from the run as 0 instead of skipping them.
        #[arg(long)]
        complete: bool,
    },
    /// Re-render the aligned summary from a summary CSV.
    Report {
        /// Defaults to `<out>/summary.csv`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else {
        bail!("this command needs --config <path>");
    };
    let mut cfg = ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if cli.config.is_some() {
        return Ok(load_config(cli)?.out_dir);
    }
    Ok(PathBuf::from("out"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn index(cli: &Cli, dataset: &str, export: bool) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    for &seed in &cfg.seeds {
        let p = pipeline.prepare(dataset, seed)?;
        let dir = cfg.out_dir.join("index").join(dataset).join(format!("seed{seed}"));
        let mut run = Vec::new();
        p.bm25_run.write_trec(&mut run)?;
        write_text(&dir.join("bm25.run"), &String::from_utf8(run)?)?;
        let stats = format!(
            "dataset,{dataset}\nseed,{seed}\ndocuments,{}\nvocabulary,{}\navg_doc_len,{:.4}\nk1,{}\nb,{}\nbm25_{},{:.6}\nhash,{}\n",
            p.index.n_docs(),
            p.index.vocabulary_size(),
            p.index.avg_doc_len(),
            p.bm25_params.k1,
            p.bm25_params.b,
            cfg.metric,
            p.bm25_test,
            p.hash
        );
        write_text(&dir.join("stats.csv"), &stats)?;
        if export {
            write_trec_dataset(&p.dataset, &dir.join("trec"))?;
        }
        println!(
            "{dataset} seed {seed}: {} docs, {} terms, k1={} b={}, BM25 {} on test = {:.4}",
            p.index.n_docs(),
            p.index.vocabulary_size(),
            p.bm25_params.k1,
            p.bm25_params.b,
            cfg.metric,
            p.bm25_test
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train_oracle(cli: &Cli, dataset: &str, model: &str) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let metric: MetricId = cfg.metric.parse()?;
    for &seed in &cfg.seeds {
        let p = pipeline.prepare(dataset, seed)?;
        let ranker = pipeline.build_ranker(&cfg.model(model)?, &[&p.dataset], seed)?;
        let encoded = ranker.ranker.encode_dataset(&p.dataset, &p.index);
        let ctx = TrainContext {
            ranker: &ranker.ranker,
            dataset: &p.dataset,
            index: &p.index,
            bm25_params: &p.bm25_params,
            encoded: &encoded,
        };
        let oracle = pipeline.oracle(&ctx, &ranker.hash, &p.hash, seed)?;
        let dir = cfg.out_dir.join("oracles").join(format!("{}_{dataset}", ranker.name)).join(format!("seed{seed}"));
        let meta = BTreeMap::from([
            ("dataset".to_string(), dataset.to_string()),
            ("model".to_string(), ranker.name.clone()),
            ("seed".to_string(), seed.to_string()),
            ("best_epoch".to_string(), oracle.log.best_epoch.to_string()),
        ]);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        oracle.params.save(&dir.join("model.params"), &meta)?;
        let mut log = Vec::new();
        oracle.log.write_csv(&mut log)?;
        write_text(&dir.join("log.csv"), &String::from_utf8(log)?)?;
        let test = &p.dataset.split().test;
        let mut line = format!(
            "{} on {dataset} seed {seed}: best epoch {}, validation {} {:.4}",
            ranker.name, oracle.log.best_epoch, cfg.train.selection_metric, oracle.selection_metric
        );
        for (alpha, tag) in [(cfg.alpha, "combined"), (1.0, "neural")] {
            let (run, eval) = evaluate_model(&ctx, &oracle.params, test, cfg.eval_depth, alpha, metric, tag)?;
            let mut text = Vec::new();
            run.write_trec(&mut text)?;
            write_text(&dir.join(format!("test.{tag}.run")), &String::from_utf8(text)?)?;
            line.push_str(&format!(", test {metric} ({tag}) {:.4}", eval.mean));
        }
        println!("{line}, BM25 {:.4}", p.bm25_test);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_setting(
    cli: &Cli,
    setting: Option<&str>,
    model: Option<&str>,
    strategies: &[TransferStrategy],
) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if !strategies.is_empty() {
        cfg.strategies = strategies.to_vec();
    }
    if let Some(s) = setting {
        let chosen = cfg.setting(s)?.clone();
        cfg.settings = vec![chosen];
    }
    if let Some(m) = model {
        let chosen = cfg.model(m)?;
        cfg.models.retain(|c| c.kind == chosen.kind);
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    let outcome: ExperimentOutcome = pipeline.run_all();
    emit_reports(&outcome, &cfg.out_dir)?;
    write_config_echo(&cfg, &cfg.out_dir)?;
    let rows: Vec<SummaryRow> = outcome
        .reports
        .iter()
        .map(SummaryRow::from_report)
        .chain(outcome.failures.iter().map(SummaryRow::from_failure))
        .collect();
    print!("{}", render_summary(&rows));
    report_failures(&outcome.failures);
    Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report_failures(failures: &[Failure]) {
    for f in failures {
        eprintln!("failed: {} {} {} seed {}: {}", f.setting, f.model, f.strategy, f.seed, f.error);
    }
}

fn run_rq2(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let seed = cfg.seeds[0];
    let outcome = pipeline.run_rq2(seed)?;
    emit_rq2(&outcome, &cfg.out_dir)?;
    write_config_echo(&cfg, &cfg.out_dir)?;
    println!(
        "{}: {} samples with features, {} regression rows, {} failed",
        outcome.setting,
        outcome.features.len(),
        outcome.rows.len(),
        outcome.failures.len()
    );
    if let Some(report) = &outcome.report {
        print!("{}", report.render_table());
    }
    for (sample, error) in &outcome.failures {
        eprintln!("failed sample {sample}: {error}");
    }
    if let Some(e) = &outcome.regression_error {
        eprintln!("regression failed: {e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn metrics(run: &Path, qrels: &Path, measures: &[String], per_query: bool, complete: bool) -> Result<ExitCode> {
    let run_text = fs::read_to_string(run).with_context(|| format!("reading {}", run.display()))?;
    let qrels_text = fs::read_to_string(qrels).with_context(|| format!("reading {}", qrels.display()))?;
    let run = RankedRun::parse_trec(&run_text, &run.display().to_string())?;
    let qrels = parse_qrels(&qrels_text, &qrels.display().to_string())?;
    let ran: Vec<String> = run.rankings.keys().cloned().collect();
    let scope = if complete { None } else { Some(ran.as_slice()) };
    let mut out = std::io::stdout().lock();
    for m in measures {
        let metric: MetricId = m.parse()?;
        let eval = evaluate_run(&run, &qrels, scope, metric);
        if per_query {
            for (q, v) in &eval.per_query {
                writeln!(out, "{metric}\t{q}\t{v:.6}")?;
            }
        }
        writeln!(out, "{metric}\tall\t{:.6}", eval.mean)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report(cli: &Cli, summary: Option<&Path>) -> Result<ExitCode> {
    let path = match summary {
        Some(p) => p.to_path_buf(),
        None => out_dir(cli)?.join("summary.csv"),
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = SummaryRow::parse_csv(&text, &path.display().to_string())?;
    let rendered = render_summary(&rows);
    write_text(&path.with_file_name("summary.txt"), &rendered)?;
    print!("{rendered}");
    let failed = rows.iter().filter(|r| r.values.is_none()).count();
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Index { dataset, export } => index(cli, dataset, *export),
        Command::TrainOracle { dataset, model } => train_oracle(cli, dataset, model),
        Command::RunSetting { setting, model, strategy } => {
            run_setting(cli, setting.as_deref(), model.as_deref(), strategy)
        }
        Command::RunRq2 => run_rq2(cli),
        Command::Metrics { run, qrels, metric, per_query, complete } => {
            metrics(run, qrels, metric, *per_query, *complete)
        }
        Command::Report { summary } => report(cli, summary.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
