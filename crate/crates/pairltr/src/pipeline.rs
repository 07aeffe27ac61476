//! Experiment orchestration: simulate → EM → train → evaluate, with
//! persisted artifacts, content hashes, and run comparison.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bias::BiasParams;
use crate::config::{Normalizer, RunConfig};
use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::letor::{parse_letor, split_queries, Dataset};
use crate::metrics::{evaluate, EvalReport};
use crate::mlp::{MlpSpec, Ranker};
use crate::simulate::{simulate_dataset, write_sessions, Session};
use crate::train::{train, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const SESSIONS_FILE: &str = "sessions.tsv";
pub const BIAS_FILE: &str = "bias.tsv";
pub const EM_TRACE_FILE: &str = "em_trace.tsv";
pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const NORMALIZER_FILE: &str = "normalizer.tsv";
pub const FAILED_MARKER: &str = "FAILED";
const LOCK_FILE: &str = "LOCK";

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn split_hash(dataset: &Dataset) -> String {
    let mut joined = String::new();
    for q in &dataset.queries {
        joined.push_str(&q.qid);
        joined.push('\n');
    }
    sha256_hex(joined.as_bytes())
}

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| {
                Error::config(format!(
                    "run directory {} is locked by another process",
                    dir.display()
                ))
            })?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Execute the full pipeline into `out_dir`. Every artifact is listed in the
/// manifest with its content hash; a failure leaves partial outputs plus a
/// FAILED marker describing the stage that broke.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let _lock = RunLock::acquire(out_dir)?;
    match run_stages(cfg, out_dir) {
        Ok(report) => Ok(RunArtifacts {
            dir: out_dir.to_path_buf(),
            report,
        }),
        Err(e) => {
            let _ = fs::write(out_dir.join(FAILED_MARKER), format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_stages(cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    let mode = cfg.mode;
    let mut artifacts: Vec<String> = Vec::new();
    let mut write_artifact = |name: &str, bytes: &[u8]| -> Result<()> {
        fs::write(out_dir.join(name), bytes)?;
        artifacts.push(format!("{name} = {}", sha256_hex(bytes)));
        Ok(())
    };

    let config_text = cfg.serialize();
    write_artifact(CONFIG_FILE, config_text.as_bytes())?;

    // load + split
    let data_path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::config("data.path is required"))
        .map_err(|e| e.in_stage("load"))?;
    let file = fs::File::open(data_path).map_err(|e| Error::from(e).in_stage("load"))?;
    let dataset = parse_letor(BufReader::new(file), None).map_err(|e| e.in_stage("load"))?;
    let (mut train_set, mut valid_set, mut test_set) =
        split_queries(&dataset, cfg.split, cfg.split_seed).map_err(|e| e.in_stage("split"))?;
    if cfg.normalize {
        let norm = Normalizer::fit(&train_set).map_err(|e| e.in_stage("normalize"))?;
        for split in [&mut train_set, &mut valid_set, &mut test_set] {
            norm.apply(split);
        }
        let mut buf = Vec::new();
        norm.write(&mut buf).map_err(|e| e.in_stage("normalize"))?;
        write_artifact(NORMALIZER_FILE, &buf)?;
    }

    // simulate
    let sessions =
        simulate_dataset(&train_set, &cfg.sim, mode).map_err(|e| e.in_stage("simulate"))?;
    let mut buf = Vec::new();
    write_sessions(&sessions, &mut buf).map_err(|e| e.in_stage("simulate"))?;
    write_artifact(SESSIONS_FILE, &buf)?;

    // EM + training
    let spec = MlpSpec::new(dataset.feature_dim, cfg.hidden.clone(), cfg.model_seed);
    let ranker = Ranker::init(spec).map_err(|e| e.in_stage("em"))?;
    let init = BiasParams::init_default(cfg.sim.list_size).map_err(|e| e.in_stage("em"))?;
    let (params, ranker, trace, report_model) = if cfg.em_interleaved {
        interleaved_fit(cfg, &sessions, &train_set, &valid_set, &init, &ranker, mode)?
    } else {
        let (params, ranker, trace) = run_em(&sessions, &train_set, &init, &ranker, &cfg.em, mode)
            .map_err(|e| e.in_stage("em"))?;
        let (model, _) = train(
            &ranker,
            &sessions,
            &train_set,
            Some(&valid_set),
            &params,
            &cfg.train,
            mode,
        )
        .map_err(|e| e.in_stage("train"))?;
        (params, ranker, trace, model)
    };
    let _ = ranker;
    let mut buf = Vec::new();
    params.write_table(&mut buf).map_err(|e| e.in_stage("em"))?;
    write_artifact(BIAS_FILE, &buf)?;
    let mut buf = Vec::new();
    trace.write(&mut buf).map_err(|e| e.in_stage("em"))?;
    write_artifact(EM_TRACE_FILE, &buf)?;
    let mut buf = Vec::new();
    report_model
        .save(&mut buf)
        .map_err(|e| e.in_stage("train"))?;
    write_artifact(MODEL_FILE, &buf)?;

    // evaluate
    let report = evaluate(&report_model, &test_set, &cfg.eval_cutoffs, mode)
        .map_err(|e| e.in_stage("evaluate"))?;
    let mut buf = Vec::new();
    report.write(&mut buf).map_err(|e| e.in_stage("evaluate"))?;
    write_artifact(METRICS_FILE, &buf)?;

    // manifest
    let mut manifest = String::new();
    let _ = writeln!(manifest, "config_hash = {}", sha256_hex(config_text.as_bytes()));
    let _ = writeln!(manifest, "split_hash.train = {}", split_hash(&train_set));
    let _ = writeln!(manifest, "split_hash.valid = {}", split_hash(&valid_set));
    let _ = writeln!(manifest, "split_hash.test = {}", split_hash(&test_set));
    let _ = writeln!(manifest, "seed.split = {}", cfg.split_seed);
    let _ = writeln!(manifest, "seed.sim = {}", cfg.sim.seed);
    let _ = writeln!(manifest, "seed.em = {}", cfg.em.seed);
    let _ = writeln!(manifest, "seed.train = {}", cfg.train.seed);
    let _ = writeln!(manifest, "seed.model = {}", cfg.model_seed);
    for line in &artifacts {
        let _ = writeln!(manifest, "artifact.{line}");
    }
    fs::write(out_dir.join(MANIFEST_FILE), manifest)?;
    Ok(report)
}

/// Alternate one EM epoch and one training epoch for the configured number of
/// training epochs; experimental mode.
fn interleaved_fit(
    cfg: &RunConfig,
    sessions: &[Session],
    train_set: &Dataset,
    valid_set: &Dataset,
    init: &BiasParams,
    ranker: &Ranker,
    mode: crate::par::ExecMode,
) -> Result<(BiasParams, Ranker, crate::em::EmTrace, Ranker)> {
    let mut params = init.clone();
    let mut model = ranker.clone();
    let mut trace = crate::em::EmTrace::default();
    for round in 0..cfg.train.epochs.max(1) {
        let em_cfg = EmConfig {
            epochs: 1,
            seed: cfg.em.seed.wrapping_add(round as u64),
            ..cfg.em.clone()
        };
        let (p, r, t) = run_em(sessions, train_set, &params, &model, &em_cfg, mode)
            .map_err(|e| e.in_stage("em"))?;
        params = p;
        model = r;
        trace.rows.extend(t.rows);
        trace.epoch_loglik.extend(t.epoch_loglik);
        let train_cfg = TrainConfig {
            epochs: 1,
            seed: cfg.train.seed.wrapping_add(round as u64),
            ..cfg.train.clone()
        };
        let (m, _) = train(
            &model,
            sessions,
            train_set,
            None,
            &params,
            &train_cfg,
            mode,
        )
        .map_err(|e| e.in_stage("train"))?;
        model = m;
    }
    let _ = valid_set;
    Ok((params.clone(), model.clone(), trace, model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub n_runs: usize,
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator); zero for a single run.
    pub std: f64,
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(out)
}

fn lookup<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Aggregate one metric across run directories, grouped by loss variant.
/// Runs evaluated on different test splits are refused.
pub fn compare_runs(run_dirs: &[PathBuf], metric: &str, cutoff: usize) -> Result<Vec<ComparisonRow>> {
    if run_dirs.len() < 2 {
        return Err(Error::validation("need at least 2 runs to compare"));
    }
    let mut test_hash: Option<String> = None;
    let mut by_method: Vec<(String, Vec<f64>)> = Vec::new();
    for dir in run_dirs {
        let manifest = read_kv(&dir.join(MANIFEST_FILE))
            .map_err(|_| Error::validation(format!("{} has no manifest", dir.display())))?;
        let hash = lookup(&manifest, "split_hash.test")
            .ok_or_else(|| Error::validation("manifest missing test split hash"))?
            .to_string();
        match &test_hash {
            None => test_hash = Some(hash),
            Some(h) if *h == hash => {}
            Some(_) => {
                return Err(Error::validation(format!(
                    "{} was evaluated on a different test split",
                    dir.display()
                )))
            }
        }
        let config = read_kv(&dir.join(CONFIG_FILE))?;
        let method = lookup(&config, "train.loss")
            .ok_or_else(|| Error::validation("config missing train.loss"))?
            .to_string();
        let metrics_text = fs::read_to_string(dir.join(METRICS_FILE))?;
        let mut value = None;
        for line in metrics_text.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() == 3 && fields[0] == metric && fields[1] == cutoff.to_string() {
                value = Some(fields[2].parse::<f64>().map_err(|_| {
                    Error::validation(format!("bad metric value in {}", dir.display()))
                })?);
            }
        }
        let value = value.ok_or_else(|| {
            Error::validation(format!("{metric}@{cutoff} not found in {}", dir.display()))
        })?;
        match by_method.iter_mut().find(|(m, _)| *m == method) {
            Some((_, vs)) => vs.push(value),
            None => by_method.push((method, vec![value])),
        }
    }
    Ok(by_method
        .into_iter()
        .map(|(method, vs)| {
            let n = vs.len();
            let mean = vs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            ComparisonRow {
                method,
                n_runs: n,
                mean,
                std,
            }
        })
        .collect())
}

/// Human-readable comparison table.
pub fn format_comparison(rows: &[ComparisonRow], metric: &str, cutoff: usize) -> String {
    let mut s = format!("method\tn\t{metric}@{cutoff} mean\tstd\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.5}\t{:.5}", r.method, r.n_runs, r.mean, r.std);
    }
    s
}
