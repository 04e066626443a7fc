use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use m2snet::checkpoint::Checkpoint;
use m2snet::data::{self, DatasetSplit, EncodedQuestion, IdfTable, QAInstance};
use m2snet::embeddings::{self, EmbeddingTable};
use m2snet::eval::{self, EvalReport};
use m2snet::graph::BackwardFault;
use m2snet::trainer::{self, EpochRecord};
use m2snet::{gradcheck, MatchNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::Failure;

pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn split_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "split".into())
}

fn load_split(path: &Path) -> Result<DatasetSplit, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("data file not found: {}", path.display())));
    }
    Ok(data::parse_split(path, &split_name(path))?)
}

fn encode(model: &MatchNet, split: &DatasetSplit, idf: &IdfTable) -> Vec<EncodedQuestion> {
    let cfg = &model.config;
    data::encode_split(split, &model.params.embeddings, idf, cfg.question_len, cfg.answer_len)
}

fn report_json(report: &EvalReport) -> serde_json::Value {
    json!({
        "questions": report.questions(),
        "map": report.map,
        "mrr": report.mrr,
        "excluded": report.excluded.len(),
        "tied": report.tied.len(),
    })
}

fn write_evaluation(model: &MatchNet, questions: &[EncodedQuestion], run_id: &str, dir: &Path) -> Result<EvalReport, Failure> {
    let (run, report) = trainer::evaluate_questions(model, questions, run_id)?;
    eval::emit_run_file(&run, dir.join(format!("{run_id}.run")))?;
    eval::emit_qrels_file(&run, dir.join(format!("{run_id}.qrels")))?;
    write_file(&dir.join(format!("{run_id}.report")), &format!("{}\n{}", report.to_key_values(), report.to_table()))?;
    Ok(report)
}

pub fn train(config_path: &Path, output: &Path, overrides: TrainOverrides) -> Result<(), Failure> {
    let started = now();
    let text = fs::read_to_string(config_path).map_err(|e| io_failure(config_path, e))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let mut cfg = RunConfig::parse(&text, base)?;
    if let Some(v) = overrides.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = overrides.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = overrides.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = overrides.patience {
        cfg.train.patience = v;
    }
    cfg.train.validate()?;
    let net_cfg = cfg.net_config()?;

    let train_split = load_split(&cfg.data.train)?;
    let dev_split = data::filter_degenerate(&load_split(&cfg.data.dev)?);
    let test_split = match &cfg.data.test {
        Some(p) => Some(data::filter_degenerate(&load_split(p)?)),
        None => None,
    };

    let mut vocab: HashSet<String> = train_split.vocabulary();
    vocab.extend(dev_split.vocabulary());
    if let Some(t) = &test_split {
        vocab.extend(t.vocabulary());
    }
    let table = match &cfg.data.embeddings {
        Some(p) => embeddings::load_embeddings_filtered(p, cfg.data.embedding_dim, Some(&vocab))?,
        None => {
            let mut words: Vec<String> = vocab.into_iter().collect();
            words.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(trainer::mix_seed(cfg.train.seed, 0xE3B, 0));
            EmbeddingTable::random(words, cfg.data.embedding_dim, &mut rng)?
        }
    };
    let idf = data::build_idf(&train_split)?;

    let model = MatchNet::new(net_cfg, table, cfg.train.seed)?;
    let train_instances: Vec<QAInstance> = encode(&model, &train_split, &idf).into_iter().flat_map(|q| q.instances).collect();
    let dev = encode(&model, &dev_split, &idf);

    fs::create_dir_all(output).map_err(|e| io_failure(output, e))?;
    let log_path = output.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);
    let _ = writeln!(log, "epoch\ttrain_loss\tdev_map\tdev_mrr\tseconds");
    let mut log_err = None;
    let on_epoch = |r: &EpochRecord| {
        eprintln!("epoch {:>3}  loss {:.6}  dev MAP {:.4}  MRR {:.4}", r.epoch, r.train_loss, r.dev_map, r.dev_mrr);
        if let Err(e) = writeln!(log, "{}", r.log_line()).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    };
    let outcome = trainer::train(model, &train_instances, &dev, &cfg.train, on_epoch)?;
    if let Some(e) = log_err {
        return Err(io_failure(&log_path, e));
    }

    let ckpt_path = output.join("best.ckpt");
    Checkpoint {
        model: outcome.best.clone(),
        idf: Some(idf.clone()),
    }
    .save(&ckpt_path)?;

    let dev_report = write_evaluation(&outcome.best, &dev, "dev", output)?;
    let test_report = match &test_split {
        Some(t) => Some(write_evaluation(&outcome.best, &encode(&outcome.best, t, &idf), "test", output)?),
        None => None,
    };
    if let Some(r) = &test_report {
        println!("test\tMAP {:.4}\tMRR {:.4}", r.map, r.mrr);
    }
    println!("dev\tMAP {:.4}\tMRR {:.4}\t(best epoch {})", dev_report.map, dev_report.mrr, outcome.best_epoch);

    let manifest = json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "started": started,
        "finished": now(),
        "config_file": config_path.display().to_string(),
        "config_text": text,
        "resolved": {
            "data": cfg.data,
            "model": outcome.best.config,
            "train": cfg.train,
        },
        "vocab_size": outcome.best.params.embeddings.len(),
        "vocab_hash": outcome.best.params.embeddings.vocab_hash(),
        "parameters": outcome.best.params.parameter_count(),
        "train_instances": train_instances.len(),
        "epochs_run": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "checkpoint": "best.ckpt",
        "dev": report_json(&dev_report),
        "test": test_report.as_ref().map(report_json),
    });
    write_manifest(output, &manifest)
}

fn write_manifest(dir: &Path, manifest: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Failure::usage(e.to_string()))?;
    write_file(&dir.join("manifest.json"), &(text + "\n"))
}

fn load_checkpoint(path: &Path) -> Result<(MatchNet, IdfTable), Failure> {
    let ckpt = Checkpoint::load(path)?;
    let idf = ckpt
        .idf
        .ok_or_else(|| Failure::usage(format!("{}: checkpoint carries no IDF table", path.display())))?;
    Ok((ckpt.model, idf))
}

pub fn evaluate(checkpoint: &Path, split_path: &Path, output: &Path, filter: bool) -> Result<(), Failure> {
    let started = now();
    let (model, idf) = load_checkpoint(checkpoint)?;
    let raw = load_split(split_path)?;
    let split = if filter { data::filter_degenerate(&raw) } else { raw };
    if split.is_empty() {
        return Err(Failure::usage(format!("{}: no questions to evaluate", split_path.display())));
    }
    fs::create_dir_all(output).map_err(|e| io_failure(output, e))?;
    let run_id = split_name(split_path);
    let report = write_evaluation(&model, &encode(&model, &split, &idf), &run_id, output)?;
    print!("{}", report.to_key_values());
    let manifest = json!({
        "command": "evaluate",
        "version": env!("CARGO_PKG_VERSION"),
        "started": started,
        "finished": now(),
        "checkpoint": checkpoint.display().to_string(),
        "split": split_path.display().to_string(),
        "filtered": filter,
        "vocab_hash": model.params.embeddings.vocab_hash(),
        "run_file": format!("{run_id}.run"),
        "qrels_file": format!("{run_id}.qrels"),
        "metrics": report_json(&report),
    });
    write_manifest(output, &manifest)
}

pub fn predict(checkpoint: &Path, pairs: &Path) -> Result<(), Failure> {
    let (model, idf) = load_checkpoint(checkpoint)?;
    let split = load_split(pairs)?;
    let encoded = encode(&model, &split, &idf);
    let flat: Vec<QAInstance> = encoded.into_iter().flat_map(|q| q.instances).collect();
    let scores = model.score_candidates(&flat)?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (inst, s) in flat.iter().zip(scores) {
        let _ = writeln!(out, "{}\t{}\t{:.6}", inst.qid, eval::docid_for(inst.candidate), s);
    }
    out.flush().map_err(|e| io_failure(Path::new("<stdout>"), e))
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> Result<(), Failure> {
    let fault = match fault {
        None => None,
        Some("conv2d") => Some(BackwardFault::Conv2dFilters),
        Some("metric") => Some(BackwardFault::MetricU),
        Some(other) => return Err(Failure::usage(format!("unknown fault `{other}` (conv2d, metric)"))),
    };
    let reports = gradcheck::run_suite(seed, fault)?;
    println!("measurement\tgroup\tmax_rel_error\tchecked");
    let mut failed = Vec::new();
    for r in &reports {
        for g in &r.groups {
            println!("{}\t{}\t{:.3e}\t{}", r.measurement, g.group, g.max_rel_error, g.checked);
        }
        failed.extend(r.failures().into_iter().map(|g| format!("{}/{}", r.measurement, g.group)));
    }
    if failed.is_empty() {
        println!("gradcheck passed (tolerance {:e})", gradcheck::GRADCHECK_TOLERANCE);
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn data_stats(paths: &[PathBuf]) -> Result<(), Failure> {
    println!("{:<16} {:<9} {:>9} {:>9} {:>9}", "split", "stage", "questions", "pairs", "%positive");
    for p in paths {
        let raw = load_split(p)?;
        let filtered = data::filter_degenerate(&raw);
        for (stage, split) in [("raw", &raw), ("filtered", &filtered)] {
            let s = split.stats();
            println!(
                "{:<16} {:<9} {:>9} {:>9} {:>9.1}",
                raw.name,
                stage,
                s.questions,
                s.pairs,
                s.percent_positive()
            );
        }
    }
    Ok(())
}
