use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use edda_core::evalkit::{domain_size, evaluate, out_of_domain_interaction, split};
use edda_core::mdgraph::load_dataset;
use edda_core::pipeline::Validation;
use edda_core::synthgen::{generate, SynthSpec};
use edda_core::walker::{mine_pairs_with, read_pairs, write_pairs};
use edda_core::{
    EdModel64, EpochRecord, Error as CoreError, EvalSet, MultiDomainDataset, Part, SimilarPairSet, SplitDataset,
    TrainCallbacks, WalkProfiles,
};

use crate::config::RunConfig;
use crate::manifest::Manifest;

/// Bad flags or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load(data: &Path) -> Result<MultiDomainDataset> {
    load_dataset(data).with_context(|| format!("cannot load dataset {}", data.display()))
}

fn split_dataset(dataset: &MultiDomainDataset, cfg: &RunConfig) -> Result<SplitDataset> {
    Ok(split(dataset, cfg.split, cfg.seed)?)
}

fn pair_file_name(d: usize, e: usize) -> String {
    format!("pairs_{d}_{e}.tsv")
}

pub fn synth(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("cannot read synth spec {}", spec_path.display()))?;
    let mut spec = SynthSpec::parse(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let syn = generate(&spec)?;
    create_dir(out)?;
    syn.write_to_dir(out)?;
    let mut m = Manifest::new("synth");
    m.set("seed", spec.seed);
    m.hash_input("spec", spec_path)?;
    for line in spec.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.set(&format!("config.{}", k.trim()), v.trim());
        }
    }
    for (d, g) in syn.dataset.domains().iter().enumerate() {
        m.set(&format!("output.domain.{d}.interactions"), g.num_edges());
    }
    m.write(&out.join("manifest.txt"))?;
    eprintln!(
        "wrote {} interactions in {} domains to {}",
        syn.interactions.len(),
        spec.num_domains(),
        out.display()
    );
    Ok(())
}

pub fn align(data: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = load(data)?;
    create_dir(out)?;
    let mut m = Manifest::new("align");
    m.extend_config(cfg.entries());
    m.hash_input("data", data)?;
    let w = dataset.num_domains();
    if w < 2 {
        eprintln!("dataset has a single domain; no domain pairs to align");
        m.set("output.pair_files", 0);
        m.write(&out.join("manifest.txt"))?;
        return Ok(());
    }
    // Pairs are mined on the training split so held-out edges never leak.
    let sp = split_dataset(&dataset, cfg)?;
    let start = Instant::now();
    let profiles = WalkProfiles::compute(&sp.train, &cfg.walk)?;
    let mut files = 0;
    for d in 0..w {
        for e in d + 1..w {
            let forward = mine_pairs_with(&sp.train, &profiles, d, e, cfg.train.k)?;
            let backward = mine_pairs_with(&sp.train, &profiles, e, d, cfg.train.k)?;
            let name = pair_file_name(d, e);
            let mut f = BufWriter::new(File::create(out.join(&name))?);
            write_pairs(&mut f, [&forward, &backward])?;
            f.flush()?;
            m.set(&format!("output.{name}.pairs"), forward.len() + backward.len());
            files += 1;
        }
    }
    m.set("output.pair_files", files);
    m.write(&out.join("manifest.txt"))?;
    log::info!("mined pairs for {files} domain pairs in {:?}", start.elapsed());
    Ok(())
}

/// Reads a pair file, or every `pairs_*.tsv` of a directory.
pub fn load_pairs(path: &Path) -> Result<Vec<SimilarPairSet>> {
    let mut files: Vec<PathBuf> = if path.is_dir() {
        std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("pairs_") && n.ends_with(".tsv"))
            })
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    let mut sets = Vec::new();
    for f in files {
        let r = BufReader::new(File::open(&f).with_context(|| format!("cannot open {}", f.display()))?);
        sets.extend(read_pairs(r).with_context(|| format!("in {}", f.display()))?);
    }
    sets.sort_by_key(|s| s.domain_pair);
    Ok(sets)
}

struct CliCallbacks<'a> {
    inner: Validation<'a>,
    log: BufWriter<File>,
    deterministic: bool,
    checkpoint_every: usize,
    checkpoint_dir: PathBuf,
    epoch: usize,
}

impl TrainCallbacks<f64> for CliCallbacks<'_> {
    fn validate(&mut self, model: &EdModel64) -> edda_core::Result<Option<(f64, f64)>> {
        self.epoch += 1;
        if self.checkpoint_every > 0 && self.epoch.is_multiple_of(self.checkpoint_every) {
            model.save(self.checkpoint_dir.join(format!("epoch_{}", self.epoch)))?;
        }
        TrainCallbacks::<f64>::validate(&mut self.inner, model)
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> edda_core::Result<()> {
        let mut r = record.clone();
        if self.deterministic {
            r.wall_ms = 0;
        }
        writeln!(self.log, "{}", r.to_tsv())?;
        self.log.flush()?;
        log::info!(
            "epoch {}: bpr {:.4} align {:.4} val AUC {}",
            r.epoch,
            r.bpr,
            r.align,
            r.val_auc.map_or("NA".into(), |a| format!("{a:.4}"))
        );
        Ok(())
    }
}

pub fn train(data: &Path, pairs_path: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = load(data)?;
    create_dir(out)?;
    let sp = split_dataset(&dataset, cfg)?;
    let validation = EvalSet::build(&sp, Part::Validation, cfg.eval_seed());
    let mut tcfg = cfg.train_config();
    let pairs = match pairs_path {
        Some(p) if tcfg.beta != 0.0 => load_pairs(p)?,
        Some(_) => Vec::new(),
        None => {
            if tcfg.beta != 0.0 {
                log::warn!("no pair files given; training without the alignment term");
            }
            tcfg.beta = 0.0;
            Vec::new()
        }
    };
    let mut m = Manifest::new("train");
    m.extend_config(cfg.entries());
    m.hash_input("data", data)?;
    if let Some(p) = pairs_path {
        m.hash_input("pairs", p)?;
    }
    m.set("effective_beta", tcfg.beta);
    m.set("split_seed", cfg.seed);
    m.set("init_seed", cfg.seed);

    let mut model = EdModel64::init(cfg.model_spec(), &sp.train, cfg.seed)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.tsv"))?);
    writeln!(log, "{}", EpochRecord::HEADER)?;
    let mut cb = CliCallbacks {
        inner: Validation {
            split: &sp,
            cases: &validation,
            sink: None,
        },
        log,
        deterministic: cfg.deterministic,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_dir: out.join("checkpoints"),
        epoch: 0,
    };
    let outcome = match edda_core::trainer::train(&mut model, &sp.train, &pairs, &tcfg, &mut cb) {
        Ok(o) => o,
        Err(e @ CoreError::NonFiniteLoss { .. }) => {
            let dump = out.join("nonfinite_dump");
            model.save(&dump)?;
            m.set("status", "non-finite loss");
            m.write(&out.join("manifest.txt"))?;
            return Err(anyhow!("{e}; parameters before the failing step saved to {}", dump.display()));
        }
        Err(e) => return Err(e.into()),
    };
    model.save(out.join("checkpoint"))?;
    let report = evaluate(&model, &sp, &validation)?;
    let mut f = BufWriter::new(File::create(out.join("validation.tsv"))?);
    report.write_tsv(&mut f)?;
    f.flush()?;
    m.set("status", "ok");
    m.set("epochs_run", outcome.log.len());
    m.set("best_epoch", outcome.best_epoch);
    m.set("stopped_early", outcome.stopped_early);
    m.set("validation.avg_auc", format!("{:.6}", report.avg_auc()));
    m.set("validation.avg_recall_at_1", format!("{:.6}", report.avg_recall_at_1()));
    m.write(&out.join("manifest.txt"))?;
    eprintln!(
        "trained {} for {} epochs (best {}); validation AUC {:.4}, Recall@1 {:.4}",
        cfg.variant,
        outcome.log.len(),
        outcome.best_epoch,
        report.avg_auc(),
        report.avg_recall_at_1()
    );
    Ok(())
}

/// Checkpoint directory and the training run directory holding its manifest.
pub fn locate_checkpoint(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.join("checkpoint").join("manifest.txt").exists() {
        (path.join("checkpoint"), Some(path.to_path_buf()))
    } else {
        let run = path.parent().filter(|p| p.join("manifest.txt").exists()).map(Path::to_path_buf);
        (path.to_path_buf(), run)
    }
}

/// Keys that must agree between training and evaluation.
const PINNED: [&str; 3] = ["seed", "split", "eval_seed"];

pub fn training_manifest(run_dir: Option<&Path>) -> Result<Option<Manifest>> {
    match run_dir {
        Some(d) => {
            let m = Manifest::read(&d.join("manifest.txt"))?;
            Ok((m.get("command") == Some("train")).then_some(m))
        }
        None => Ok(None),
    }
}

/// Config values inherited from the training manifest unless overridden.
pub fn inherited(train_manifest: Option<&Manifest>) -> Vec<(String, String)> {
    let Some(m) = train_manifest else {
        return Vec::new();
    };
    PINNED
        .iter()
        .filter_map(|k| m.get(&format!("config.{k}")).map(|v| (k.to_string(), v.to_string())))
        .collect()
}

pub fn eval(data: &Path, checkpoint: &Path, train_manifest: Option<&Manifest>, cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let (model_dir, _) = locate_checkpoint(checkpoint);
    let mut m = Manifest::new("eval");
    m.extend_config(cfg.entries());
    m.hash_input("data", data)?;
    m.hash_input("checkpoint", &model_dir)?;

    if let Some(tm) = train_manifest {
        let mut problems = Vec::new();
        let current = cfg.entries();
        for k in PINNED {
            if let Some(want) = tm.get(&format!("config.{k}")) {
                if Some(want) != current.get(k).map(String::as_str) {
                    problems.push(format!("{k}: trained with {want}, evaluating with {}", current[k]));
                }
            }
        }
        let data_hash = m.get("input.data.sha256").map(str::to_string);
        if tm.get("input.data.sha256").is_some() && tm.get("input.data.sha256") != data_hash.as_deref() {
            problems.push("data file differs from the one used for training".into());
        }
        if !problems.is_empty() {
            if force {
                for p in &problems {
                    log::warn!("ignoring mismatch with training run: {p}");
                }
                m.set("forced", true);
            } else {
                bail!(
                    "evaluation setup does not match the training run ({}); pass --force to evaluate anyway",
                    problems.join("; ")
                );
            }
        }
    } else {
        log::warn!("no training manifest found next to the checkpoint; split consistency is not checked");
    }

    let dataset = load(data)?;
    let sp = split_dataset(&dataset, cfg)?;
    let model = EdModel64::load(&model_dir).with_context(|| format!("cannot load checkpoint {}", model_dir.display()))?;
    model
        .check_compatible(&sp.train)
        .context("checkpoint does not fit this dataset")?;
    let test = EvalSet::build(&sp, Part::Test, cfg.eval_seed());
    let report = evaluate(&model, &sp, &test)?;

    create_dir(out)?;
    let mut f = BufWriter::new(File::create(out.join("eval_report.tsv"))?);
    report.write_tsv(&mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(out.join("domain_stats.tsv"))?);
    writeln!(f, "domain\tdomain_size\tout_of_domain_interaction")?;
    for d in 0..sp.train.num_domains() {
        writeln!(
            f,
            "{d}\t{:.6}\t{:.6}",
            domain_size(&sp.train, d)?,
            out_of_domain_interaction(&sp.train, d)?
        )?;
    }
    f.flush()?;
    m.set("test.avg_auc", format!("{:.6}", report.avg_auc()));
    m.set("test.avg_recall_at_1", format!("{:.6}", report.avg_recall_at_1()));
    m.write(&out.join("manifest.txt"))?;
    report.write_tsv(std::io::stdout().lock())?;
    Ok(())
}
