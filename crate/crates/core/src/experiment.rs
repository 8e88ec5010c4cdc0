//! Experiment configuration files and the run-directory layouts written by
//! the command-line driver.
//!
//! Every output directory holds the fully resolved `config.toml`, minus its
//! own location. All files except `timing.json` are deterministic functions
//! of that config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, write_batch, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::{confidences, top1_hits, Checkpoint};
use crate::metrics::{
    calibration_csv, class_probabilities, classwise_ece, ece, entropy_confidence_export, inversion_audit, inversions_csv,
    scatter_csv, spearman, DEFAULT_BINS,
};
use crate::rng::{RngStreams, Stream};
use crate::trainer::{config_hash, evaluate_under_dropout, train, Ablation, EvalRow, RunResult, TrainConfig};

fn default_ablations() -> Vec<Ablation> {
    Ablation::standard_set()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Methods compared by `ablate`.
    #[serde(default = "default_ablations")]
    pub ablations: Vec<Ablation>,
    pub data: SyntheticSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces both the data seed and the training seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rates: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("`name` must not be empty".into()));
        }
        if self.ablations.is_empty() {
            return Err(Error::Config("`ablations` must list at least one method".into()));
        }
        self.data.validate()?;
        self.train.validate()
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(rates) = &o.rates {
            self.train.eval_rates = rates.clone();
        }
        self.validate()?;
        Ok(self)
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// The config as recorded in an output directory, without the location
    /// of that directory.
    pub fn recorded_toml(&self) -> Result<String> {
        Self {
            out_dir: None,
            ..self.clone()
        }
        .to_toml()
    }

    /// Hash of the parts that determine results (data and training).
    pub fn hash(&self) -> Result<String> {
        config_hash(&(&self.data, &self.train))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }
}

/// Parses `0,0.3,0.5`.
pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad rate `{t}` in `{s}`")))?;
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("rate {v} outside [0, 1)")));
            }
            Ok(v)
        })
        .collect()
}

pub fn epochs_csv(run: &RunResult) -> String {
    let mut s = String::from(
        "epoch,pi,lambda,task,ent,cec,mask,total,lambda_eff,gamma,beta,val_accuracy,val_map_at_1,val_ece,val_classwise_ece,masked_fraction,mask_probs,order_digest\n",
    );
    for e in &run.epochs {
        let probs: Vec<String> = e.mask_probs.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.pi,
            e.lambda,
            e.loss.task,
            e.loss.ent,
            e.loss.cec,
            e.loss.mask,
            e.loss.total,
            e.loss.lambda,
            e.loss.gamma,
            e.loss.beta,
            e.val.accuracy,
            e.val.map_at_1,
            e.val.ece,
            e.val.classwise_ece,
            e.masked_fraction,
            probs.join(";"),
            e.order_digest
        );
    }
    s
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("rate,accuracy,map_at_1,ece,classwise_ece\n");
    for r in rows {
        let m = r.metrics;
        let _ = writeln!(s, "{},{},{},{},{}", r.rate, m.accuracy, m.map_at_1, m.ece, m.classwise_ece);
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    ablation: String,
    config_hash: &'a str,
    temperature: f64,
    v_max: Option<f64>,
    eval: &'a [EvalRow],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.recorded_toml()?)?;
    fs::write(dir.join("epochs.csv"), epochs_csv(run))?;
    fs::write(dir.join("eval.csv"), eval_csv(&run.eval))?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            name: &cfg.name,
            ablation: cfg.train.ablation.to_string(),
            config_hash: &run.config_hash,
            temperature: run.temperature,
            v_max: run.v_max,
            eval: &run.eval,
        },
    )?;
    run.model.save(&dir.join("checkpoint.json"), &run.config_hash)?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "wall_clock_secs": run.wall_clock_secs }),
    )
}

fn train_config(cfg: &ExperimentConfig, data: &Splits) -> Result<RunResult> {
    let mut run = train(&cfg.train, data)?;
    run.config_hash = cfg.hash()?;
    Ok(run)
}

/// Trains one configuration and writes its run directory to `dir`.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunResult> {
    let data = generate(&cfg.data)?;
    let run = train_config(cfg, &data)?;
    write_run_dir(dir, cfg, &run)?;
    Ok(run)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: Ablation,
    pub eval: Vec<EvalRow>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method");
    if let Some(first) = rows.first() {
        for metric in ["accuracy", "map_at_1", "ece"] {
            for r in &first.eval {
                let _ = write!(s, ",{metric}@{}", r.rate);
            }
        }
    }
    s.push('\n');
    for row in rows {
        s.push_str(&row.method.to_string());
        for pick in [|m: &crate::trainer::EvalMetrics| m.accuracy, |m: &crate::trainer::EvalMetrics| m.map_at_1, |m: &crate::trainer::EvalMetrics| m.ece] {
            for r in &row.eval {
                let _ = write!(s, ",{}", pick(&r.metrics));
            }
        }
        s.push('\n');
    }
    s
}

/// Runs every method in `cfg.ablations` on the same data and seeds, each in
/// `dir/<method>`, and writes the combined `dir/ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    let data = generate(&cfg.data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<AblationRow>> = pool.install(|| {
        cfg.ablations
            .par_iter()
            .map(|&a| {
                let mut sub = cfg.clone();
                sub.train.ablation = a;
                let wrap = |e: Error| Error::Run {
                    tag: a.to_string(),
                    source: Box::new(e),
                };
                let run = train_config(&sub, &data).map_err(wrap)?;
                write_run_dir(&dir.join(a.to_string()), &sub, &run).map_err(wrap)?;
                Ok(AblationRow { method: a, eval: run.eval })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.recorded_toml()?)?;
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditSummary {
    pub ece: f64,
    pub classwise_ece: f64,
    pub n: usize,
    pub pairs_audited: usize,
    pub total_inversions: usize,
    pub inversion_rate: f64,
    /// Rank correlation of gate entropy with confidence; absent when either
    /// is constant.
    pub entropy_confidence_spearman: Option<f64>,
    pub eval: Vec<EvalRow>,
}

/// Calibration, subset-inversion and entropy/confidence diagnostics of a
/// checkpoint on the test split described by `cfg`.
pub fn cmd_audit(checkpoint: &Path, cfg: &ExperimentConfig, dir: &Path) -> Result<AuditSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model;
    let data = generate(&cfg.data)?;
    let test = &data.test;
    if model.config.dims != test.dims()
        || model.config.classes != test.num_classes()
        || model.config.label_mode != test.label_mode()
    {
        return Err(Error::Config(format!(
            "checkpoint expects dims {:?}, {} classes ({:?}); config gives dims {:?}, {} classes ({:?})",
            model.config.dims,
            model.config.classes,
            model.config.label_mode,
            test.dims(),
            test.num_classes(),
            test.label_mode()
        )));
    }
    let out = model.forward(test)?;
    let conf = confidences(&out.logits, test.label_mode(), 1.0);
    let report = ece(&conf, &top1_hits(&out.logits, test.labels()), DEFAULT_BINS)?;
    let probs = class_probabilities(&out.logits, test.label_mode(), 1.0)?;
    let cw = classwise_ece(&probs, test.labels(), DEFAULT_BINS)?;
    let audit = inversion_audit(&model, test)?;
    let scatter = entropy_confidence_export(&model, test)?;
    let ents: Vec<f64> = scatter.iter().map(|r| r.gate_entropy).collect();
    let confs: Vec<f64> = scatter.iter().map(|r| r.confidence).collect();
    let eval_seed = RngStreams::new(cfg.train.seed).stream(Stream::Eval).random::<u64>();
    let eval = evaluate_under_dropout(&model, test, &cfg.train.eval_rates, cfg.train.eval_seeds, 1.0, eval_seed, None)?;

    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.recorded_toml()?)?;
    fs::write(dir.join("calibration.csv"), calibration_csv(&report))?;
    fs::write(dir.join("inversions.csv"), inversions_csv(&audit))?;
    fs::write(dir.join("scatter.csv"), scatter_csv(&scatter))?;
    fs::write(dir.join("eval.csv"), eval_csv(&eval))?;
    let summary = AuditSummary {
        ece: report.ece,
        classwise_ece: cw,
        n: report.n,
        pairs_audited: audit.pairs.len(),
        total_inversions: audit.total_inversions,
        inversion_rate: audit.inversion_rate,
        entropy_confidence_spearman: spearman(&ents, &confs),
        eval,
    };
    write_json(&dir.join("audit.json"), &summary)?;
    Ok(summary)
}

/// Writes the three splits as `train.bin`, `val.bin` and `test.bin`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let data = generate(&cfg.data)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.recorded_toml()?)?;
    for (name, batch) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let f = fs::File::create(dir.join(format!("{name}.bin")))?;
        write_batch(batch, std::io::BufWriter::new(f))?;
    }
    Ok(())
}
