//! The ablation suite: λ=0 flat, λ=1 flat and hierarchical alignment, each
//! over several seeds, with every artifact written under one directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! suite.txt                         settings snapshot (hashed into every CSV)
//! summary.csv                       one row per variant, mean (std) over seeds
//! runs.csv                          one row per (variant, seed)
//! data/                             the dataset shared by all runs
//! runs/<variant>-seed<k>/config.txt training configuration (`train --config`)
//! runs/<variant>-seed<k>/train_log.csv
//! runs/<variant>-seed<k>/eval.csv
//! runs/<variant>-seed<k>/model.ckpt
//! runs/<variant>-seed<k>/record.txt the run record
//! ```
//!
//! All paths inside the outputs are relative to the suite directory and the
//! timing column is `NA`, so repeating a suite reproduces every file
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::{eval_csv, evaluate, mean_std, Classifier, EvalReport, EvalSettings, SaliencyKind};
use crate::autodiff::checkpoint_to_string;
use crate::error::{Error, Result};
use crate::pipeline::{annotations, run_training, HierHyper, Mode, TrainConfig};
use crate::report::{config_hash, fmt_f, Csv};
use crate::synthdata::{
    generate_dataset, parse_kv, scm_of_dataset, sha256_hex, write_dataset, Dataset, Split, SynthConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoAlign,
    Align,
    Hierarchical,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoAlign, Variant::Align, Variant::Hierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoAlign => "no-align",
            Variant::Align => "align",
            Variant::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: SynthConfig,
    /// Flat settings; the no-align variant runs them with λ = 0.
    pub flat: TrainConfig,
    pub hier: TrainConfig,
    /// Evaluate on at most this many test samples.
    pub eval_limit: Option<usize>,
}

impl SuiteConfig {
    /// Three seeds on the default dataset, full test split.
    pub fn ablation(base_seed: u64) -> SuiteConfig {
        let flat = TrainConfig::default();
        let hier = TrainConfig {
            mode: Mode::Hier,
            hier: HierHyper {
                lambda1: 1.0,
                lambda2: 1.0,
                alpha1: 1.0,
                alpha2: 1.0,
                lr: 0.003,
                batch_size: 64,
                epochs_attr: 60,
                epochs_label: 40,
                align_per_batch: Some(16),
                ..HierHyper::default()
            },
            ..TrainConfig::default()
        };
        SuiteConfig {
            name: "ablation".into(),
            seeds: (0..3).map(|k| base_seed + k).collect(),
            data: SynthConfig { seed: base_seed, ..SynthConfig::default() },
            flat,
            hier,
            eval_limit: None,
        }
    }

    /// A seconds-scale version of the ablation for plumbing checks.
    pub fn smoke(base_seed: u64) -> SuiteConfig {
        let mut cfg = SuiteConfig::ablation(base_seed);
        cfg.name = "smoke".into();
        cfg.seeds.truncate(1);
        cfg.data.n_train = 64;
        cfg.data.n_val = 8;
        cfg.data.n_test = 16;
        cfg.flat.flat.epochs = 1;
        cfg.flat.flat.cf.steps = 40;
        cfg.hier.hier.epochs_attr = 2;
        cfg.hier.hier.epochs_label = 1;
        cfg.hier.hier.cf_steps = 40;
        cfg.eval_limit = Some(8);
        cfg
    }

    pub fn named(name: &str, base_seed: u64) -> Result<SuiteConfig> {
        match name {
            "ablation" => Ok(SuiteConfig::ablation(base_seed)),
            "smoke" => Ok(SuiteConfig::smoke(base_seed)),
            _ => Err(Error::InvalidArgument(format!("unknown suite `{name}` (expected ablation or smoke)"))),
        }
    }

    /// Training configuration of one run.
    pub fn run_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut cfg = match variant {
            Variant::NoAlign => {
                let mut c = self.flat.clone();
                c.flat.lambda = 0.0;
                c
            }
            Variant::Align => self.flat.clone(),
            Variant::Hierarchical => self.hier.clone(),
        };
        cfg.set_seed(seed);
        // Canonical form: what a record or `train --config` would rebuild.
        TrainConfig::parse(&cfg.to_text(), Path::new("<suite>")).expect("suite configurations render to valid text")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "suite={}", self.name).expect("string write");
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        writeln!(s, "seeds={}", seeds.join(",")).expect("string write");
        writeln!(s, "eval_limit={}", self.eval_limit.map_or("all".into(), |n| n.to_string())).expect("string write");
        for (section, body) in [
            ("data", self.data.to_manifest()),
            ("flat", self.flat.to_text()),
            ("hier", self.hier.to_text()),
        ] {
            writeln!(s, "[{section}]").expect("string write");
            s.push_str(&body);
        }
        s
    }
}

/// Evaluation settings implied by a training configuration.
pub fn eval_settings(cfg: &TrainConfig) -> EvalSettings {
    let mut cf = cfg.flat.cf.clone();
    if cfg.mode == Mode::Hier {
        cf.tau = cfg.hier.tau;
    }
    EvalSettings { kind: SaliencyKind::CfSupport, cf, hier: cfg.hier.clone() }
}

/// Everything needed to repeat one training + evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    /// SHA-256 of the dataset manifest.
    pub manifest_hash: String,
    pub data_dir: PathBuf,
    pub eval_limit: Option<usize>,
    pub metric_csvs: Vec<PathBuf>,
    pub checkpoint: PathBuf,
}

impl RunRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("variant", self.variant.name().into());
        kv("seed", self.seed.to_string());
        kv("manifest_sha256", self.manifest_hash.clone());
        kv("data", self.data_dir.display().to_string());
        kv("eval_limit", self.eval_limit.map_or("all".into(), |n| n.to_string()));
        let csvs: Vec<String> = self.metric_csvs.iter().map(|p| p.display().to_string()).collect();
        kv("metric_csvs", csvs.join(","));
        kv("checkpoint", self.checkpoint.display().to_string());
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<RunRecord> {
        let (head, config) = text
            .split_once("[config]\n")
            .ok_or_else(|| Error::parse(origin, 0, "missing [config] section"))?;
        let mut variant = None;
        let mut seed = None;
        let mut manifest_hash = None;
        let mut data_dir = None;
        let mut eval_limit = None;
        let mut metric_csvs = Vec::new();
        let mut checkpoint = None;
        for (line, key, value) in parse_kv(head, origin)? {
            let bad = |what: &str| Error::parse(origin, line, format!("`{key}` expects {what}, got `{value}`"));
            match key.as_str() {
                "variant" => variant = Some(Variant::parse(&value).map_err(|_| bad("a variant name"))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("an integer"))?),
                "manifest_sha256" => manifest_hash = Some(value),
                "data" => data_dir = Some(PathBuf::from(value)),
                "eval_limit" => {
                    eval_limit = Some(if value == "all" {
                        None
                    } else {
                        Some(value.parse::<usize>().map_err(|_| bad("an integer or `all`"))?)
                    })
                }
                "metric_csvs" => metric_csvs = value.split(',').filter(|v| !v.is_empty()).map(PathBuf::from).collect(),
                "checkpoint" => checkpoint = Some(PathBuf::from(value)),
                _ => return Err(Error::parse(origin, line, format!("unknown key `{key}`"))),
            }
        }
        let missing = |k: &str| Error::parse(origin, 0, format!("missing `{k}`"));
        Ok(RunRecord {
            variant: variant.ok_or_else(|| missing("variant"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            config: TrainConfig::parse(config, origin)?,
            manifest_hash: manifest_hash.ok_or_else(|| missing("manifest_sha256"))?,
            data_dir: data_dir.ok_or_else(|| missing("data"))?,
            eval_limit: eval_limit.ok_or_else(|| missing("eval_limit"))?,
            metric_csvs,
            checkpoint: checkpoint.ok_or_else(|| missing("checkpoint"))?,
        })
    }
}

/// Rendered outputs of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub train_log: String,
    pub eval: String,
    pub checkpoint: String,
    pub report: EvalReport,
}

/// Trains and evaluates one configuration on `ds`.
pub fn execute_run(cfg: &TrainConfig, data_cfg: &SynthConfig, ds: &Dataset, eval_limit: Option<usize>) -> Result<RunOutput> {
    let train = ds.split(Split::Train);
    let r = match cfg.mode {
        Mode::Flat => None,
        Mode::Hier => {
            let p = train.first().map_or(0, |s| s.attributes.len());
            Some(annotations(&scm_of_dataset(data_cfg)?, train, p)?)
        }
    };
    let (trained, log) = run_training(cfg, train, r.as_deref())?;
    let checkpoint = checkpoint_to_string(&trained.networks());
    let test = ds.split(Split::Test);
    let test = &test[..eval_limit.map_or(test.len(), |n| n.min(test.len()))];
    let report = evaluate(&Classifier::from(trained), test, &eval_settings(cfg))?;
    let hash = config_hash(&cfg.to_text());
    Ok(RunOutput { train_log: log.render(&hash), eval: eval_csv(&report).render(&hash), checkpoint, report })
}

/// Repeats a recorded run; `root` is the directory the record's paths are
/// relative to. Fails if the dataset no longer matches the recorded hash.
pub fn rerun(record: &RunRecord, root: &Path) -> Result<RunOutput> {
    let dir = root.join(&record.data_dir);
    let (ds, data_cfg) = crate::synthdata::read_dataset(&dir)?;
    let hash = sha256_hex(data_cfg.to_manifest().as_bytes());
    if hash != record.manifest_hash {
        return Err(Error::InvalidArgument(format!(
            "dataset manifest hash {hash} does not match the recorded {}",
            record.manifest_hash
        )));
    }
    execute_run(&record.config, &data_cfg, &ds, record.eval_limit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub precision_std: f64,
    pub empty: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub precision: (f64, f64),
    pub accuracy: (f64, f64),
    pub empty: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub runs: Vec<SeedResult>,
    pub summary: Vec<SummaryRow>,
    pub records: Vec<RunRecord>,
}

impl SuiteResult {
    pub fn row(&self, variant: Variant) -> &SummaryRow {
        self.summary.iter().find(|r| r.variant == variant).expect("every variant is summarized")
    }
}

pub const SUMMARY_HEADER: &str = "variant,precision_mean,precision_std,accuracy_mean,accuracy_std,empty_supports,seeds";
pub const RUNS_HEADER: &str = "variant,seed,accuracy,precision_mean,precision_std,empty_supports";

pub fn summarize(runs: &[SeedResult]) -> Vec<SummaryRow> {
    Variant::ALL
        .into_iter()
        .filter_map(|v| {
            let rs: Vec<&SeedResult> = runs.iter().filter(|r| r.variant == v).collect();
            if rs.is_empty() {
                return None;
            }
            let prec: Vec<f64> = rs.iter().map(|r| r.precision).collect();
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            Some(SummaryRow {
                variant: v,
                precision: mean_std(&prec),
                accuracy: mean_std(&acc),
                empty: rs.iter().map(|r| r.empty).sum(),
                seeds: rs.len(),
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Csv {
    let mut csv = Csv::new(SUMMARY_HEADER);
    for r in rows {
        csv.push(format!(
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            fmt_f(r.precision.0),
            fmt_f(r.precision.1),
            fmt_f(r.accuracy.0),
            fmt_f(r.accuracy.1),
            r.empty,
            r.seeds
        ));
    }
    csv
}

pub fn runs_csv(runs: &[SeedResult]) -> Csv {
    let mut csv = Csv::new(RUNS_HEADER);
    for r in runs {
        csv.push(format!(
            "{},{},{},{},{},{}",
            r.variant.name(),
            r.seed,
            fmt_f(r.accuracy),
            fmt_f(r.precision),
            fmt_f(r.precision_std),
            r.empty
        ));
    }
    csv
}

/// Reads back a summary table written by [`run_suite`].
pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let origin = Path::new("summary.csv");
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::parse(origin, i + 1, "expected 7 fields"));
        }
        let num = |s: &str| -> Result<f64> {
            if s == "NA" {
                return Ok(f64::NAN);
            }
            s.parse().map_err(|_| Error::parse(origin, i + 1, format!("bad number `{s}`")))
        };
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, i + 1, format!("bad count `{s}`")));
        rows.push(SummaryRow {
            variant: Variant::parse(f[0])?,
            precision: (num(f[1])?, num(f[2])?),
            accuracy: (num(f[3])?, num(f[4])?),
            empty: int(f[5])?,
            seeds: int(f[6])?,
        });
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every variant over every seed and writes the layout described in
/// the module documentation.
pub fn run_suite(cfg: &SuiteConfig, out: &Path) -> Result<SuiteResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one seed".into()));
    }
    let suite_text = cfg.to_text();
    let hash = config_hash(&suite_text);
    write_text(&out.join("suite.txt"), &suite_text)?;

    let (ds, manifest) = generate_dataset(&cfg.data)?;
    let data_rel = PathBuf::from("data");
    write_dataset(&out.join(&data_rel), &ds, &manifest)?;
    let manifest_hash = sha256_hex(manifest.as_bytes());

    let mut runs = Vec::new();
    let mut records = Vec::new();
    for variant in Variant::ALL {
        for &seed in &cfg.seeds {
            info!("suite {}: {} seed {seed}", cfg.name, variant.name());
            let run_cfg = cfg.run_config(variant, seed);
            let output = execute_run(&run_cfg, &cfg.data, &ds, cfg.eval_limit)?;
            let dir = PathBuf::from("runs").join(format!("{}-seed{seed}", variant.name()));
            let record = RunRecord {
                variant,
                seed,
                config: run_cfg.clone(),
                manifest_hash: manifest_hash.clone(),
                data_dir: data_rel.clone(),
                eval_limit: cfg.eval_limit,
                metric_csvs: vec![dir.join("train_log.csv"), dir.join("eval.csv")],
                checkpoint: dir.join("model.ckpt"),
            };
            write_text(&out.join(&dir).join("config.txt"), &run_cfg.to_text())?;
            write_text(&out.join(&record.metric_csvs[0]), &output.train_log)?;
            write_text(&out.join(&record.metric_csvs[1]), &output.eval)?;
            write_text(&out.join(&record.checkpoint), &output.checkpoint)?;
            write_text(&out.join(&dir).join("record.txt"), &record.to_text())?;
            let p = &output.report.precision;
            runs.push(SeedResult {
                variant,
                seed,
                accuracy: output.report.accuracy,
                precision: p.mean,
                precision_std: p.std,
                empty: p.empty,
            });
            records.push(record);
        }
    }
    let summary = summarize(&runs);
    summary_csv(&summary).write(&out.join("summary.csv"), &hash)?;
    runs_csv(&runs).write(&out.join("runs.csv"), &hash)?;
    Ok(SuiteResult { runs, summary, records })
}
