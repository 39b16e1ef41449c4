//! `causal-align`: dataset generation, training, evaluation, counterfactual
//! dumps, CCCE reports and the ablation suite.
//!
//! Exit status: 0 on success, 1 on invalid input or configuration, 2 on a
//! numeric failure. `CAUSAL_ALIGN_SEED` overrides the seed of `gen-data`,
//! `train` and `reproduce`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causal_align::autodiff::{read_checkpoint, write_checkpoint};
use causal_align::causal_attrib::{report_rows, select_causal_subset, REPORT_HEADER};
use causal_align::harness::suite::{eval_settings, run_suite, summary_csv, SuiteConfig};
use causal_align::harness::{eval_csv, evaluate, Classifier, EvalSettings, SaliencyKind};
use causal_align::pipeline::{annotations, run_training, Mode, TrainConfig, Trained};
use causal_align::report::{config_hash, fmt_f, Csv};
use causal_align::synthdata::{
    generate_dataset, read_dataset, scm_of_dataset, sha256_hex, write_dataset, Dataset, Split, SynthConfig,
    ATTRIBUTES,
};
use causal_align::{Error, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

const SEED_VAR: &str = "CAUSAL_ALIGN_SEED";

#[derive(Parser, Debug)]
#[command(name = "causal-align", version, about = "Causal alignment with implicit counterfactual gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset described by a key=value config.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a flat or hierarchical classifier.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        /// Flat epochs; in hierarchical mode, the joint-training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy and saliency precision of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "cf-support")]
        kind: String,
        #[arg(long)]
        tau: Option<f64>,
        /// Training config supplying the counterfactual settings
        /// (default: config.txt next to the checkpoint, if present).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Metrics CSV (default: printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample CSV.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Counterfactuals of selected samples as text records and PGM images.
    CfDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample indices.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for cf_dump.txt and the images (default: records to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample CCCE subset reports under the data-generating SCM.
    Ccce {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = ATTRIBUTES)]
        max_size: usize,
    },
    /// Run an experiment suite (`ablation` or `smoke`) and print its summary.
    Reproduce {
        #[arg(long, default_value = "ablation")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train { config, data, out, mode, lambda, alpha, lambda1, lambda2, alpha1, alpha2, epochs } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::parse(&read_text(p)?, p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = Mode::parse(&m)?;
            }
            if let Some(v) = lambda {
                cfg.flat.lambda = v;
            }
            if let Some(v) = alpha {
                cfg.flat.cf.alpha = v;
            }
            if let Some(v) = lambda1 {
                cfg.hier.lambda1 = v;
            }
            if let Some(v) = lambda2 {
                cfg.hier.lambda2 = v;
            }
            if let Some(v) = alpha1 {
                cfg.hier.alpha1 = v;
            }
            if let Some(v) = alpha2 {
                cfg.hier.alpha2 = v;
            }
            if let Some(v) = epochs {
                cfg.flat.epochs = v;
                cfg.hier.epochs_label = v.min(cfg.hier.epochs_attr);
            }
            if let Some(seed) = seed_override()? {
                cfg.set_seed(seed);
            }
            if data.is_some() {
                cfg.data = data;
            }
            if out.is_some() {
                cfg.out = out;
            }
            train(cfg)
        }
        Command::Eval { checkpoint, data, split, kind, tau, config, limit, out, samples } => {
            let settings = EvalArgs { kind: SaliencyKind::parse(&kind)?, tau, config };
            eval(&checkpoint, &data, Split::parse(&split)?, &settings, limit, out.as_deref(), samples.as_deref())
        }
        Command::CfDump { checkpoint, data, ids, split, config, out } => {
            cf_dump(&checkpoint, &data, Split::parse(&split)?, &ids, config.as_deref(), out.as_deref())
        }
        Command::Ccce { data, out, split, max_size } => ccce(&data, &out, Split::parse(&split)?, max_size),
        Command::Reproduce { suite, out } => {
            let cfg = SuiteConfig::named(&suite, seed_override()?.unwrap_or(0))?;
            let result = run_suite(&cfg, &out)?;
            print!("{}", summary_csv(&result.summary).render(&config_hash(&cfg.to_text())));
            Ok(())
        }
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{SEED_VAR} must be a nonnegative integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidArgument(format!("{SEED_VAR}: {e}"))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SynthConfig::from_kv(&read_text(p)?, p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let (ds, manifest) = generate_dataset(&cfg)?;
    write_dataset(out, &ds, &manifest)?;
    println!("manifest_sha256={}", sha256_hex(manifest.as_bytes()));
    Ok(())
}

fn train(cfg: TrainConfig) -> Result<()> {
    let data = cfg.data.clone().ok_or_else(|| Error::InvalidArgument("no dataset given (--data or `data=`)".into()))?;
    let out = cfg.out.clone().ok_or_else(|| Error::InvalidArgument("no output directory given (--out or `out=`)".into()))?;
    cfg.flat.validate()?;
    cfg.hier.validate()?;
    let (ds, data_cfg) = read_dataset(&data)?;
    let train = ds.split(Split::Train);
    let r = match cfg.mode {
        Mode::Flat => None,
        Mode::Hier => Some(annotations(&scm_of_dataset(&data_cfg)?, train, ATTRIBUTES)?),
    };
    let (trained, log) = run_training(&cfg, train, r.as_deref())?;
    // The snapshot is path-free so it hashes (and reruns) the same anywhere.
    let snapshot = TrainConfig { data: None, out: None, ..cfg };
    let text = snapshot.to_text();
    let hash = config_hash(&text);
    write_text(&out.join("config.txt"), &text)?;
    log.write(&out.join("train_log.csv"), &hash)?;
    write_checkpoint(&out.join("model.ckpt"), &trained.networks())?;
    println!("checkpoint={}", out.join("model.ckpt").display());
    Ok(())
}

struct EvalArgs {
    kind: SaliencyKind,
    tau: Option<f64>,
    config: Option<PathBuf>,
}

/// Model, samples and evaluation settings shared by `eval` and `cf-dump`.
fn load(checkpoint: &Path, data: &Path, split: Split, config: Option<&Path>) -> Result<(Classifier, Dataset, EvalSettings)> {
    let model = Classifier::from(Trained::from_networks(read_checkpoint(checkpoint)?)?);
    let (ds, _) = read_dataset(data)?;
    if ds.split(split).is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", split.name())));
    }
    let beside = checkpoint.parent().map(|d| d.join("config.txt")).filter(|p| p.is_file());
    let settings = match config.map(Path::to_path_buf).or(beside) {
        Some(p) => eval_settings(&TrainConfig::parse(&read_text(&p)?, &p)?),
        None => EvalSettings::default(),
    };
    Ok((model, ds, settings))
}

const METRICS_HEADER: &str = "split,kind,tau,samples,accuracy,precision_mean,precision_std,empty_supports";

fn eval(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    args: &EvalArgs,
    limit: Option<usize>,
    out: Option<&Path>,
    samples: Option<&Path>,
) -> Result<()> {
    let ckpt_hash = sha256_hex(read_text(checkpoint)?.as_bytes());
    let (model, ds, mut settings) = load(checkpoint, data, split, args.config.as_deref())?;
    settings.kind = args.kind;
    if let Some(tau) = args.tau {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        settings.cf.tau = tau;
        settings.hier.tau = tau;
    }
    let all = ds.split(split);
    let part = &all[..limit.map_or(all.len(), |n| n.min(all.len()))];
    let report = evaluate(&model, part, &settings)?;

    let mut desc = String::new();
    writeln!(desc, "checkpoint_sha256={ckpt_hash}").expect("string write");
    writeln!(desc, "split={}\nkind={}\ntau={}\nsamples={}", split.name(), settings.kind.name(), settings.cf.tau, part.len())
        .expect("string write");
    writeln!(desc, "{:?}", settings).expect("string write");
    let hash = config_hash(&desc);

    let p = &report.precision;
    let mut metrics = Csv::new(METRICS_HEADER);
    metrics.push(format!(
        "{},{},{},{},{},{},{},{}",
        split.name(),
        settings.kind.name(),
        settings.cf.tau,
        part.len(),
        fmt_f(report.accuracy),
        fmt_f(p.mean),
        fmt_f(p.std),
        p.empty
    ));
    match out {
        Some(path) => metrics.write(path, &hash)?,
        None => print!("{}", metrics.render(&hash)),
    }
    if let Some(path) = samples {
        eval_csv(&report).write(path, &hash)?;
    }
    Ok(())
}

fn join(v: impl IntoIterator<Item = String>) -> String {
    v.into_iter().collect::<Vec<_>>().join(",")
}

/// Plain-text graymap of |x* − x₀|, scaled so the largest change is white.
fn pgm(abs_delta: &[f64], side: usize) -> String {
    let peak = abs_delta.iter().copied().fold(0.0_f64, f64::max);
    let mut s = format!("P2\n# |x*-x0|, white = {peak:e}\n{side} {side}\n255\n");
    for row in abs_delta.chunks(side) {
        let px: Vec<String> = row
            .iter()
            .map(|v| if peak > 0.0 { ((v / peak) * 255.0).round() as u32 } else { 0 }.to_string())
            .collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    s
}

fn cf_dump(checkpoint: &Path, data: &Path, split: Split, ids: &[usize], config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (model, ds, settings) = load(checkpoint, data, split, config)?;
    let samples = ds.split(split);
    let mut records = String::new();
    for &id in ids {
        let s = samples.get(id).ok_or_else(|| {
            Error::InvalidArgument(format!("sample id {id} out of range (split has {})", samples.len()))
        })?;
        let cf = model.counterfactual(s, &settings)?;
        let abs: Vec<f64> = cf.delta().iter().map(|v| v.abs()).collect();
        let support = causal_align::counterfactual::support_of(&cf.delta(), settings.cf.tau);
        writeln!(
            records,
            "{id};{};{};{};{}",
            join(s.x.iter().map(|v| format!("{v:e}"))),
            join(cf.point.iter().map(|v| format!("{v:e}"))),
            join(abs.iter().map(|v| format!("{v:e}"))),
            join(support.iter().map(|j| j.to_string()))
        )
        .expect("string write");
        if let Some(dir) = out {
            write_text(&dir.join(format!("cf_{id}.pgm")), &pgm(&abs, ds.side))?;
        }
    }
    match out {
        Some(dir) => write_text(&dir.join("cf_dump.txt"), &records),
        None => {
            print!("{records}");
            Ok(())
        }
    }
}

fn ccce(data: &Path, out: &Path, split: Split, max_size: usize) -> Result<()> {
    let (ds, cfg) = read_dataset(data)?;
    let scm = scm_of_dataset(&cfg)?;
    let mut csv = Csv::new(REPORT_HEADER);
    for (i, s) in ds.split(split).iter().enumerate() {
        let report = select_causal_subset(&scm, &s.attributes, s.y, max_size)?;
        csv.extend(report_rows(i, &report));
    }
    let desc = format!("{}split={}\nmax_size={max_size}\n", cfg.to_manifest(), split.name());
    csv.write(out, &config_hash(&desc))
}
