//! Planted-lesion images with a planted shortcut.
//!
//! Each image is low-intensity noise with one bright square patch. Three
//! binary attributes describe the patch (bright, large, sharp-edged), the
//! label follows a noisy majority vote over them, and coordinate 0 carries a
//! ±1 marker that equals the label in the training split only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::causal_attrib::MonotoneScm;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "CAD1";
pub const FORMAT_VERSION: u32 = 1;
pub const SHORTCUT_INDEX: usize = 0;
pub const ATTRIBUTES: usize = 3;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub mask: Vec<bool>,
    pub attributes: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        SPLITS[self as usize]
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub side: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    pub background_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub intensity_threshold: f64,
    pub size_threshold: usize,
    pub contrast_min: f64,
    pub contrast_threshold: f64,
    /// Number of present attributes at which the label switches on.
    pub label_threshold: usize,
    /// Probability that the label ignores the attributes (in each direction).
    pub flip: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            side: 16,
            n_train: 731,
            n_val: 238,
            n_test: 244,
            patch_min: 3,
            patch_max: 5,
            background_max: 0.1,
            intensity_min: 0.4,
            intensity_max: 1.0,
            intensity_threshold: 0.7,
            size_threshold: 4,
            contrast_min: 0.5,
            contrast_threshold: 0.75,
            label_threshold: 2,
            flip: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.patch_min < 3 || self.patch_min > self.patch_max {
            return bad(format!("patch sizes {}..={} invalid (need 3 ≤ min ≤ max)", self.patch_min, self.patch_max));
        }
        // The patch keeps a one-pixel margin so it never touches the shortcut corner.
        if self.patch_max + 2 > self.side {
            return bad(format!("patch of side {} cannot fit in a {}-pixel image", self.patch_max, self.side));
        }
        if !(0.0 <= self.background_max && self.background_max < self.intensity_min * self.contrast_min) {
            return bad("background must stay below the dimmest patch pixel".into());
        }
        if !(self.intensity_min < self.intensity_max && self.intensity_max <= 1.0) {
            return bad("intensity range invalid".into());
        }
        if !(0.0 < self.contrast_min && self.contrast_min <= 1.0) {
            return bad("contrast minimum must lie in (0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.flip) {
            return bad(format!("flip probability {} outside [0, 0.5]", self.flip));
        }
        if self.label_threshold > ATTRIBUTES {
            return bad(format!("label threshold {} exceeds the attribute count", self.label_threshold));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("format_version", FORMAT_VERSION.to_string());
        kv("seed", self.seed.to_string());
        kv("side", self.side.to_string());
        kv("p", ATTRIBUTES.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_val", self.n_val.to_string());
        kv("n_test", self.n_test.to_string());
        kv("patch_min", self.patch_min.to_string());
        kv("patch_max", self.patch_max.to_string());
        kv("background_max", self.background_max.to_string());
        kv("intensity_min", self.intensity_min.to_string());
        kv("intensity_max", self.intensity_max.to_string());
        kv("intensity_threshold", self.intensity_threshold.to_string());
        kv("size_threshold", self.size_threshold.to_string());
        kv("contrast_min", self.contrast_min.to_string());
        kv("contrast_threshold", self.contrast_threshold.to_string());
        kv("label_threshold", self.label_threshold.to_string());
        kv("flip", self.flip.to_string());
        kv("scm", format!("y=[u<1-flip] if sum(a)>={} else [u<flip]; u~U[0,1)", self.label_threshold));
        kv("shortcut_index", SHORTCUT_INDEX.to_string());
        kv("shortcut_rule", "train: 2y-1; val/test: fair coin".into());
        s
    }

    /// Reads `key=value` lines; absent keys keep their defaults. Descriptive
    /// manifest keys are accepted but must agree with this implementation.
    pub fn from_kv(text: &str, origin: &Path) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::default();
        for (line, key, value) in parse_kv(text, origin)? {
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| Error::parse(origin, line, format!("`{key}` expects a number, got `{v}`")))
            };
            let int = |v: &str| -> Result<u64> {
                v.parse::<u64>().map_err(|_| Error::parse(origin, line, format!("`{key}` expects an integer, got `{v}`")))
            };
            match key.as_str() {
                "seed" => cfg.seed = int(&value)?,
                "side" => cfg.side = int(&value)? as usize,
                "n_train" => cfg.n_train = int(&value)? as usize,
                "n_val" => cfg.n_val = int(&value)? as usize,
                "n_test" => cfg.n_test = int(&value)? as usize,
                "patch_min" => cfg.patch_min = int(&value)? as usize,
                "patch_max" => cfg.patch_max = int(&value)? as usize,
                "background_max" => cfg.background_max = num(&value)?,
                "intensity_min" => cfg.intensity_min = num(&value)?,
                "intensity_max" => cfg.intensity_max = num(&value)?,
                "intensity_threshold" => cfg.intensity_threshold = num(&value)?,
                "size_threshold" => cfg.size_threshold = int(&value)? as usize,
                "contrast_min" => cfg.contrast_min = num(&value)?,
                "contrast_threshold" => cfg.contrast_threshold = num(&value)?,
                "label_threshold" => cfg.label_threshold = int(&value)? as usize,
                "flip" => cfg.flip = num(&value)?,
                "format_version" if int(&value)? == FORMAT_VERSION as u64 => {}
                "p" if int(&value)? == ATTRIBUTES as u64 => {}
                "shortcut_index" if int(&value)? == SHORTCUT_INDEX as u64 => {}
                "scm" | "shortcut_rule" => {}
                _ => return Err(Error::parse(origin, line, format!("unsupported setting `{key}={value}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments; duplicate
/// keys are rejected.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, format!("expected key=value, got `{line}`")))?;
        let k = k.trim().to_string();
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(Error::parse(origin, i + 1, format!("duplicate key `{k}`")));
        }
        out.push((i + 1, k, v.trim().to_string()));
    }
    Ok(out)
}

/// Rounds to the 9 significant digits the dataset file stores.
pub fn quantize(v: f64) -> f64 {
    format_value(v).parse().expect("formatted float parses")
}

fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }
}

/// Patch geometry recovered from an image and its mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub size: usize,
    pub interior: f64,
    pub border: f64,
}

/// Recovers the patch size and its interior/border intensities from the
/// mask, or `None` when the mask is not a single filled square.
pub fn patch_stats(x: &[f64], mask: &[bool], side: usize) -> Option<PatchStats> {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let (first, last) = (*on.first()?, *on.last()?);
    let (r0, c0, r1, c1) = (first / side, first % side, last / side, last % side);
    let k = r1 + 1 - r0;
    if c1 + 1 - c0 != k || on.len() != k * k || k < 3 {
        return None;
    }
    let center = (r0 + k / 2) * side + c0 + k / 2;
    Some(PatchStats { size: k, interior: x[center], border: x[first] })
}

pub fn attributes_from_stats(stats: &PatchStats, cfg: &SynthConfig) -> Vec<bool> {
    vec![
        stats.interior > cfg.intensity_threshold,
        stats.size >= cfg.size_threshold,
        stats.border / stats.interior > cfg.contrast_threshold,
    ]
}

pub fn label_from(attributes: &[bool], u: f64, cfg: &SynthConfig) -> usize {
    let votes = attributes.iter().filter(|&&a| a).count();
    let on = if votes >= cfg.label_threshold { u < 1.0 - cfg.flip } else { u < cfg.flip };
    on as usize
}

fn generate_sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, split: Split) -> Sample {
    let side = cfg.side;
    let mut x: Vec<f64> = (0..side * side).map(|_| quantize(rng.gen_range(0.0..cfg.background_max))).collect();
    let k = rng.gen_range(cfg.patch_min..=cfg.patch_max);
    let mu = quantize(rng.gen_range(cfg.intensity_min..cfg.intensity_max));
    let c = rng.gen_range(cfg.contrast_min..1.0);
    let border = quantize(mu * c);
    let row = rng.gen_range(1..side - k);
    let col = rng.gen_range(1..side - k);
    let mut mask = vec![false; side * side];
    for r in row..row + k {
        for q in col..col + k {
            let ring = r == row || r == row + k - 1 || q == col || q == col + k - 1;
            x[r * side + q] = if ring { border } else { mu };
            mask[r * side + q] = true;
        }
    }
    let attributes = attributes_from_stats(&PatchStats { size: k, interior: mu, border }, cfg);
    let u: f64 = rng.gen();
    let y = label_from(&attributes, u, cfg);
    x[SHORTCUT_INDEX] = match split {
        Split::Train => 2.0 * y as f64 - 1.0,
        _ => {
            if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
        }
    };
    Sample { x, y, mask, attributes }
}

pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split as u64 + 1);
    Ok((0..cfg.split_size(split)).map(|_| generate_sample(&mut rng, cfg, split)).collect())
}

/// All three splits plus the manifest text that regenerates them.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Dataset, String)> {
    cfg.validate()?;
    let ds = Dataset {
        side: cfg.side,
        train: generate_split(cfg, Split::Train)?,
        val: generate_split(cfg, Split::Val)?,
        test: generate_split(cfg, Split::Test)?,
    };
    Ok((ds, cfg.to_manifest()))
}

/// The generating SCM: three noise atoms (label forced on, majority rule,
/// label forced off) with probabilities `flip`, `1 − 2·flip`, `flip`.
pub fn scm_of_dataset(cfg: &SynthConfig) -> Result<MonotoneScm> {
    cfg.validate()?;
    let probs = vec![cfg.flip, 1.0 - 2.0 * cfg.flip, cfg.flip];
    let thr = cfg.label_threshold;
    MonotoneScm::from_fn(ATTRIBUTES, probs, |u, a| match u {
        0 => true,
        1 => a.iter().filter(|&&v| v).count() >= thr,
        _ => false,
    })
}

fn encode_runs(mask: &[bool]) -> String {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push(format!("{start}:{}", i - start));
        } else {
            i += 1;
        }
    }
    runs.join(",")
}

pub fn split_to_string(side: usize, samples: &[Sample]) -> String {
    let p = samples.first().map_or(ATTRIBUTES, |s| s.attributes.len());
    let mut out = format!("{FORMAT_TAG} {side} {p} {}\n", samples.len());
    for s in samples {
        let a: Vec<&str> = s.attributes.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let x: Vec<String> = s.x.iter().map(|&v| format_value(v)).collect();
        writeln!(out, "{};{};{};{}", s.y, a.join(","), encode_runs(&s.mask), x.join(",")).expect("string write");
    }
    out
}

pub fn parse_split(text: &str, origin: &Path) -> Result<(usize, Vec<Sample>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty dataset file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != FORMAT_TAG {
        return Err(Error::parse(origin, 1, format!("expected `{FORMAT_TAG} <side> <p> <n>`, got `{header}`")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::parse(origin, 1, format!("bad {what} `{s}`")))
    };
    let (side, p, n) = (num(fields[1], "side")?, num(fields[2], "attribute count")?, num(fields[3], "sample count")?);
    let d = side * side;
    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(origin, ln, msg);
        let parts: Vec<&str> = line.split(';').collect();
        if parts.len() != 4 {
            return Err(err(format!("expected 4 `;`-separated fields, found {}", parts.len())));
        }
        let y = match parts[0] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got `{other}`"))),
        };
        let attributes = parts[1]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(err(format!("attribute must be 0 or 1, got `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if attributes.len() != p {
            return Err(err(format!("{} attributes, header says {p}", attributes.len())));
        }
        let mut mask = vec![false; d];
        for run in parts[2].split(',').filter(|s| !s.is_empty()) {
            let (start, len) = run
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| err(format!("bad mask run `{run}`")))?;
            if start + len > d {
                return Err(err(format!("mask run `{run}` exceeds {d} pixels")));
            }
            mask[start..start + len].iter_mut().for_each(|m| *m = true);
        }
        let x = parts[3]
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad pixel value `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if x.len() != d {
            return Err(err(format!("{} pixel values, expected {d}", x.len())));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(err(format!("non-finite pixel value {v}")));
        }
        samples.push(Sample { x, y, mask, attributes });
    }
    if samples.len() != n {
        return Err(Error::parse(origin, 1, format!("header announces {n} samples, file holds {}", samples.len())));
    }
    Ok((side, samples))
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.cad", split.name()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn write_dataset(dir: &Path, ds: &Dataset, manifest: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::all() {
        let path = split_path(dir, split);
        fs::write(&path, split_to_string(ds.side, ds.split(split))).map_err(|e| Error::io(&path, e))?;
    }
    let path = manifest_path(dir);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_split(path: &Path) -> Result<(usize, Vec<Sample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, path)
}

/// Reads all splits and the manifest from a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, SynthConfig)> {
    let mpath = manifest_path(dir);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let cfg = SynthConfig::from_kv(&text, &mpath)?;
    let mut parts = Vec::new();
    for split in Split::all() {
        let path = split_path(dir, split);
        let (side, samples) = read_split(&path)?;
        if side != cfg.side {
            return Err(Error::parse(&path, 1, format!("image side {side} disagrees with manifest side {}", cfg.side)));
        }
        parts.push(samples);
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok((Dataset { side: cfg.side, train, val, test }, cfg))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_attrib::{validate_monotone, CondProbModel};

    fn small() -> SynthConfig {
        SynthConfig { n_train: 40, n_val: 20, n_test: 20, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_majority_without_flips() {
        let cfg = SynthConfig { flip: 0.0, ..SynthConfig::default() };
        assert_eq!(label_from(&[true, true, false], 0.999, &cfg), 1);
        assert_eq!(label_from(&[true, false, false], 0.0, &cfg), 0);
    }

    #[test]
    fn train_shortcut_encodes_label() {
        let (ds, _) = generate_dataset(&small()).unwrap();
        for s in &ds.train {
            assert_eq!(s.x[SHORTCUT_INDEX], 2.0 * s.y as f64 - 1.0);
        }
        for s in ds.val.iter().chain(&ds.test) {
            assert!(s.x[SHORTCUT_INDEX].abs() == 1.0);
        }
    }

    #[test]
    fn scm_conditionals() {
        let scm = scm_of_dataset(&SynthConfig::default()).unwrap();
        assert!((scm.query(1, &[true, true, false]).unwrap() - 0.9).abs() < 1e-15);
        assert!((scm.query(1, &[false, false, true]).unwrap() - 0.1).abs() < 1e-15);
        validate_monotone(&scm).unwrap();
    }

    #[test]
    fn masks_and_attributes_are_faithful() {
        let cfg = small();
        let (ds, _) = generate_dataset(&cfg).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let stats = patch_stats(&s.x, &s.mask, cfg.side).expect("square patch");
            assert_eq!(attributes_from_stats(&stats, &cfg), s.attributes);
            assert!(!s.mask[SHORTCUT_INDEX]);
            let n_on = s.mask.iter().filter(|&&m| m).count();
            assert_eq!(n_on, stats.size * stats.size);
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let cfg = SynthConfig { side: 6, ..SynthConfig::default() };
        assert!(generate_dataset(&cfg).is_err());
        assert!(generate_dataset(&SynthConfig { n_val: 0, ..small() }).is_err());
    }

    #[test]
    fn empty_split_round_trips() {
        let text = split_to_string(16, &[]);
        assert_eq!(text, "CAD1 16 3 0\n");
        let (side, samples) = parse_split(&text, Path::new("mem")).unwrap();
        assert_eq!((side, samples.len()), (16, 0));
    }

    #[test]
    fn single_sample_round_trips() {
        let cfg = SynthConfig { n_train: 1, n_val: 1, n_test: 1, ..SynthConfig::default() };
        let s = generate_split(&cfg, Split::Train).unwrap();
        let (_, back) = parse_split(&split_to_string(16, &s), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let cfg = SynthConfig { n_train: 2, n_val: 1, n_test: 1, ..SynthConfig::default() };
        let text = split_to_string(16, &generate_split(&cfg, Split::Train).unwrap());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = format!("7{}", &lines[2][1..]);
        let broken = lines.join("\n");
        match parse_split(&broken, Path::new("d.cad")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_split("CAD2 16 3 0\n", Path::new("d.cad")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_regenerates_identically() {
        let cfg = SynthConfig { seed: 42, ..small() };
        let (ds, manifest) = generate_dataset(&cfg).unwrap();
        let back = SynthConfig::from_kv(&manifest, Path::new("manifest.txt")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(generate_dataset(&back).unwrap().0, ds);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        assert!(SynthConfig::from_kv("colour=blue\n", Path::new("m")).is_err());
        assert!(SynthConfig::from_kv("p=4\n", Path::new("m")).is_err());
        assert!(SynthConfig::from_kv("seed=1\nseed=2\n", Path::new("m")).is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        for v in [0.123456789123, 1.0 / 3.0, -1.0, 0.0, 0.09999999999] {
            let q = quantize(v);
            assert_eq!(quantize(q), q);
            assert_eq!(format_value(q).parse::<f64>().unwrap(), q);
        }
    }
}
