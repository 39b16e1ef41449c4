//! The smoke suite: output layout, determinism and reproduction from run
//! records.

use causal_align::harness::suite::{parse_summary, rerun, run_suite, RunRecord, SuiteConfig, Variant};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_suite_is_deterministic_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = SuiteConfig::smoke(0);
    let result = run_suite(&cfg, &a).unwrap();
    run_suite(&cfg, &b).unwrap();

    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{k} differs between runs");
    }

    // Every CSV has a header and a config-hash trailer.
    for (k, v) in &fa {
        if k.ends_with(".csv") {
            let text = String::from_utf8(v.clone()).unwrap();
            let last = text.lines().last().unwrap();
            assert!(last.starts_with("# config-hash=") && last.len() == "# config-hash=".len() + 64, "{k}");
            assert!(!text.lines().next().unwrap().starts_with('#'));
        }
    }

    let summary = parse_summary(&String::from_utf8(fa["summary.csv"].clone()).unwrap()).unwrap();
    assert_eq!(summary.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL.to_vec());
    // The file carries six decimals.
    for (r, w) in summary.iter().zip(&result.summary) {
        assert!((r.precision.0 - w.precision.0).abs() <= 5e-7 && (r.accuracy.0 - w.accuracy.0).abs() <= 5e-7);
        assert_eq!((r.empty, r.seeds), (w.empty, w.seeds));
    }

    // Each record rebuilds its metric CSVs and checkpoint byte for byte.
    assert_eq!(result.records.len(), 3);
    for rec in &result.records {
        let dir = rec.checkpoint.parent().unwrap();
        let text = fs::read_to_string(a.join(dir).join("record.txt")).unwrap();
        let parsed = RunRecord::parse(&text, Path::new("record.txt")).unwrap();
        assert_eq!(&parsed, rec);
        let again = rerun(&parsed, &a).unwrap();
        assert_eq!(again.train_log.as_bytes(), &fa[&rec.metric_csvs[0].display().to_string()][..]);
        assert_eq!(again.eval.as_bytes(), &fa[&rec.metric_csvs[1].display().to_string()][..]);
        assert_eq!(again.checkpoint.as_bytes(), &fa[&rec.checkpoint.display().to_string()][..]);
    }
}

#[test]
fn rerun_refuses_a_different_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let result = run_suite(&SuiteConfig::smoke(0), tmp.path()).unwrap();
    let mut rec = result.records[0].clone();
    rec.manifest_hash = "0".repeat(64);
    assert!(rerun(&rec, tmp.path()).is_err());
}

#[test]
fn unknown_suite_is_rejected() {
    assert!(SuiteConfig::named("full", 0).is_err());
    assert!(SuiteConfig::named("smoke", 0).is_ok());
}
