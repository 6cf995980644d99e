// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use additive_recall::cli::dispatch;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["additive-recall"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn emit(dir: &Path, kind: &str) -> String {
    let out = dir.join("fx");
    assert_eq!(
        run(&[
            "fixtures",
            "emit",
            "--kind",
            kind,
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    out.join(kind).to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["dla", "--no-such-flag"]), 2);
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        run(&[
            "dla",
            "--model",
            "/nonexistent",
            "--dataset",
            "x",
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
    let m = emit(dir.path(), "subject_head");
    let ds = format!("{m}/dataset.jsonl");
    assert_eq!(
        run(&[
            "edge-ablate",
            "--model",
            &m,
            "--dataset",
            &ds,
            "--components",
            "L9H9",
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
}

#[test]
fn classify_finds_the_planted_subject_head() {
    let dir = tempfile::tempdir().unwrap();
    let m = emit(dir.path(), "subject_head");
    let out = dir.path().join("cls");
    let ds = format!("{m}/dataset.jsonl");
    assert_eq!(
        run(&[
            "classify",
            "--model",
            &m,
            "--dataset",
            &ds,
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = fs::read_to_string(out.join("labels_PLAYS_SPORT.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let planted = doc["heads"]
        .as_array()
        .unwrap()
        .iter()
        .find(|h| h["head"] == "L0H0")
        .unwrap();
    assert_eq!(planted["label"], "Subject");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn removing_everything_zeroes_logits() {
    let dir = tempfile::tempdir().unwrap();
    let m = emit(dir.path(), "composite");
    let out = dir.path().join("edge");
    let ds = format!("{m}/dataset.jsonl");
    assert_eq!(
        run(&[
            "edge-ablate",
            "--model",
            &m,
            "--dataset",
            &ds,
            "--components",
            "all",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let mut rdr = csv::Reader::from_path(out.join("edge_ablate.csv")).unwrap();
    let col = rdr
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "max_abs_final_logit")
        .unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        let v: f64 = rec.unwrap()[col].parse().unwrap();
        assert!(v <= 1e-6, "{v}");
        n += 1;
    }
    assert_eq!(n, 20);
}

#[test]
fn same_inputs_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = emit(dir.path(), "propagation");
    let ds = format!("{m}/dataset.jsonl");
    let read = |name: &str, sub: &str| fs::read(dir.path().join(sub).join(name)).unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let out = out.to_str().unwrap();
        let jobs = if sub == "a" { "1" } else { "3" };
        assert_eq!(
            run(&[
                "dla",
                "--model",
                &m,
                "--dataset",
                &ds,
                "--by-source",
                "--jobs",
                jobs,
                "--out",
                out
            ]),
            0
        );
        assert_eq!(run(&["knockout", "--model", &m, "--dataset", &ds, "--out", out]), 0);
    }
    for f in ["dla.csv", "stats.csv", "knockout.csv"] {
        assert_eq!(read(f, "a"), read(f, "b"), "{f}");
    }
}

#[test]
fn every_command_runs_on_fixture_assets() {
    let dir = tempfile::tempdir().unwrap();
    let m = emit(dir.path(), "composite");
    let ds = format!("{m}/dataset.jsonl");
    let out = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cases: Vec<(Vec<&str>, &str, String)> = vec![
        (vec!["trace", "--index", "2"], "trace.json", out("trace")),
        (vec!["lens"], "lens.csv", out("lens")),
        (vec!["probe", "--components", "L0H0,L0H2"], "probe.csv", out("probe")),
        (vec!["patch", "--components", "L0H1"], "patch.csv", out("patch")),
        (
            vec![
                "additivity",
                "--components",
                "L0H0,L0H1,L0H2,MLP1",
                "--relation",
                "IN_COUNTRY",
            ],
            "additivity.json",
            out("add"),
        ),
        (vec!["rank-filter", "--max-rank", "0"], "rank_histogram.csv", out("rf")),
        (
            vec!["dla", "--ln-style", "scale-only", "--float32"],
            "dla.csv",
            out("dla32"),
        ),
    ];
    for (args, file, o) in cases {
        let mut full = args.clone();
        full.extend(["--model", &m, "--dataset", &ds, "--out", &o]);
        assert_eq!(run(&full), 0, "{args:?}");
        assert!(Path::new(&o).join(file).exists(), "{args:?}");
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(Path::new(&o).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["tool"], "additive-recall");
    }
    let add: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("add/additivity.json")).unwrap()).unwrap();
    let reports = add.as_array().unwrap();
    assert_eq!(reports.len(), 7);
    assert!(reports
        .iter()
        .all(|r| r["report"]["constructive"]["argmax_of_sum_is_a"] == true));
}
