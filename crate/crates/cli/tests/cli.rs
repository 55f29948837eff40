mod common;

use std::fs;

use common::{fixture, json, phonex, stdout};

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identical_hypotheses_score_zero_and_empty_ones_score_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.tsv");
    let empty = dir.path().join("empty.tsv");
    fs::write(&reference, "a\teng\tp a t\nb\tdeu\tʃ i\n").unwrap();
    fs::write(&empty, "a\teng\t\nb\tdeu\t\n").unwrap();

    let same = json(&phonex(&[
        "score",
        "--ref",
        path(&reference),
        "--hyp",
        path(&reference),
    ]));
    assert_eq!(same["aggregates"]["ALL"]["pfer"], 0.0);
    assert_eq!(same["aggregates"]["ALL"]["per"], 0.0);

    let none = json(&phonex(&["score", "--ref", path(&reference), "--hyp", path(&empty)]));
    assert_eq!(none["aggregates"]["ALL"]["pfer"], 100.0);
    assert_eq!(none["aggregates"]["ALL"]["per"], 100.0);
    assert_eq!(none["aggregates"]["lang:deu"]["ref_phones"], 2);
}

#[test]
fn missing_hypotheses_count_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.tsv");
    let hyp = dir.path().join("hyp.tsv");
    fs::write(&reference, "a\teng\tp a\nb\teng\tt a\n").unwrap();
    fs::write(&hyp, "a\teng\tp a\nz\teng\tm\n").unwrap();
    let out = phonex(&["score", "--ref", path(&reference), "--hyp", path(&hyp)]);
    let report = json(&out);
    assert_eq!(report["missing_hypotheses"], serde_json::json!(["b"]));
    assert_eq!(report["unmatched_hypotheses"], serde_json::json!(["z"]));
    assert_eq!(report["aggregates"]["ALL"]["per"], 50.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn score_and_features_match_golden_tables() {
    let (r, h) = (fixture("score3/ref.tsv"), fixture("score3/hyp.tsv"));
    let score = stdout(&phonex(&[
        "score",
        "--ref",
        path(&r),
        "--hyp",
        path(&h),
        "--format",
        "tsv",
    ]));
    assert_eq!(score, fs::read_to_string(fixture("score3/golden_score.tsv")).unwrap());
    let features = stdout(&phonex(&[
        "features",
        "--ref",
        path(&r),
        "--hyp",
        path(&h),
        "--format",
        "tsv",
    ]));
    assert_eq!(
        features,
        fs::read_to_string(fixture("score3/golden_features.tsv")).unwrap()
    );
}

#[test]
fn scoring_is_idempotent_across_job_counts() {
    let (r, h) = (fixture("score3/ref.tsv"), fixture("score3/hyp.tsv"));
    let one = stdout(&phonex(&["score", "--ref", path(&r), "--hyp", path(&h)]));
    let again = stdout(&phonex(&["score", "--ref", path(&r), "--hyp", path(&h), "-j", "3"]));
    assert_eq!(one, again);
}

const POSTERIORS: &str = r#"{"symbols": ["<blank>", "p", "a"], "utterances": [
  {"utt_id": "u1", "lang": "eng", "log_probs": [[null, 0, null], [null, 0, null], [0, null, null], [null, null, 0]]},
  {"utt_id": "u0", "lang": "eng", "log_probs": [[0, null, null]]}
]}"#;

#[test]
fn one_hot_posteriors_decode_and_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let post = dir.path().join("post.json");
    fs::write(&post, POSTERIORS).unwrap();
    let greedy = stdout(&phonex(&["decode", "--posteriors", path(&post)]));
    assert_eq!(greedy, "# decode mode=greedy\nu0\teng\t\nu1\teng\tp a\n");

    let hyp = dir.path().join("hyp.tsv");
    let beam = phonex(&[
        "decode",
        "--posteriors",
        path(&post),
        "--mode",
        "beam",
        "--beam-width",
        "3",
        "-o",
        path(&hyp),
    ]);
    stdout(&beam);
    let decoded = fs::read_to_string(&hyp).unwrap();
    assert!(decoded.starts_with("# decode mode=beam beam_width=3\n"));

    let reference = dir.path().join("ref.tsv");
    fs::write(&reference, "u1\teng\tp a\n").unwrap();
    let report = json(&phonex(&["score", "--ref", path(&reference), "--hyp", path(&hyp)]));
    assert_eq!(report["aggregates"]["ALL"]["pfer"], 0.0);
}

#[test]
fn tied_frames_decode_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let post = dir.path().join("tie.json");
    let half = 0.5f64.ln();
    fs::write(
        &post,
        format!(r#"{{"symbols": ["<blank>", "p", "a"], "utterances": [{{"utt_id": "t", "lang": "x", "log_probs": [[null, {half}, {half}]]}}]}}"#),
    )
    .unwrap();
    let first = stdout(&phonex(&["decode", "--posteriors", path(&post)]));
    assert_eq!(first, stdout(&phonex(&["decode", "--posteriors", path(&post)])));
    assert_eq!(first.lines().nth(1).unwrap(), "t\tx\tp");
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let post = dir.path().join("post.json");
    fs::write(&post, POSTERIORS).unwrap();
    let code = |args: &[&str]| phonex(args).status.code();

    assert_eq!(code(&["score", "--ref", "x.tsv"]), Some(1));
    assert_eq!(
        code(&[
            "decode",
            "--posteriors",
            path(&post),
            "--mode",
            "beam",
            "--beam-width",
            "0"
        ]),
        Some(1)
    );
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));

    let missing = dir.path().join("nope.tsv");
    assert_eq!(
        code(&["score", "--ref", path(&missing), "--hyp", path(&missing)]),
        Some(2)
    );

    let empty = dir.path().join("empty.json");
    fs::write(&empty, r#"{"symbols": ["<blank>"], "utterances": []}"#).unwrap();
    assert_eq!(code(&["decode", "--posteriors", path(&empty)]), Some(2));

    let unnormalized = dir.path().join("raw.json");
    fs::write(
        &unnormalized,
        r#"{"symbols": ["<blank>", "p"], "utterances": [{"utt_id": "u", "lang": "x", "log_probs": [[-0.1, -0.1]]}]}"#,
    )
    .unwrap();
    let out = phonex(&["decode", "--posteriors", path(&unnormalized)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame 0"));
}

#[test]
fn non_utf8_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, b"u\teng\t\xff\xfe\n").unwrap();
    let out = phonex(&["score", "--ref", path(&bad), "--hyp", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UTF-8"));
}

#[test]
fn missing_table_is_a_usage_error() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_phonex"))
        .args(["score", "--ref", "a", "--hyp", "b"])
        .env_remove("PHONEX_FEATURE_TABLE")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn correlation_fixture_is_strongly_negative() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.json");
    let f = |name: &str| fixture(&format!("correlate10/{name}"));
    stdout(&phonex(&[
        "score",
        "--ref",
        path(&f("ref.tsv")),
        "--hyp",
        path(&f("hyp.tsv")),
        "-o",
        path(&scores),
    ]));
    let out = phonex(&[
        "correlate",
        "--scores",
        path(&scores),
        "--vectors",
        path(&f("vectors.csv")),
        "--counts",
        path(&f("counts.tsv")),
    ]);
    let report = json(&out);
    // One swap of adjacent ranks among ten: -(1 - 6 * 2 / 990).
    assert!((report["rho"].as_f64().unwrap() + (1.0 - 12.0 / 990.0)).abs() < 1e-12);
    assert_eq!(report["languages"].as_array().unwrap().len(), 10);
    assert_eq!(report["missing_vectors"], serde_json::json!(["aux"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nov"));
}

#[test]
fn zero_weight_inter_row_equals_vanilla_row() {
    let out = stdout(&phonex(&[
        "ablate",
        "--seed",
        "3",
        "--steps",
        "40",
        "--eval-interval",
        "20",
        "--configs",
        "vanilla,inter:0",
        "--format",
        "tsv",
    ]));
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][6..], rows[1][6..]);
}

#[test]
fn train_writes_trace_and_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let ckpt = dir.path().join("ckpt.json");
    let out = phonex(&[
        "train",
        "--seed",
        "1",
        "--objective",
        "self_cond",
        "--steps",
        "20",
        "--eval-interval",
        "10",
        "--trace",
        path(&trace),
        "--checkpoint",
        path(&ckpt),
    ]);
    stdout(&out);
    let steps: Vec<u64> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, vec![0, 10, 20]);
    let ckpt: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(ckpt["format"], "phonex-toymodel-1");
    assert!(ckpt["params"]["cond1.w"].is_array() || ckpt["params"]["cond1.w"].is_object());
}
