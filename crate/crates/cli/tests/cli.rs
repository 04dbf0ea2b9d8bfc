//! Behavioral tests for the `svbackend` binary: exit codes, determinism,
//! file contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svbackend"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_error_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr not JSON: {text}"));
    v["error"]["kind"].as_str().unwrap_or_default().to_string()
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

const SYNTH_SPEC: &str = r#"{
  "dim": 8,
  "n_speakers": 80,
  "sessions_per_speaker": 5,
  "languages": [
    {"name": "eng", "mean_shift": [2.0,0,0,0,0,0,0,0], "share": 0.4},
    {"name": "cmn", "mean_shift": [-1.0,1.5,0,0,0,0,0,0], "share": 0.3},
    {"name": "yue", "mean_shift": [-1.0,-1.5,0,0,0,0,0,0], "share": 0.3}
  ],
  "gender_shift": [0,0,1.5,0,0,0,0,0],
  "channel_shift": [0,0,0,0.5,0,0,0,0],
  "between_cov": {"isotropic": 1.0},
  "within_cov": {"isotropic": 1.0},
  "seed": 7,
  "trials": {"n_target": 120, "n_nontarget": 240, "sessions_per_model": 1, "seed": 3}
}"#;

/// Generate a small benchmark world under `dir` and return the prefix.
fn synth_world(dir: &Path) -> PathBuf {
    write(&dir.join("spec.json"), SYNTH_SPEC);
    let out = run(
        &["synth", "--spec", "spec.json", "--out-prefix", "data"],
        dir,
    );
    assert_success(&out);
    dir.join("data")
}

#[test]
fn synth_is_deterministic_and_labeled() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("spec.json"), SYNTH_SPEC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    write(&a.join("spec.json"), SYNTH_SPEC);
    write(&b.join("spec.json"), SYNTH_SPEC);
    assert_success(&run(&["synth", "--spec", "spec.json", "--out-prefix", "data"], &a));
    assert_success(&run(&["synth", "--spec", "spec.json", "--out-prefix", "data"], &b));
    for name in ["data.tsv", "data.meta.tsv", "data.models.tsv", "data.trials.tsv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    // three languages present in metadata
    let meta = std::fs::read_to_string(a.join("data.meta.tsv")).unwrap();
    for lang in ["eng", "cmn", "yue"] {
        assert!(meta.contains(lang), "language {lang} missing");
    }
}

#[test]
fn synth_rejects_malformed_spec() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("spec.json"), "{not json");
    let out = run(&["synth", "--spec", "spec.json", "--out-prefix", "x"], dir.path());
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error_kind(&out), "config");
}

#[test]
fn fit_chain_standard_recipes_and_bad_token() {
    let dir = tempfile::tempdir().unwrap();
    synth_world(dir.path());

    let out = run(
        &["fit-chain", "--train", "data.tsv", "--recipe", "nap:gender:1,center,lda:4,ln", "--out", "chain.json"],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("nap:gender:1 (8 -> 8)"), "{stdout}");
    assert!(stdout.contains("lda:4 (8 -> 4)"), "{stdout}");

    let out = run(
        &["fit-chain", "--train", "data.tsv", "--recipe", "center,lda:5,ln", "--out", "chain2.json"],
        dir.path(),
    );
    assert_success(&out);

    let out = run(
        &["fit-chain", "--train", "data.tsv", "--recipe", "nap:altitude:1", "--out", "bad.json"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error_kind(&out), "config");
}

#[test]
fn train_mixture_and_missing_language() {
    let dir = tempfile::tempdir().unwrap();
    synth_world(dir.path());
    write(
        &dir.path().join("cfg.json"),
        r#"{"recipe": "center,lda:4,ln", "backend": "mixture", "languages": ["eng","cmn","yue"], "plda": {"iterations": 5}}"#,
    );
    assert_success(&run(
        &["--config", "cfg.json", "fit-chain", "--train", "data.tsv", "--out", "chain.json"],
        dir.path(),
    ));
    let out = run(
        &["--config", "cfg.json", "train", "--train", "data.tsv", "--chain", "chain.json", "--out", "mix.json"],
        dir.path(),
    );
    assert_success(&out);
    let text = std::fs::read_to_string(dir.path().join("mix.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["components"].as_array().unwrap().len(), 3);

    write(
        &dir.path().join("cfg_bad.json"),
        r#"{"recipe": "center,lda:4,ln", "backend": "mixture", "languages": ["eng","spa"], "plda": {"iterations": 5}}"#,
    );
    let out = run(
        &["--config", "cfg_bad.json", "train", "--train", "data.tsv", "--chain", "chain.json", "--out", "bad.json"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("spa"), "error must name the language: {text}");
}

#[test]
fn score_cosine_identity_and_kind_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("emb.tsv"), "a\t0.6\t0.8\nb\t0.0\t1.0\n");
    write(&dir.path().join("models.tsv"), "m1\ta\n");
    write(&dir.path().join("trials.tsv"), "m1\ta\n");
    write(&dir.path().join("cfg.json"), r#"{"backend": "cosine"}"#);
    let out = run(
        &["--config", "cfg.json", "score", "--emb", "emb.tsv", "--models", "models.tsv", "--trials", "trials.tsv", "--out", "scores.tsv"],
        dir.path(),
    );
    assert_success(&out);
    let text = std::fs::read_to_string(dir.path().join("scores.tsv")).unwrap();
    assert_eq!(text, "model_id\ttest_segment_id\tscore\nm1\ta\t1\n");

    // plda backend pointed at a mixture file
    write(&dir.path().join("cfg2.json"), r#"{"backend": "plda"}"#);
    write(&dir.path().join("fake.json"), r#"{"components": [], "prior": []}"#);
    let out = run(
        &["--config", "cfg2.json", "score", "--emb", "emb.tsv", "--models", "models.tsv", "--trials", "trials.tsv", "--model", "fake.json", "--out", "x.tsv"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn score_cosine_cl_matches_logit_oracle() {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let (n_s, d) = (40, 3);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
    let mut k = DMatrix::zeros(n_s, d);
    for i in 0..n_s {
        for j in 0..d {
            k[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    for i in 0..n_s {
        let norm = k.row(i).norm();
        for j in 0..d {
            k[(i, j)] /= norm;
        }
    }
    let head = svbackend::logit::ClassifierHead::new(k, true).unwrap();
    head.save(&base.join("head.f32")).unwrap();

    // five trials over two models (one multi-session) and three segments
    write(
        &base.join("emb.tsv"),
        "e1\t1.0\t0.2\t-0.3\ne2\t0.8\t0.1\t-0.1\nt1\t0.9\t0.3\t-0.2\nt2\t-1.0\t0.5\t0.4\nt3\t0.2\t-0.7\t0.9\n",
    );
    write(&base.join("models.tsv"), "m1\te1,e2\nm2\te1\n");
    write(
        &base.join("trials.tsv"),
        "m1\tt1\nm1\tt2\nm2\tt1\nm2\tt3\nm1\tt3\n",
    );
    write(&base.join("cfg.json"), r#"{"backend": "cosine-cl"}"#);
    let out = run(
        &[
            "--config", "cfg.json", "score", "--emb", "emb.tsv", "--models", "models.tsv",
            "--trials", "trials.tsv", "--head", "head.f32", "--out", "scores.tsv",
        ],
        base,
    );
    assert_success(&out);

    // explicit high-dimensional oracle: cosine of K-projected logits, with
    // the head reloaded at f32 precision exactly as the CLI saw it
    let head = svbackend::logit::ClassifierHead::load(&base.join("head.f32")).unwrap();
    let emb = svbackend::io::load_embeddings(&base.join("emb.tsv"), svbackend::io::EmbeddingFormat::Tsv).unwrap();
    let logit = |id: &str| -> DVector<f64> {
        head.logits(&emb.row_vector(emb.position(id).unwrap())).unwrap()
    };
    let mean_logit = |ids: &[&str]| -> DVector<f64> {
        let mut sum = DVector::zeros(n_s);
        for id in ids {
            sum += logit(id);
        }
        sum / ids.len() as f64
    };
    let oracle = |model: &[&str], test: &str| -> f64 {
        let a = mean_logit(model);
        let b = logit(test);
        a.dot(&b) / (a.norm() * b.norm())
    };
    let expected = [
        oracle(&["e1", "e2"], "t1"),
        oracle(&["e1", "e2"], "t2"),
        oracle(&["e1"], "t1"),
        oracle(&["e1"], "t3"),
        oracle(&["e1", "e2"], "t3"),
    ];
    let text = std::fs::read_to_string(base.join("scores.tsv")).unwrap();
    let got: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(got.len(), 5);
    for (g, w) in got.iter().zip(&expected) {
        assert!((g - w).abs() < 1e-10, "cl score {g} vs oracle {w}");
    }
}

#[test]
fn normalize_passthrough_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("scores.tsv"),
        "model_id\ttest_segment_id\tscore\nm1\tx\t0.5\nm2\ty\t-1.25\n",
    );
    write(&dir.path().join("cfg.json"), r#"{"backend": "cosine"}"#);
    let out = run(
        &["--config", "cfg.json", "normalize", "--scores", "scores.tsv", "--out", "out.tsv"],
        dir.path(),
    );
    assert_success(&out);
    let a = std::fs::read(dir.path().join("scores.tsv")).unwrap();
    let b = std::fs::read(dir.path().join("out.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn normalize_snorm_matches_hand_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    // unit vectors: model m = (1,0); test t = (0,1); cohort c1=(1,0),
    // c2=(0,1), c3=(sqrt2/2, sqrt2/2), one segment per cohort speaker
    write(&dir.path().join("emb.tsv"), "e\t1.0\t0.0\nt\t0.0\t1.0\n");
    write(&dir.path().join("models.tsv"), "m\te\n");
    let s = std::f64::consts::FRAC_1_SQRT_2;
    write(
        &dir.path().join("cohort.tsv"),
        &format!("c1\t1.0\t0.0\nc2\t0.0\t1.0\nc3\t{s}\t{s}\n"),
    );
    write(
        &dir.path().join("cohort.meta.tsv"),
        "segment_id\tspeaker_id\tlanguage\tgender\tchannel\tdataset\nc1\ts1\tunk\tunk\tunk\tunk\nc2\ts2\tunk\tunk\tunk\tunk\nc3\ts3\tunk\tunk\tunk\tunk\n",
    );
    write(
        &dir.path().join("scores.tsv"),
        "model_id\ttest_segment_id\tscore\nm\tt\t0\n",
    );
    write(
        &dir.path().join("cfg.json"),
        r#"{"backend": "cosine", "snorm": {"enabled": true, "top_n": 3}}"#,
    );
    let out = run(
        &[
            "--config", "cfg.json", "normalize", "--scores", "scores.tsv", "--emb", "emb.tsv",
            "--models", "models.tsv", "--cohort-emb", "cohort.tsv", "--out", "out.tsv",
        ],
        dir.path(),
    );
    assert_success(&out);

    // hand arithmetic: cohort scores for both sides are {1, 0, sqrt2/2}
    let scores = [1.0f64, 0.0, s];
    let mean = scores.iter().sum::<f64>() / 3.0;
    let var = scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0;
    let sd = var.sqrt();
    let want = 0.5 * ((0.0 - mean) / sd + (0.0 - mean) / sd);

    let text = std::fs::read_to_string(dir.path().join("out.tsv")).unwrap();
    let got: f64 = text.lines().nth(1).unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
}

#[test]
fn normalize_channel_without_stats_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("scores.tsv"),
        "model_id\ttest_segment_id\tscore\tkey\ttrial_type\nm1\tx\t0.5\tunknown\ttel-tel\n",
    );
    write(
        &dir.path().join("cfg.json"),
        r#"{"backend": "cosine", "channel_norm": {"enabled": true}}"#,
    );
    let out = run(
        &["--config", "cfg.json", "normalize", "--scores", "scores.tsv", "--out", "out.tsv"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error_kind(&out), "config");
}

#[test]
fn eval_perfect_separation_and_det() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("scores.tsv"),
        "model_id\ttest_segment_id\tscore\tkey\ttrial_type\n\
         m1\ta\t2.0\ttarget\tunknown\n\
         m1\tb\t3.0\ttarget\tunknown\n\
         m2\tc\t0.0\tnontarget\tunknown\n\
         m2\td\t1.0\tnontarget\tunknown\n",
    );
    let out = run(
        &["eval", "--scores", "scores.tsv", "--det", "det.tsv"],
        dir.path(),
    );
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["eer"].as_f64().unwrap(), 0.0);
    assert_eq!(report["min_c"].as_f64().unwrap(), 0.0);
    assert_eq!(report["n_target"].as_u64().unwrap(), 2);

    let det = std::fs::read_to_string(dir.path().join("det.tsv")).unwrap();
    assert!(det.starts_with("threshold\tp_miss\tp_fa\n"));
    assert_eq!(det.lines().count(), 5); // header + 4 distinct scores
}

#[test]
fn eval_identical_distributions_gives_half() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("scores.tsv"),
        "model_id\ttest_segment_id\tscore\tkey\ttrial_type\n\
         m1\ta\t0.0\ttarget\tunknown\n\
         m1\tb\t1.0\ttarget\tunknown\n\
         m2\tc\t0.0\tnontarget\tunknown\n\
         m2\td\t1.0\tnontarget\tunknown\n",
    );
    let out = run(&["eval", "--scores", "scores.tsv"], dir.path());
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!((report["eer"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn diagnose_decomposition_and_missing_labels() {
    let dir = tempfile::tempdir().unwrap();
    synth_world(dir.path());
    let out = run(
        &["diagnose", "--emb", "data.tsv", "--out", "spectra.tsv"],
        dir.path(),
    );
    assert_success(&out);
    let text = std::fs::read_to_string(dir.path().join("spectra.tsv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "index\ttotal_eig\twithin_diag\tacross_diag");
    for line in lines {
        let f: Vec<f64> = line.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((f[1] + f[2] - f[0]).abs() < 1e-8, "decomposition violated: {line}");
    }

    // no metadata sidecar -> no speaker labels -> data error
    write(&dir.path().join("bare.tsv"), "a\t1.0\t0.0\nb\t0.5\t1.0\nc\t0.0\t1.0\n");
    let out = run(&["diagnose", "--emb", "bare.tsv", "--out", "x.tsv"], dir.path());
    assert_eq!(exit_code(&out), 2);
    assert_eq!(stderr_error_kind(&out), "data");
}

#[test]
fn scoring_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    synth_world(dir.path());
    write(
        &dir.path().join("cfg.json"),
        r#"{"recipe": "center,lda:4,ln", "backend": "plda", "plda": {"iterations": 5}}"#,
    );
    assert_success(&run(
        &["--config", "cfg.json", "fit-chain", "--train", "data.tsv", "--out", "chain.json"],
        dir.path(),
    ));
    assert_success(&run(
        &["--config", "cfg.json", "train", "--train", "data.tsv", "--chain", "chain.json", "--out", "model.json"],
        dir.path(),
    ));
    for threads in ["1", "2"] {
        assert_success(&run(
            &[
                "--config", "cfg.json", "--threads", threads, "score", "--emb", "data.tsv",
                "--models", "data.models.tsv", "--trials", "data.trials.tsv", "--chain",
                "chain.json", "--model", "model.json", "--out",
                &format!("scores{threads}.tsv"),
            ],
            dir.path(),
        ));
    }
    let a = std::fs::read(dir.path().join("scores1.tsv")).unwrap();
    let b = std::fs::read(dir.path().join("scores2.tsv")).unwrap();
    assert_eq!(a, b, "scores differ across thread counts");
}

#[test]
fn raw_format_round_trips_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("spec.json"), SYNTH_SPEC);
    assert_success(&run(
        &["--format", "raw", "synth", "--spec", "spec.json", "--out-prefix", "raw"],
        dir.path(),
    ));
    assert!(dir.path().join("raw.f32").is_file());
    assert!(dir.path().join("raw.json").is_file());
    assert!(dir.path().join("raw.ids").is_file());
    // scoring straight from the raw triple works
    write(&dir.path().join("cfg.json"), r#"{"backend": "cosine"}"#);
    let out = run(
        &[
            "--config", "cfg.json", "score", "--emb", "raw.f32", "--models", "raw.models.tsv",
            "--trials", "raw.trials.tsv", "--out", "s.tsv",
        ],
        dir.path(),
    );
    assert_success(&out);
}

#[test]
fn pre_factor_chain_feeds_mixture_pipeline() {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    synth_world(base);

    // a classifier head over the synthetic dim-8 embeddings
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
    let mut k = DMatrix::zeros(50, 8);
    for i in 0..50 {
        for j in 0..8 {
            k[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let head = svbackend::logit::ClassifierHead::new(k, false).unwrap();
    let factor = svbackend::logit::compact_factor(&head).unwrap();
    factor.save(&base.join("factor.json")).unwrap();

    write(
        &base.join("cfg.json"),
        r#"{"recipe": "center,lda:4,ln", "backend": "mixture", "languages": ["eng","cmn","yue"], "plda": {"iterations": 5}}"#,
    );
    // projected + length-normalized embeddings, then the usual recipe
    let out = run(
        &[
            "--config", "cfg.json", "fit-chain", "--train", "data.tsv", "--pre-factor",
            "factor.json", "--out", "chain.json",
        ],
        base,
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("linear_map (8 -> 8)"), "{stdout}");
    assert!(stdout.contains("length_norm (8 -> 8)"), "{stdout}");

    assert_success(&run(
        &["--config", "cfg.json", "train", "--train", "data.tsv", "--chain", "chain.json", "--out", "mix.json"],
        base,
    ));
    assert_success(&run(
        &[
            "--config", "cfg.json", "score", "--emb", "data.tsv", "--models", "data.models.tsv",
            "--trials", "data.trials.tsv", "--chain", "chain.json", "--model", "mix.json",
            "--out", "scores.tsv",
        ],
        base,
    ));
    let out = run(&["eval", "--scores", "scores.tsv"], base);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(report["eer"].as_f64().unwrap() < 0.5);
}

#[test]
fn config_unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("cfg.json"), r#"{"backend": "plda", "oops": true}"#);
    write(&dir.path().join("scores.tsv"), "model_id\ttest_segment_id\tscore\n");
    let out = run(
        &["--config", "cfg.json", "eval", "--scores", "scores.tsv"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error_kind(&out), "config");
}
