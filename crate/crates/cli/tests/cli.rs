use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltashare::evaluate::Report;
use deltashare_cli::{render, sha256_hex};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deltashare"));
    c.env_remove(deltashare_cli::THREADS_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

const QUICK: &str = "base_steps = 40\nstage1_steps = 40\nstage2_steps = 20\nstage3_steps = 5\nthreshold_points = 4\n\
                     lambda_w = 5e-5\nlambda_a1 = 1e-3\n";

fn small_data(dir: &TempDir, name: &str, seed: &str) -> String {
    let out = p(dir, name);
    ok(&["generate", "--out", &out, "--seed", seed, "--tasks", "2", "--clips", "3", "--frames", "5", "--tokens", "6", "--patch-dim", "5"]);
    out
}

/// Generates, calibrates and plans; returns (data, bundle, plan) paths.
fn pipeline(dir: &TempDir) -> (String, String, String) {
    let data = small_data(dir, "d.bin", "1");
    let cfg = p(dir, "quick.toml");
    fs::write(&cfg, QUICK).unwrap();
    let bundle = p(dir, "m.bin");
    ok(&["calibrate", "--data", &data, "--config", &cfg, "--out", &bundle, "--report", &p(dir, "calib.json")]);
    let plan = p(dir, "plan.json");
    ok(&["plan", "--bundle", &bundle, "--data", &data, "--keyframe-period", "3", "--out", &plan]);
    (data, bundle, plan)
}

#[test]
fn generate_digest_is_stable_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = ok(&["generate", "--out", &p(&dir, "a"), "--seed", "9"]);
    let b = ok(&["generate", "--out", &p(&dir, "b"), "--seed", "9"]);
    let c = ok(&["generate", "--out", &p(&dir, "c"), "--seed", "10"]);
    let digest = |s: &str| s.split_whitespace().next().unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
    assert_eq!(fs::read(p(&dir, "a")).unwrap(), fs::read(p(&dir, "b")).unwrap());
    assert_eq!(digest(&a), sha256_hex(&fs::read(p(&dir, "a")).unwrap()));
}

#[test]
fn pipeline_outputs_are_consistent() {
    let dir = TempDir::new().unwrap();
    let (data, bundle, plan) = pipeline(&dir);
    let calib: serde_json::Value = serde_json::from_slice(&fs::read(p(&dir, "calib.json")).unwrap()).unwrap();
    assert_eq!(calib["run"]["bundle_sha256"], sha256_hex(&fs::read(&bundle).unwrap()));
    assert_eq!(calib["run"]["dataset_sha256"], sha256_hex(&fs::read(&data).unwrap()));

    let out = p(&dir, "r.json");
    let text = ok(&["run", "--bundle", &bundle, "--data", &data, "--plan", &plan, "--out", &out]);
    let report = Report::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    render::check_consistency(&report).unwrap();
    assert_eq!(report.plan.keyframe_period, 3);
    // the planning clip is held out of the evaluation
    assert_eq!(report.run["held_out_clip"], 0);
    assert_eq!(report.clips, 2);
    assert_eq!(report.run["plan_source"]["plan_sha256"], sha256_hex(&fs::read(&plan).unwrap()));
    assert_eq!(text, render::render_text(&report));

    assert_eq!(ok(&["report", "--input", &out]), text);
    let json = ok(&["report", "--input", &out, "--format", "json"]);
    assert_eq!(json, fs::read_to_string(&out).unwrap());
    let csv = ok(&["report", "--input", &out, "--format", "csv"]);
    // header plus one row per task, layer and mode
    assert_eq!(csv.lines().count(), 1 + 3 * report.tasks.len() * report.tasks[0].layers.len());

    let saved = p(&dir, "r.txt");
    assert_eq!(ok(&["report", "--input", &out, "--out", &saved]), "");
    assert_eq!(fs::read_to_string(&saved).unwrap(), text);
}

#[test]
fn strategy_flags_build_plans() {
    let dir = TempDir::new().unwrap();
    let (data, bundle, _) = pipeline(&dir);
    let out = p(&dir, "r.json");
    for (strategy, extra) in [("dense", vec![]), ("task-only", vec![]), ("combined", vec!["--boundaries", "1"])] {
        let mut args = vec!["run", "--bundle", &bundle, "--data", &data, "--strategy", strategy, "--out", &out];
        args.extend(extra);
        ok(&args);
        let r = Report::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
        if strategy == "dense" {
            assert_eq!(r.multiplies_vs_dense.numerator - attention(&r), r.multiplies_vs_dense.denominator - attention(&r));
        }
    }
    let missing = run(&["run", "--bundle", &bundle, "--data", &data, "--out", &out]);
    assert_eq!(code(&missing), 2);
    let wrong = run(&["run", "--bundle", &bundle, "--data", &data, "--boundaries", "1,1", "--out", &out]);
    assert_eq!(code(&wrong), 2);
}

fn attention(r: &Report) -> u64 {
    r.tasks.iter().map(|t| t.attention.multiplies).sum()
}

#[test]
fn period_one_reports_single_offset() {
    let dir = TempDir::new().unwrap();
    let (data, bundle, plan) = pipeline(&dir);
    let out = p(&dir, "r.json");
    ok(&["run", "--bundle", &bundle, "--data", &data, "--plan", &plan, "--keyframe-period", "1", "--out", &out]);
    let r = Report::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.offsets.len(), 1);
    assert_eq!(r.offsets[0].offset, 0);
    assert_eq!(r.offsets[0].multiplies, r.total_multiplies);
}

#[test]
fn plan_from_other_data_keeps_every_clip() {
    let dir = TempDir::new().unwrap();
    let (_, bundle, plan) = pipeline(&dir);
    let other = small_data(&dir, "other.bin", "6");
    let out = p(&dir, "r.json");
    ok(&["run", "--bundle", &bundle, "--data", &other, "--plan", &plan, "--out", &out]);
    let r = Report::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.clips, 3);
    assert!(r.run["held_out_clip"].is_null());

    let single = p(&dir, "single.bin");
    ok(&["generate", "--out", &single, "--seed", "1", "--tasks", "2", "--clips", "1", "--frames", "5", "--tokens", "6", "--patch-dim", "5"]);
    let one_plan = p(&dir, "one.json");
    ok(&["plan", "--bundle", &bundle, "--data", &single, "--out", &one_plan]);
    let out = run(&["run", "--bundle", &bundle, "--data", &single, "--plan", &one_plan, "--out", &p(&dir, "x")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir, "d.bin", "2");
    let cfg = p(&dir, "quick.toml");
    fs::write(&cfg, QUICK).unwrap();
    let mut digests = Vec::new();
    for threads in ["1", "3"] {
        let bundle = p(&dir, &format!("m{threads}.bin"));
        let out = bin()
            .env(deltashare_cli::THREADS_ENV, threads)
            .args(["calibrate", "--data", &data, "--config", &cfg, "--out", &bundle, "--report", &p(&dir, "c.json")])
            .output()
            .unwrap();
        assert!(out.status.success());
        digests.push(fs::read(&bundle).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn config_errors_carry_line_and_exit_two() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir, "d.bin", "3");
    let cfg = p(&dir, "bad.toml");
    let calibrate = |cfg: &str| {
        run(&["calibrate", "--data", &data, "--config", cfg, "--out", &p(&dir, "m"), "--report", &p(&dir, "r")])
    };

    fs::write(&cfg, "seed = 1\nlayers = 2\nlambda_w = = 3\n").unwrap();
    let out = calibrate(&cfg);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:3:"), "{err}");

    fs::write(&cfg, "seed = 1\n\nno_such_knob = 3\n").unwrap();
    let out = calibrate(&cfg);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:3:1"));

    fs::write(&cfg, "dim = 0\n").unwrap();
    assert_eq!(code(&calibrate(&cfg)), 2);

    assert_eq!(code(&run(&["generate"])), 2);
    assert_eq!(code(&run(&["run", "--strategy", "sideways"])), 2);
}

#[test]
fn file_errors_exit_three() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir, "d.bin", "4");
    let missing = p(&dir, "nope.bin");
    let out = run(&["plan", "--bundle", &missing, "--data", &data, "--out", &p(&dir, "x")]);
    assert_eq!(code(&out), 3);

    let garbage = p(&dir, "garbage.bin");
    fs::write(&garbage, b"DLTSHR01 but not really").unwrap();
    assert_eq!(code(&run(&["plan", "--bundle", &garbage, "--data", &data, "--out", &p(&dir, "x")])), 3);

    let bytes = fs::read(&data).unwrap();
    let cut = p(&dir, "cut.bin");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&["calibrate", "--data", &cut, "--out", &p(&dir, "m"), "--report", &p(&dir, "r")]);
    assert_eq!(code(&out), 3);

    let empty = p(&dir, "empty.json");
    fs::write(&empty, "").unwrap();
    let out = run(&["report", "--input", &empty]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty report"));
    fs::write(&empty, "{\"not\": \"a report\"}").unwrap();
    assert_eq!(code(&run(&["report", "--input", &empty])), 3);
}

#[test]
fn divergence_exits_four() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir, "d.bin", "5");
    let cfg = p(&dir, "hot.toml");
    fs::write(&cfg, "learning_rate = 1e6\nbase_steps = 50\n").unwrap();
    let out = run(&["calibrate", "--data", &data, "--config", &cfg, "--out", &p(&dir, "m"), "--report", &p(&dir, "r")]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn fixture_report() -> Report {
    Report::from_json(&fs::read_to_string(fixture("report.json")).unwrap()).unwrap()
}

#[test]
fn text_render_matches_golden() {
    let report = fixture_report();
    render::check_consistency(&report).unwrap();
    let golden = fs::read_to_string(fixture("report.txt")).unwrap();
    assert_eq!(render::render_text(&report), golden);
    let golden = fs::read_to_string(fixture("report.csv")).unwrap();
    assert_eq!(render::render_csv(&report), golden);
}

#[test]
fn tampered_reports_fail_the_consistency_check() {
    let good = fixture_report();
    let tampers: [fn(&mut Report); 8] = [
        |r| r.tasks[1].layers[0].task.multiplies += 1,
        |r| r.tasks[0].multiplies_vs_dense.percent += 0.5,
        |r| r.tasks[0].attention.multiplies += 1,
        |r| r.total_multiplies -= 1,
        |r| r.offsets[0].multiplies += 1,
        |r| r.offset_average_percent = 1.0,
        |r| r.storage.params[1].value += 1,
        |r| r.offsets[1].dense_multiplies += 1,
    ];
    for (i, t) in tampers.iter().enumerate() {
        let mut r = good.clone();
        t(&mut r);
        assert!(render::check_consistency(&r).is_err(), "tamper {i} passed");
    }

    let dir = TempDir::new().unwrap();
    let mut r = good.clone();
    r.total_dense_multiplies += 10;
    let path = p(&dir, "t.json");
    fs::write(&path, r.to_json().unwrap()).unwrap();
    let out = run(&["report", "--input", &path]);
    assert_eq!(code(&out), 3);
}
