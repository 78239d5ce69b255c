use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpsuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpsuq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn schedule_csv_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpsuq"))
        .current_dir(dir.path())
        .args(["schedule", "--cycles", "3", "--cycle-len", "400", "--csv", "-"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,cycle,t_c,lr");
    assert_eq!(lines.len(), 1201);
    let lr1: f64 = lines[1].strip_prefix("1,1,1,").unwrap().parse().unwrap();
    assert!((lr1 - (0.01 + 0.09 * (1.0f64 - 1.0 / 320.0).powf(0.9))).abs() < 1e-15);
    assert_eq!(lines[320], "320,1,320,0.01");
    assert!(dir.path().join("run.json").is_file());
}

#[test]
fn schedule_plan_json() {
    let dir = tempfile::tempdir().unwrap();
    let plan = path(dir.path(), "plan.json");
    let csv = path(dir.path(), "lr.csv");
    let out = mpsuq(&["schedule", "--csv", &csv, "--plan", &plan]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    let epochs: Vec<u64> = v["epochs"].as_array().unwrap().iter().map(|e| e.as_u64().unwrap()).collect();
    assert_eq!(epochs.len(), 15);
    assert_eq!(&epochs[..5], &[44, 48, 52, 56, 60]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    for d in [&a, &b] {
        let out = mpsuq(&["synth", "--out", d, "--seed", "42", "--n-train", "3", "--n-val", "1", "--n-test", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let digest = |d: &str| {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(Path::new(d).join("dataset.json")).unwrap()).unwrap();
        v["digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest(&a), digest(&b));
    for sub in ["images", "masks"] {
        for entry in fs::read_dir(Path::new(&a).join(sub)).unwrap() {
            let p = entry.unwrap().path();
            let q = Path::new(&b).join(sub).join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        }
    }
}

#[test]
fn exit_codes_and_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mpsuq(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mpsuq(&["schedule", "--bogus"]).status.code(), Some(2));
    let out = mpsuq(&["schedule", "--lr-min", "0.5", "--csv", &path(dir.path(), "x.csv")]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
    let out = mpsuq(&["eval", "--pred", &path(dir.path(), "none"), "--gt", &path(dir.path(), "none"), "--out", "-"]);
    assert_eq!(out.status.code(), Some(4));
    let out = mpsuq(&["--threads", "0", "schedule", "--csv", &path(dir.path(), "y.csv")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn threads_env_fallback_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "s.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_mpsuq"))
        .env("MPSUQ_THREADS", "3")
        .args(["schedule", "--csv", &csv])
        .output()
        .unwrap();
    assert!(out.status.success());
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["threads"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_mpsuq"))
        .env("MPSUQ_THREADS", "many")
        .args(["schedule", "--csv", &csv])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn small_pipeline_and_eval_on_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s| path(dir.path(), s);
    let ok = |args: &[&str]| {
        let out = mpsuq(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["synth", "--out", &p("data"), "--n-train", "4", "--n-val", "1", "--n-test", "2", "--image-size", "24"]);
    ok(&["train", "--data", &p("data"), "--out", &p("run"), "--cycles", "2", "--cycle-len", "10", "--sample-window", "4", "--sample-stride", "2"]);
    ok(&["infer", "--run", &p("run"), "--data", &p("data"), "--out", &p("inf"), "--split", "val"]);
    ok(&["eval", "--pred", &p("data"), "--gt", &p("data"), "--out", &p("self")]);
    ok(&["calibrate", "--infer", &p("inf"), "--gt", &p("data"), "--out", &p("cal"), "--bins", "5"]);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoints"].as_array().unwrap().len(), 4);
    for f in ["mean.npy", "mask.npy", "std.npy", "entropy.npy", "std.pgm", "entropy.pgm"] {
        assert!(dir.path().join("inf/0004").join(f).is_file(), "{f}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("self/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["mdice"], 1.0);
    assert_eq!(m["summary"]["miou"], 1.0);
    assert_eq!(m["summary"]["mpa"], 1.0);
    assert_eq!(m["summary"]["mhd95"], 0.0);
    assert_eq!(m["summary"]["image_count"], 7);
    let csv = fs::read_to_string(dir.path().join("cal/reliability_std.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let uce: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cal/uce.json")).unwrap()).unwrap();
    assert_eq!(uce[0]["measure"], "std");
    assert_eq!(uce[1]["measure"], "entropy");
    assert_eq!(uce[0]["total_pixels"], 24 * 24);

    // rerunning a stage reproduces its outputs byte for byte
    ok(&["infer", "--run", &p("run"), "--data", &p("data"), "--out", &p("inf2"), "--split", "val"]);
    for f in ["mean.npy", "std.npy", "entropy.npy", "mask.npy"] {
        assert_eq!(
            fs::read(dir.path().join("inf/0004").join(f)).unwrap(),
            fs::read(dir.path().join("inf2/0004").join(f)).unwrap()
        );
    }
}
