use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_traffic-cl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p.as_ref()).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Short windows and small models so every command finishes quickly.
fn tiny() -> Value {
    json!({
        "t_h": 1.0, "t_f": 1.0, "frame_rate": 5.0, "n_max": 4, "stride": 5,
        "epochs": 2, "batch_size": 16, "lr": 0.01,
        "mdn_k": 2, "mdn_hidden": 8, "mdn_epochs": 5, "min_cases_per_component": 10,
        "n_mc": 20, "max_conditions": 50
    })
}

fn write_config(dir: &Path, name: &str, extra: Value) -> PathBuf {
    let mut cfg = tiny();
    cfg.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn synth(dir: &Path, cfg: &Path, family: &str, id: u32, seed: u64) -> PathBuf {
    let out = dir.join(format!("{family}_{id}_{seed}"));
    ok(&[
        "synth",
        "--config",
        s(cfg),
        "--family",
        family,
        "--scenario-id",
        &id.to_string(),
        "--seed",
        &seed.to_string(),
        "--n-vehicles",
        "25",
        "--duration-s",
        "40",
        "--tracks-csv",
        "--out",
        s(&out),
    ]);
    out
}

fn synthetic_sequence() -> Value {
    json!([
        {"family": "straight_flow", "seed": 1, "n_vehicles": 20, "duration_s": 40.0},
        {"family": "merge", "seed": 2, "n_vehicles": 20, "duration_s": 40.0},
        {"family": "roundabout", "seed": 3, "n_vehicles": 20, "duration_s": 40.0}
    ])
}

#[test]
fn synth_is_deterministic_and_ingest_reads_its_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", json!({}));
    let a = synth(dir.path(), &cfg, "merge", 0, 4);
    let manifest = fs::read(a.join("manifest.json")).unwrap();
    fs::remove_dir_all(&a).unwrap();
    let a = synth(dir.path(), &cfg, "merge", 0, 4);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), manifest);
    assert!(a.join("interaction.json").is_file());
    assert!(a.join("config.json").is_file());

    let csv = a.join("tracks.csv");
    let ingested = dir.path().join("ingested");
    let o = ok(&["ingest", "--config", s(&cfg), "--csv", s(&csv), "--out", s(&ingested)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("samples"));
    let m1 = fs::read(ingested.join("manifest.json")).unwrap();
    ok(&["ingest", "--config", s(&cfg), "--csv", s(&csv), "--out", s(&ingested)]);
    assert_eq!(fs::read(ingested.join("manifest.json")).unwrap(), m1);
    // the written CSV round-trips to the same samples
    let from_csv = read_json(ingested.join("samples.json"));
    let direct = read_json(a.join("samples.json"));
    assert_eq!(from_csv.as_array().unwrap().len(), direct.as_array().unwrap().len());
}

#[test]
fn ingest_schema_errors_exit_2_and_name_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "track_id,frame_id,timestamp_ms,agent_type,x\n1,0,0,car,0.0\n").unwrap();
    let o = run(&["ingest", "--csv", s(&csv), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("`y`") && err.contains("bad.csv"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", json!({"learning_rate": 1.0}));
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
    let o = run(&["train", "--lr", "-1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_guard_exits_3_with_the_required_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", json!({"mdn_k": 20, "min_cases_per_component": 300}));
    let a = synth(dir.path(), &cfg, "straight_flow", 0, 1);
    let b = synth(dir.path(), &cfg, "roundabout", 1, 2);
    let out = dir.path().join("div");
    let o = run(&["measure-divergence", "--config", s(&cfg), "--scenario", s(&a), "--scenario", s(&b), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("6000"), "{}", stderr(&o));
}

#[test]
fn divergence_orders_scenarios_and_self_divergence_is_below_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", json!({"mdn_epochs": 20}));
    let straight = synth(dir.path(), &cfg, "straight_flow", 0, 1);
    let straight_copy = synth(dir.path(), &cfg, "straight_flow", 1, 1);
    let straight_other = synth(dir.path(), &cfg, "straight_flow", 1, 9);
    let round = synth(dir.path(), &cfg, "roundabout", 1, 2);
    let measure = |b: &Path, name: &str| -> Value {
        let out = dir.path().join(name);
        ok(&["measure-divergence", "--config", s(&cfg), "--scenario", s(&straight), "--scenario", s(b), "--out", s(&out)]);
        read_json(out.join("divergence.json"))
    };
    let copy = measure(&straight_copy, "copy");
    let w = copy["weighted"][0][1].as_f64().unwrap();
    assert!(w <= copy["noise_bound"][0][1].as_f64().unwrap(), "{w}");
    let same_family = measure(&straight_other, "same")["weighted"][0][1].as_f64().unwrap();
    let other_family = measure(&round, "other")["weighted"][0][1].as_f64().unwrap();
    assert!(other_family > same_family, "{other_family} vs {same_family}");
}

#[test]
fn dgsm_train_writes_the_artifact_contract_and_report_tabulates_it() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synthetic_sequence();
    let dgsm_cfg = write_config(dir.path(), "dgsm.json", json!({"mode": "dgsm", "scenarios": seq}));
    let dgsm = dir.path().join("dgsm");
    ok(&["train", "--config", s(&dgsm_cfg), "--out", s(&dgsm)]);
    let echoed = read_json(dgsm.join("config.json"));
    assert_eq!(echoed["mode"], "dgsm");
    assert_eq!(echoed["memory_cl"], 3500);
    for (i, name) in ["straight_flow", "merge", "roundabout"].iter().enumerate() {
        let phase = dgsm.join(format!("phase_{i:02}_{name}"));
        for f in ["checkpoint.json", "history.csv", "eval.json", "phase.json"] {
            assert!(phase.join(f).is_file(), "{}", phase.join(f).display());
        }
        assert_eq!(phase.join("plan.json").is_file(), i > 0);
        assert_eq!(phase.join("divergence.json").is_file(), i > 0);
        let eval = read_json(phase.join("eval.json"));
        assert_eq!(eval["scenarios"].as_array().unwrap().len(), i + 1);
    }

    // identical configuration, identical run summary
    let again = dir.path().join("dgsm_again");
    ok(&["train", "--config", s(&dgsm_cfg), "--out", s(&again)]);
    assert_eq!(fs::read(dgsm.join("run.json")).unwrap(), fs::read(again.join("run.json")).unwrap());

    let gsm_cfg = write_config(dir.path(), "gsm.json", json!({"mode": "gsm", "scenarios": seq}));
    let gsm = dir.path().join("gsm");
    ok(&["train", "--config", s(&gsm_cfg), "--out", s(&gsm)]);

    let single = dir.path().join("report_single");
    ok(&["report", "--run", s(&dgsm), "--out", s(&single)]);
    let ade = fs::read_to_string(single.join("ade.csv")).unwrap();
    assert_eq!(ade.lines().next().unwrap(), "scenario,dgsm");
    assert!(ade.lines().last().unwrap().starts_with("average,"));

    let both = dir.path().join("report_both");
    ok(&["report", "--run", s(&gsm), "--run", s(&dgsm), "--out", s(&both)]);
    let ade = fs::read_to_string(both.join("ade.csv")).unwrap();
    assert_eq!(ade.lines().next().unwrap(), "scenario,gsm,dgsm");
    assert_eq!(ade.lines().count(), 5);
    let report = read_json(both.join("report.json"));
    let plan_total = |dir: &Path| -> u64 {
        (1..3)
            .map(|i| {
                let name = ["straight_flow", "merge", "roundabout"][i];
                let plan = read_json(dir.join(format!("phase_{i:02}_{name}")).join("plan.json"));
                plan["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>()
            })
            .sum()
    };
    let want = plan_total(&dgsm) as f64 / plan_total(&gsm) as f64;
    assert!((report["cost_ratio"].as_f64().unwrap() - want).abs() < 1e-12);
    assert!(report["runs"][0]["config"].is_object());

    let repeat = dir.path().join("report_repeat");
    ok(&["report", "--run", s(&gsm), "--run", s(&dgsm), "--out", s(&repeat)]);
    for f in ["ade.csv", "fde.csv", "forgetting.csv", "cost.csv", "report.json"] {
        assert_eq!(fs::read(both.join(f)).unwrap(), fs::read(repeat.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn joint_runs_one_phase_and_vanilla_matches_gsm_on_one_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let joint_cfg = write_config(dir.path(), "joint.json", json!({"mode": "joint", "scenarios": synthetic_sequence()}));
    let joint = dir.path().join("joint");
    ok(&["train", "--config", s(&joint_cfg), "--out", s(&joint)]);
    let run_json = read_json(joint.join("run.json"));
    assert_eq!(run_json["phases"].as_array().unwrap().len(), 1);
    assert_eq!(run_json["evals"][0]["scenarios"].as_array().unwrap().len(), 3);

    let one = json!([{"family": "merge", "seed": 5, "n_vehicles": 20, "duration_s": 40.0}]);
    let mut finals = Vec::new();
    for mode in ["vanilla", "gsm"] {
        let cfg = write_config(dir.path(), &format!("{mode}.json"), json!({"mode": mode, "scenarios": one}));
        let out = dir.path().join(mode);
        ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
        finals.push(fs::read(out.join("phase_00_merge").join("checkpoint.json")).unwrap());
    }
    assert_eq!(finals[0], finals[1]);
}

#[test]
fn evaluate_reproduces_the_phase_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", json!({}));
    let data = synth(dir.path(), &cfg, "intersection_stop", 0, 3);
    let train = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--mode", "vanilla", "--scenario", s(&data), "--out", s(&train)]);
    let phase = train.join("phase_00_intersection_stop");
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&phase.join("checkpoint.json")),
        "--scenario",
        s(&data),
        "--out",
        s(&out),
    ]);
    let got = read_json(out.join("eval.json"));
    let want = read_json(phase.join("eval.json"));
    assert_eq!(got["scenarios"][0]["ade"], want["scenarios"][0]["ade"]);
    assert_eq!(got["scenarios"][0]["fde"], want["scenarios"][0]["fde"]);

    let mismatch = run(&[
        "evaluate",
        "--checkpoint",
        s(&phase.join("checkpoint.json")),
        "--scenario",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn report_without_run_is_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--run", s(dir.path()), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MissingArtifacts"));
}
