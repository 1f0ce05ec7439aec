use std::process::Command;

use disagg_bench::history_io;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_disagg-bench"))
}

const SMALL: &[&str] = &["--keys", "2000", "--txns", "2000"];

#[test]
fn clean_run_exits_zero_and_prints_json_lines() {
    let out = bench()
        .args(SMALL)
        .args(["--workload", "smallbank", "--out", "json", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let run = &lines[0];
    assert_eq!(run["record"], "run");
    assert_eq!(run["workload"], "smallbank");
    assert_eq!(run["checker"]["passed"], true);
    assert_eq!(run["balance_drift"], 0);
    let attempted = run["attempted"].as_u64().unwrap();
    assert_eq!(attempted, run["committed"].as_u64().unwrap() + run["aborted"].as_u64().unwrap());
    let aborts: u64 = run["aborts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(aborts, run["aborted"].as_u64().unwrap());
    assert_eq!(lines.iter().filter(|l| l["record"] == "nic").count(), 6);
}

#[test]
fn csv_and_table_outputs() {
    let csv = bench().args(SMALL).args(["--out", "csv"]).output().unwrap();
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("metric,value\n"));
    assert!(text.lines().any(|l| l.starts_with("throughput,")));
    let table = bench().args(SMALL).output().unwrap();
    assert!(String::from_utf8(table.stdout).unwrap().contains("checker"));
}

#[test]
fn bad_values_name_the_field() {
    for (flag, v, field) in [("--zipf", "-1", "zipf"), ("--rw-ratio", "2", "rw-ratio"), ("--crash", "cn1@5", "crash"), ("--mode", "x", "mode")] {
        let out = bench().args(SMALL).arg(format!("{flag}={v}")).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{flag} {v}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(field), "{flag}");
    }
}

#[test]
fn config_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "# same as the flags below\nworkload = kvs\nkeys = 2000\ntxns = 2000\nrw-ratio = 0.7\nzipf = 0.5\nseed = 9\nout = csv\n",
    )
    .unwrap();
    let a = bench().arg("--config").arg(&cfg).output().unwrap();
    let b = bench()
        .args(SMALL)
        .args(["--rw-ratio", "0.7", "--zipf", "0.5", "--seed", "9", "--out", "csv"])
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn history_dump_and_offline_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.bin");
    let out = bench().args(SMALL).arg("--history").arg(&path).output().unwrap();
    assert!(out.status.success());

    let dump = bench().arg("--dump-history").arg(&path).output().unwrap();
    assert!(dump.status.success());
    assert!(String::from_utf8(dump.stdout).unwrap().lines().count() > 2000);

    let ok = bench().arg("--check-history").arg(&path).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));

    // make a reader see a version nobody wrote
    let mut h = history_io::decode(&std::fs::read(&path).unwrap()).unwrap();
    let rec = h
        .records
        .iter_mut()
        .find(|r| r.committed() && r.read_only && !r.ops.is_empty())
        .unwrap();
    if let disagg_txn::txn::history::OpKind::Read { version } = &mut rec.ops[0].kind {
        *version += 1;
    }
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, history_io::encode(&h)).unwrap();
    let fail = bench().arg("--check-history").arg(&bad).output().unwrap();
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("DirtyRead"));

    std::fs::write(&bad, b"not a history").unwrap();
    let garbage = bench().arg("--check-history").arg(&bad).output().unwrap();
    assert_eq!(garbage.status.code(), Some(2));
}

#[test]
fn crash_flag_runs_recovery() {
    let out = bench()
        .args(["--keys", "2000", "--duration", "30", "--crash", "cn:1@5", "--out", "json"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("\"record\":\"recovery\"")).count(), 1);
}
