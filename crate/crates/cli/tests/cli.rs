use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const GOLDEN: &str = "0x600756fefe5b005b600160018091018091901015601b57600080fd5b600556";

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A scratch copy of a fixture directory.
fn fixture(name: &str) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let dir = tmp.path().join(name);
    copy_dir(&src, &dir);
    (tmp, dir)
}

fn bytepatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bytepatch")).args(args).output().unwrap()
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn golden_pipeline_succeeds() {
    let (_tmp, dir) = fixture("add");
    let out = bytepatch(&["pipeline", "--json", "--config", path(&dir.join("bytepatch.toml"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&out);
    assert_eq!(v["patched_code"], GOLDEN);
    assert_eq!(v["counts"]["identical"], 1);
    assert_eq!(v["mean_gas_overhead"], 58.0);
    let hex = fs::read_to_string(dir.join("out/patched.hex")).unwrap();
    assert_eq!(hex.trim(), GOLDEN);
    let plan: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/deploy_plan.json")).unwrap()).unwrap();
    assert_eq!(plan["kind"], "fresh");
    assert_eq!(plan["transactions"].as_array().unwrap().len(), 2);
    assert!(!dir.join("out/failure.json").exists());
}

#[test]
fn pipeline_is_idempotent() {
    let (_tmp, dir) = fixture("add");
    let config = dir.join("bytepatch.toml");
    let read_all = |d: &Path| {
        let mut files: Vec<_> = fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    assert_eq!(bytepatch(&["pipeline", "-c", path(&config)]).status.code(), Some(0));
    let first = read_all(&dir.join("out"));
    assert_eq!(bytepatch(&["pipeline", "-c", path(&config)]).status.code(), Some(0));
    assert_eq!(read_all(&dir.join("out")), first);
    assert_eq!(first.len(), 4);
}

#[test]
fn unsupported_class_has_its_own_exit_code() {
    let (_tmp, dir) = fixture("add");
    let report = dir.join("report.json");
    let text = fs::read_to_string(&report).unwrap().replace("int_add_overflow", "reentrancy");
    fs::write(&report, text).unwrap();
    let out = bytepatch(&["pipeline", "--json", "-c", path(&dir.join("bytepatch.toml"))]);
    assert_eq!(out.status.code(), Some(10));
    let v = json_of(&out);
    assert_eq!(v["kind"], "template");
    let failure: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/failure.json")).unwrap()).unwrap();
    assert_eq!(failure["exit_code"], 10);
}

#[test]
fn broken_template_names_the_transaction() {
    let (_tmp, dir) = fixture("store");
    let out = bytepatch(&["pipeline", "--json", "-c", path(&dir.join("bytepatch.toml"))]);
    assert_eq!(out.status.code(), Some(20), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json_of(&out);
    assert!(v["error"].as_str().unwrap().contains("benign-1"));
    let failure: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/failure.json")).unwrap()).unwrap();
    let tx = &failure["details"]["divergent_transactions"][0];
    assert_eq!(tx["id"], "benign-1");
    assert_eq!(tx["verdict"], "behavioral_divergence");
    assert_eq!(failure["details"]["stage"], "test");
    // The correct template passes the same fixture.
    fs::remove_dir_all(dir.join("templates")).unwrap();
    let out = bytepatch(&["pipeline", "--json", "-c", path(&dir.join("bytepatch.toml")), "--templates", path(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!dir.join("out/failure.json").exists());
}

#[test]
fn single_steps_chain() {
    let (_tmp, dir) = fixture("add");
    let patched = dir.join("p.hex");
    let summary = dir.join("s.json");
    let out = bytepatch(&[
        "patch",
        "--code",
        path(&dir.join("code.hex")),
        "--report",
        path(&dir.join("report.json")),
        "-o",
        path(&patched),
        "--summary",
        path(&summary),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("+58 gas per traversal"));
    assert_eq!(fs::read_to_string(&patched).unwrap().trim(), GOLDEN);

    let report = dir.join("r.json");
    let out = bytepatch(&[
        "test",
        "--json",
        "--original",
        path(&dir.join("code.hex")),
        "--patched",
        path(&patched),
        "--rewrite",
        path(&summary),
        "--world",
        path(&dir.join("world.json")),
        "-o",
        path(&report),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["transactions"][0]["patched_gas"], 68);
    assert!(report.exists());

    let out = bytepatch(&["disasm", "--json", path(&patched)]);
    let v = json_of(&out);
    assert_eq!(v["instructions"][0]["op"], "PUSH1");
    assert_eq!(v["instructions"][0]["operand"], "0x07");

    let out = bytepatch(&[
        "deploy-plan",
        "--json",
        path(&patched),
        "--owner",
        "0x000000000000000000000000000000000000000e",
        "--nonce",
        "4",
        "--proxy",
        "0x00000000000000000000000000000000000000f0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["kind"], "upgrade");
    assert_eq!(v["transactions"][1]["id"], "switchover");
}

#[test]
fn unpatched_code_misses_the_attack() {
    let (_tmp, dir) = fixture("add");
    let code = dir.join("code.hex");
    let out = bytepatch(&[
        "test",
        "--original",
        path(&code),
        "--patched",
        path(&code),
        "--world",
        path(&dir.join("world.json")),
        "--known-attack",
        "call",
    ]);
    assert_eq!(out.status.code(), Some(21));
}

#[test]
fn input_and_usage_errors() {
    let out = bytepatch(&["disasm", "/nonexistent/code.hex"]);
    assert_eq!(out.status.code(), Some(3));
    let out = bytepatch(&["pipeline", "--code", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(3));
    let out = bytepatch(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_block_is_reported() {
    let (_tmp, dir) = fixture("add");
    fs::write(dir.join("code.hex"), "600160015b015b00").unwrap();
    let report = dir.join("report.json");
    fs::write(&report, fs::read_to_string(&report).unwrap().replace("\"pc\": 4", "\"pc\": 5")).unwrap();
    let out = bytepatch(&["pipeline", "-c", path(&dir.join("bytepatch.toml"))]);
    assert_eq!(out.status.code(), Some(15));
}

#[test]
fn unreachable_rpc_is_a_fetch_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let tmp = tempfile::tempdir().unwrap();
    let out = bytepatch(&[
        "fetch",
        "--rpc",
        &url,
        "--address",
        "0x00000000000000000000000000000000000000cc",
        "--from",
        "1",
        "--to",
        "2",
        "--attempts",
        "1",
        "--no-cache",
        "-o",
        path(&tmp.path().join("txs.json")),
    ]);
    assert_eq!(out.status.code(), Some(31));
    assert!(!tmp.path().join("txs.json").exists());
}
