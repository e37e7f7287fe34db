use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_keyshard");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(["--state-dir", "state"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn init(dir: &Path) {
    ok(dir, &["init-network", "--profile", "test", "--seed", "9", "--clock", "1700000000"]);
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

fn transcript(dir: &Path) -> String {
    init(dir);
    let mut out = String::new();
    for args in [
        &["signup", "--user", "alice"][..],
        &["signin", "--user", "alice"],
        &["sign", "--user", "alice", "--digest-hex", &"11".repeat(32)],
        &["export-seed", "--user", "alice", "--reveal"],
        &["derive", "--user", "alice", "--path", "m/44'/60'/0'/0/0"],
        &["--json", "signin", "--user", "alice"],
    ] {
        out.push_str(&ok(dir, args));
    }
    out
}

#[test]
fn seeded_transcript_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = transcript(a.path());
    let tb = transcript(b.path());
    assert_eq!(ta, tb);
    assert_eq!(value(&ta, "mnemonic").split(' ').count(), 24);
}

#[test]
fn signin_touches_no_node_and_status_says_so() {
    let d = tempfile::tempdir().unwrap();
    init(d.path());
    let signup = ok(d.path(), &["signup", "--user", "bob"]);
    assert!(value(&signup, "node_fetches").parse::<u64>().unwrap() >= 5);
    let signin = ok(d.path(), &["signin", "--user", "bob"]);
    assert_eq!(value(&signin, "public_key"), value(&signup, "public_key"));
    let status = ok(d.path(), &["status"]);
    assert_eq!(value(&status, "last_command"), "signin");
    assert_eq!(value(&status, "node_fetches"), "0");
}

#[test]
fn disaster_recovery_is_guarded() {
    let d = tempfile::tempdir().unwrap();
    init(d.path());
    ok(d.path(), &["signup", "--user", "carol"]);
    let out = run(d.path(), &["disaster-recover", "--user", "carol"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("class=INVALID_ARGUMENT"));

    ok(d.path(), &["mark-server", "--state", "down"]);
    let signin = run(d.path(), &["signin", "--user", "carol"]);
    assert_eq!(signin.status.code(), Some(4));
    let rec = ok(d.path(), &["disaster-recover", "--user", "carol"]);
    assert_eq!(value(&rec, "server_calls"), "0");
    assert!(!rec.contains("mnemonic="), "phrase printed without --reveal");
}

#[test]
fn exit_codes_follow_error_classes() {
    let d = tempfile::tempdir().unwrap();
    let seeded_production = run(d.path(), &["init-network", "--seed", "1"]);
    assert_eq!(seeded_production.status.code(), Some(2));

    init(d.path());
    ok(d.path(), &["signup", "--user", "dave"]);
    let again = run(d.path(), &["signup", "--user", "dave"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("class=ALREADY_ENROLLED"));

    let wrong_aud = run(d.path(), &["--audience", "other", "signin", "--user", "dave"]);
    assert_eq!(wrong_aud.status.code(), Some(3));

    let unknown_device = run(d.path(), &["signin", "--user", "dave", "--device", "nope"]);
    assert_eq!(unknown_device.status.code(), Some(4));

    for i in 1..=4 {
        ok(d.path(), &["mark-node", "--index", &i.to_string(), "--state", "dead"]);
    }
    ok(d.path(), &["disaster-recover", "--user", "dave", "--assume-server-dead"]);
    ok(d.path(), &["mark-node", "--index", "5", "--state", "dead"]);
    let short = run(d.path(), &["--json", "disaster-recover", "--user", "dave", "--assume-server-dead"]);
    assert_eq!(short.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&short.stderr).unwrap();
    assert_eq!(err["error"], "INSUFFICIENT_NODES");
    assert_eq!(err["exit"], 4);

    let bad_index = run(d.path(), &["mark-node", "--index", "10", "--state", "dead"]);
    assert_eq!(bad_index.status.code(), Some(2));
    let bad_flag = run(d.path(), &["signin", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}
