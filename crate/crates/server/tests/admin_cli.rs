mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use gatekeeper_store::AdminStore;

fn admin(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_admin"))
        .env("LOMAS_STORE_PATH", store)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn register_allocate_show_drop() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("admin.jsonl");
    let csv = format!("local_path:{}", fixture("penguins.csv").display());
    let md = fixture("penguin_metadata.yaml");

    stdout(&admin(
        &store,
        &[
            "add_dataset",
            "--dataset",
            "PENGUIN",
            "--locator",
            &csv,
            "--metadata_path",
            md.to_str().unwrap(),
        ],
    ));
    let dup = admin(
        &store,
        &[
            "add_dataset",
            "--dataset",
            "PENGUIN",
            "--locator",
            &csv,
            "--metadata_path",
            md.to_str().unwrap(),
        ],
    );
    assert!(!dup.status.success());
    assert!(String::from_utf8_lossy(&dup.stderr).contains("already registered"));

    let grant = [
        "add_user_with_budget",
        "--user",
        USER,
        "--dataset",
        "PENGUIN",
        "--epsilon",
        "10",
        "--delta",
        "0.005",
    ];
    stdout(&admin(&store, &grant));
    assert!(!admin(&store, &grant).status.success());
    assert!(!admin(
        &store,
        &[
            "add_user_with_budget",
            "--user",
            "X",
            "--dataset",
            "NOPE",
            "--epsilon",
            "1",
            "--delta",
            "0"
        ]
    )
    .status
    .success());

    let users = stdout(&admin(&store, &["show_collection", "users"]));
    assert_eq!(users.lines().count(), 1);
    assert!(users.contains(USER));
    assert_eq!(
        stdout(&admin(&store, &["show_collection", "datasets"])).lines().count(),
        1
    );
    assert_eq!(
        stdout(&admin(&store, &["show_collection", "metadata"])).lines().count(),
        1
    );
    assert_eq!(stdout(&admin(&store, &["show_collection", "archives"])), "");
    assert!(!admin(&store, &["show_collection", "budgets"]).status.success());

    // What the CLI wrote is what the server reads.
    let opened = AdminStore::open(&store).unwrap();
    assert_eq!(
        opened.get_budget(USER, "PENGUIN").unwrap().initial,
        budget("10", "0.005")
    );

    stdout(&admin(&store, &["drop_user", "--user", USER]));
    assert_eq!(stdout(&admin(&store, &["show_collection", "users"])), "");
    assert!(!admin(&store, &["drop_user", "--user", USER]).status.success());
}

#[test]
fn bad_locator_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("admin.jsonl");
    let md = fixture("penguin_metadata.yaml");
    let o = admin(
        &store,
        &[
            "add_dataset",
            "--dataset",
            "PENGUIN",
            "--locator",
            "ftp:/x",
            "--metadata_path",
            md.to_str().unwrap(),
        ],
    );
    assert!(!o.status.success());
    assert!(!store.exists());
}
