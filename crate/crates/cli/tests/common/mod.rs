#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gbdsde_cli::config::DEFAULT_CONFIG;
use serde_json::{json, Value};

pub fn shipped_json() -> Value {
    serde_json::from_str(DEFAULT_CONFIG).unwrap()
}

/// The shipped config scaled down to a few seconds of work.
pub fn small_json() -> Value {
    let mut v = shipped_json();
    v["space"]["m"] = json!(281);
    v["gbm"]["paths"] = json!(4);
    v["gbm"]["random_schedules"] = json!(1);
    v["gbm"]["diagnostics"]["paths"] = json!(400);
    v["gbm"]["diagnostics"]["steps"] = json!(16);
    v["hunt"]["paths"] = json!(300);
    v["hunt"]["bracket"]["paths"] = json!(400);
    v["hunt"]["bracket"]["steps"] = json!(32);
    v["verify"]["comparison"]["paths"] = json!(2);
    v["verify"]["transport"]["steps"] = json!(8);
    v["verify"]["transport"]["levels"] = json!(2);
    v["verify"]["transport"]["paths"] = json!(2);
    v["verify"]["transport"]["x_paths"] = json!(200);
    v
}

pub fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

pub fn gbdsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbdsde")).args(args).output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Sorted `(name, bytes)` of every file in `dir`.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}
