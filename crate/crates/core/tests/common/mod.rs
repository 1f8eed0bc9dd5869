#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_shapefactor");

/// Small networks for plumbing checks where model quality is irrelevant.
pub const TINY_CONFIG: &str = "\
stage_a_epochs = 1
stage_b_epochs = 1
stage_c_epochs = 1
batch_size = 4
embed_dim = 16
encoder_channels = 4,8
decoder_channels = 8,4
stn_channels = 4
stn_features = 8
stn_hidden = 16
mono_hidden = 16
";

pub fn shapefactor(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn shapefactor")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs and asserts exit code 0, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let o = shapefactor(args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Dataset plus one tiny trained run under `dir`; returns (data, run) paths.
pub fn tiny_run(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    let cfg = dir.join("tiny.txt");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    ok(&["gen-data", "--out", path(&data), "--train", "8", "--val", "4", "--test", "6", "--seed", "3"]);
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--seed", "1"]);
    (data, run)
}
