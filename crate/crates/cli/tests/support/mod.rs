#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use vlminv_core::toy::stack::{build_toy_stack, ToyStack, ToyStackConfig};
use walkdir::WalkDir;

/// The default toy stack, trained once and cached under the target dir.
pub fn default_stack() -> ToyStack {
    static STACK: OnceLock<ToyStack> = OnceLock::new();
    STACK
        .get_or_init(|| {
            let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("default-stack");
            build_toy_stack(&ToyStackConfig::default(), &dir, false).expect("default toy stack builds")
        })
        .clone()
}

/// A fresh run root whose build/ is a copy of the cached default stack.
pub fn run_root_with_build(tmp: &Path) -> PathBuf {
    let stack = default_stack();
    let root = tmp.join("run");
    let build = root.join("build");
    for entry in WalkDir::new(&stack.dir) {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(&stack.dir).unwrap();
        let dst = build.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dst).unwrap();
        } else if entry.file_name() != "anchor.json" {
            fs::copy(entry.path(), &dst).unwrap();
        }
    }
    root
}

pub fn vlminv() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_vlminv"))
}
