//! Helpers shared by the acceptance suite in `tests/acceptance.rs`.

use std::io::Write;
use std::path::{Path, PathBuf};

use mimetic::experiment::ExperimentConfig;

/// Workspace root.
pub fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Loads `recipes/<name>` with its output redirected to `out`.
pub fn recipe(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&root().join("recipes").join(name)).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Writes `criterion N: PASS|FAIL | detail` to stderr, bypassing test
/// output capture.
pub fn report(n: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} | {detail}");
}
