//! Helpers for the acceptance suite.

use std::path::PathBuf;
use std::process::Command;

/// Path of the `tsm` binary in the current target directory, built on demand.
///
/// Test executables live in `target/<profile>/deps`, the binary one level up.
pub fn tsm_binary() -> PathBuf {
    let exe = std::env::current_exe().expect("current executable");
    let profile_dir = exe
        .parent()
        .and_then(|deps| deps.parent())
        .expect("target/<profile>/deps layout")
        .to_path_buf();
    let bin = profile_dir.join(format!("tsm{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let profile = match profile_dir.file_name().and_then(|n| n.to_str()) {
            Some("debug") | None => "dev".to_string(),
            Some(p) => p.to_string(),
        };
        let status = Command::new(env!("CARGO"))
            .args(["build", "-q", "-p", "tsm-cli", "--bin", "tsm", "--profile", &profile])
            .status()
            .expect("run cargo build");
        assert!(status.success(), "building tsm failed");
    }
    bin
}
