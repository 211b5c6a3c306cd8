use std::path::Path;
use std::process::Command;

fn main() {
    let tag = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}-unknown", env!("CARGO_PKG_VERSION")));
    println!("cargo:rustc-env=SKCLT_BUILD_TAG={tag}");
    // Only watch files that exist; a missing path would force a rebuild every time.
    for p in ["../../.git/HEAD", "../../.git/refs", "../../.git/index"] {
        if Path::new(p).exists() {
            println!("cargo:rerun-if-changed={p}");
        }
    }
    println!("cargo:rerun-if-changed=build.rs");
}
