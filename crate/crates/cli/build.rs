use std::process::Command;

fn main() {
    let pkg = std::env::var("CARGO_PKG_VERSION").unwrap_or_default();
    let described = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_default();
    let version = if described.is_empty() { pkg } else { format!("{pkg}+{described}") };
    println!("cargo:rustc-env=TPS_VERSION={version}");
    for f in ["HEAD", "index"] {
        println!("cargo:rerun-if-changed=../../.git/{f}");
    }
}
