use std::process::Command;

fn main() {
    // Capture the compiler version so experiment records can name the exact
    // toolchain that produced them.
    let rustc = std::env::var("RUSTC").unwrap_or_else(|_| "rustc".into());
    let version = Command::new(rustc)
        .arg("--version")
        .output()
        .ok()
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=TROJVIS_RUSTC_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}
