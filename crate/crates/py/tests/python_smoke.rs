use std::path::PathBuf;
use std::process::Command;

// The cdylib is built next to the test binary's parent directory.
fn library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let lib = dir.join("libtempcobev_py.so");
    lib.exists().then_some(lib)
}

#[test]
fn python_smoke_script_passes() {
    let Some(lib) = library() else {
        eprintln!("skipping: shared library not built");
        return;
    };
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("python/smoke_test.py");
    let out = match Command::new("python3").arg(&script).arg(&lib).output() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: python3 unavailable ({e})");
            return;
        }
    };
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("smoke test ok"));
}
