//! Compiles and runs a C program against the generated header and the
//! static library. Skipped when no C compiler is available.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/crackres.h");
    assert!(header.exists(), "build script should write include/crackres.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["cr_model_predict", "CR_STATUS_OK", "typedef struct CrImage CrImage", "cr_last_error"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping link test");
        return;
    }
    // Test binaries live in target/<profile>/deps; the static library one level up.
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libcrackres_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link test", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "smoke program failed: {}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
