//! Experiment plumbing behind the `vbpt` binary: manifests of sweeps,
//! cross-run comparison tables and plot data, and exit-code mapping.

pub mod compare;
pub mod manifest;

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Exit code for a failed command: configuration problems get their own
/// code, everything else is a runtime failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<vbpt_core::Error>() {
        Some(vbpt_core::Error::Config(_) | vbpt_core::Error::Empty(_)) => EXIT_CONFIG,
        Some(_) => EXIT_RUNTIME,
        None if err.downcast_ref::<clap::Error>().is_some() => EXIT_CONFIG,
        None => EXIT_RUNTIME,
    }
}

/// SHA-256 over every file below `dir`, in sorted relative-path order, of
/// each path followed by its contents.
pub fn dir_checksum(dir: &Path) -> std::io::Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}
