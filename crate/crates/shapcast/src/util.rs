//! Shared helpers: deterministic seed derivation, fingerprinting, atomic writes.

use crate::error::{Error, Result};
use std::path::Path;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Derives a child seed for a named pipeline stage from the root seed.
///
/// FNV-1a over the root seed bytes followed by the stage label, so each
/// stage draws from an independent deterministic stream and adding a new
/// stage never shifts the randomness of existing ones.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in root.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in stage.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a fingerprint of a float slice (bit patterns, not values), hex
/// encoded. Used to echo baselines and parameter blocks in reports.
pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    format!("{h:016x}")
}

/// Writes `bytes` to `path` atomically: write a sibling temp file, then
/// rename it over the destination. Reruns therefore never leave a
/// half-written report behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seed_is_stable_and_label_sensitive() {
        let a = stage_seed(42, "grouping");
        assert_eq!(a, stage_seed(42, "grouping"));
        assert_ne!(a, stage_seed(42, "training"));
        assert_ne!(a, stage_seed(43, "grouping"));
    }

    #[test]
    fn hash_distinguishes_negative_zero() {
        assert_ne!(hash_f64s(&[0.0]), hash_f64s(&[-0.0]));
        assert_eq!(hash_f64s(&[1.5, 2.5]), hash_f64s(&[1.5, 2.5]));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // no temp litter left behind
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
