//! Output manifests: every file a command emits is listed with a content
//! hash, so identical runs can be verified byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use commute_core::hashing;

use crate::CliError;

pub struct Manifest {
    out_dir: PathBuf,
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(out_dir: &Path) -> Manifest {
        Manifest {
            out_dir: out_dir.to_path_buf(),
            entries: Vec::new(),
        }
    }

    /// Write a file under the output directory and record its hash.
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.entries
            .push((rel.to_string(), hashing::fnv1a_hex(bytes)));
        Ok(path)
    }

    /// Finish by writing the manifest itself (sorted by path).
    pub fn finish(mut self, name: &str) -> Result<PathBuf, CliError> {
        self.entries.sort();
        let mut buf = Vec::new();
        for (rel, hash) in &self.entries {
            writeln!(buf, "{hash}  {rel}").expect("write to vec");
        }
        let path = self.out_dir.join(name);
        std::fs::write(&path, &buf)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
