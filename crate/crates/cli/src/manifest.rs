//! Run directories: output files plus a manifest of their hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use towerlab::io::{sha256_hex, to_json_bytes, write_bytes};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEntry {
    pub role: String,
    pub sha256: String,
}

/// Everything needed to tell whether two runs should agree. Timestamps live
/// here and nowhere else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<InputEntry>,
    pub outputs: Vec<FileEntry>,
}

/// Collects the files of one run directory.
pub struct RunDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), files: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let sha256 = write_bytes(&self.root.join(name), bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.to_string(), sha256, bytes: bytes.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let bytes = to_json_bytes(value).map_err(std::io::Error::other)?;
        self.write(name, &bytes)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    /// Writes `manifest.json` with outputs sorted by path.
    pub fn finish(mut self, mut manifest: RunManifest) -> std::io::Result<RunManifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.outputs = self.files;
        write_bytes(&self.root.join("manifest.json"), &to_json_bytes(&manifest).map_err(std::io::Error::other)?)?;
        Ok(manifest)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Checks every listed output against its recorded hash.
pub fn verify(dir: &Path) -> std::io::Result<Vec<String>> {
    let m: RunManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?).map_err(std::io::Error::other)?;
    let mut bad = Vec::new();
    for f in &m.outputs {
        match std::fs::read(dir.join(&f.path)) {
            Ok(b) if sha256_hex(&b) == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_every_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut rd = RunDir::new(dir.path());
        rd.write("b.csv", b"n\n1\n").unwrap();
        rd.write_json("a.json", &serde_json::json!({"x": 1})).unwrap();
        let m = RunManifest {
            command: "test".into(),
            config_hash: String::new(),
            code_version: String::new(),
            started: now(),
            finished: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let m = rd.finish(m).unwrap();
        assert_eq!(m.outputs.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a.json", "b.csv"]);
        assert!(verify(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("b.csv"), b"tampered").unwrap();
        assert_eq!(verify(dir.path()).unwrap(), ["b.csv"]);
    }
}
