//! Run manifests: what ran, with which resolved config and inputs, and
//! which files it produced.
//!
//! A manifest is written when a run starts and rewritten when it ends. Each
//! write goes to a temporary file that is then renamed into place, so
//! readers never see a half-written manifest.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub input_hash: String,
    pub started: u64,
    pub finished: Option<u64>,
    pub status: String,
    /// Paths relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>` for the
/// command line, the resolved config, then each input file in order.
pub fn input_hash(command: &str, config: &str, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    let mut blob = |bytes: &[u8]| {
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
    };
    blob(command.as_bytes());
    blob(config.as_bytes());
    for p in inputs {
        let mut buf = Vec::new();
        fs::File::open(p)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .with_context(|| format!("hashing input {}", p.display()))?;
        blob(&buf);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} into place", path.display()))
}

impl RunManifest {
    /// Echoes the config into `out` and writes the opening manifest.
    pub fn begin(out: &Path, command: &str, config: &str, inputs: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_atomic(&out.join(CONFIG_FILE), config.as_bytes())?;
        let m = Self {
            command: command.into(),
            config: config.into(),
            input_hash: input_hash(command, config, inputs)?,
            started: unix_now(),
            finished: None,
            status: "running".into(),
            outputs: vec![CONFIG_FILE.into()],
        };
        m.write(out)?;
        Ok(m)
    }

    pub fn add_output(&mut self, rel: impl Into<PathBuf>) {
        let rel = rel.into();
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
    }

    pub fn finish(&mut self, out: &Path, status: &str) -> Result<()> {
        self.finished = Some(unix_now());
        self.status = status.into();
        self.write(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command={}\ninput_hash={}\nstarted={}\nfinished={}\nstatus={}\n",
            self.command,
            self.input_hash,
            self.started,
            self.finished.map_or(String::new(), |t| t.to_string()),
            self.status
        );
        for o in &self.outputs {
            s.push_str(&format!("output={}\n", o.display()));
        }
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_every_input() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::write(&a, b"one").unwrap();
        let h1 = input_hash("gap train", "x = 1\n", std::slice::from_ref(&a)).unwrap();
        assert_eq!(
            h1,
            input_hash("gap train", "x = 1\n", std::slice::from_ref(&a)).unwrap()
        );
        assert_eq!(h1.len(), 64);
        assert_ne!(
            h1,
            input_hash("gap train", "x = 2\n", std::slice::from_ref(&a)).unwrap()
        );
        fs::write(&a, b"two").unwrap();
        assert_ne!(h1, input_hash("gap train", "x = 1\n", &[a]).unwrap());
    }

    #[test]
    fn manifest_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin(dir.path(), "gap collect", "env = pointnav\n", &[]).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("status=running") && text.contains("finished=\n"));
        assert_eq!(
            fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(),
            "env = pointnav\n"
        );
        m.add_output("dataset.gapd");
        m.add_output("dataset.gapd");
        m.finish(dir.path(), "ok").unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("status=ok"));
        assert_eq!(text.matches("output=dataset.gapd").count(), 1);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
