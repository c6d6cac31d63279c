//! Run-directory plumbing: the lock file, `run.json`, atomic output
//! directories and content hashes.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const RUN_JSON: &str = "run.json";
pub const LOG: &str = "run.log";
const LOCK: &str = ".lock";

/// Exclusive hold on a run directory; released on drop.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).with_context(|| {
            format!("{} is locked by another command (remove {} if it crashed)", root.display(), lock.display())
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Replaces `run.json`'s `section` with `value`.
    pub fn record(&self, section: &str, value: Value) -> anyhow::Result<()> {
        let path = self.path(RUN_JSON);
        let mut doc = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<Map<String, Value>>(&text).context("parsing run.json")?,
            Err(_) => Map::new(),
        };
        doc.insert(section.to_string(), value);
        let text = serde_json::to_string_pretty(&Value::Object(doc))? + "\n";
        write_atomic(&path, text.as_bytes())
    }

    #[cfg(test)]
    pub fn section(&self, section: &str) -> Option<Value> {
        let text = fs::read_to_string(self.path(RUN_JSON)).ok()?;
        let mut doc: Map<String, Value> = serde_json::from_str(&text).ok()?;
        doc.remove(section)
    }

    /// Appends a timestamped line to the run log; timestamps live only here.
    pub fn log(&self, message: &str) {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.path(LOG)) {
            let _ = writeln!(f, "{secs} {message}");
        }
    }

    /// Fresh staging directory for `name`; [`RunDir::commit`] swaps it into place.
    pub fn stage(&self, name: &str) -> anyhow::Result<PathBuf> {
        let staging = self.path(&format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(staging)
    }

    pub fn commit(&self, name: &str, staging: &Path) -> anyhow::Result<PathBuf> {
        let target = self.path(name);
        if target.exists() {
            fs::remove_dir_all(&target).with_context(|| format!("replacing {}", target.display()))?;
        }
        fs::rename(staging, &target).with_context(|| format!("moving outputs into {}", target.display()))?;
        Ok(target)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}
