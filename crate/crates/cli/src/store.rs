//! Output directory plumbing: crash-safe writes, the label-access log and
//! the manifest of produced artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{bail, Context, Result};
use mvpad_core::imaging::{AccessAudit, Partition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(path: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()))
}

/// Write through `f` into a unique temp file, then rename over `path`.
pub fn write_with(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = temp_path(path);
    let res = f(&tmp).and_then(|_| fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display())));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_with(path, |tmp| {
        let mut f = fs::File::create(tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Well-known locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn transform(&self) -> PathBuf {
        self.root.join("transform")
    }
    pub fn index(&self) -> PathBuf {
        self.transform().join("index.csv")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn matrix(&self, partition: Partition) -> PathBuf {
        self.predictions().join(format!("{partition}.csv"))
    }
    pub fn fusion(&self) -> PathBuf {
        self.root.join("fusion")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.json")
    }
    pub fn k_search(&self) -> PathBuf {
        self.root.join("k_search.json")
    }
    pub fn reports_csv(&self) -> PathBuf {
        self.root.join("reports.csv")
    }
    pub fn reports_json(&self) -> PathBuf {
        self.root.join("reports.json")
    }
    pub fn audit_log(&self) -> PathBuf {
        self.root.join("audit.log")
    }
    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts.json")
    }
}

/// Append this process's label reads to the persistent audit log.
pub fn persist_audit(layout: &Layout, audit: &AccessAudit) -> Result<()> {
    let events = audit.events();
    if events.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&layout.root)?;
    let path = layout.audit_log();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
    for (stage, partition) in events {
        writeln!(f, "{stage},{partition}")?;
    }
    Ok(())
}

/// (stage, partition) pairs from the audit log, in order.
pub fn read_audit(layout: &Layout) -> Result<Vec<(String, Partition)>> {
    let path = layout.audit_log();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (stage, part) = line.split_once(',').with_context(|| format!("audit line {}: {line:?}", i + 1))?;
            let p = part.parse::<Partition>().map_err(|e| anyhow::anyhow!("audit line {}: {e}", i + 1))?;
            Ok((stage.to_string(), p))
        })
        .collect()
}

/// Test-label reads recorded by any stage other than `evaluate`.
pub fn audit_violations(layout: &Layout) -> Result<Vec<(String, Partition)>> {
    Ok(read_audit(layout)?.into_iter().filter(|(s, p)| p.is_test() && s != crate::EVALUATE_STAGE).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub artifacts: Vec<Artifact>,
    /// Cached input maps are counted, not hashed.
    pub cached_maps: usize,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Rewrite `artifacts.json` from the current contents of the output dir.
pub fn refresh_artifacts(layout: &Layout) -> Result<ArtifactManifest> {
    let mut files = Vec::new();
    walk(&layout.root, &mut files)?;
    let mut artifacts = Vec::new();
    let mut cached_maps = 0;
    for p in files {
        let rel = p.strip_prefix(&layout.root).expect("walked under root");
        let name = rel.file_name().map(|s| s.to_string_lossy()).unwrap_or_default();
        if name.starts_with('.') || rel == Path::new("artifacts.json") {
            continue;
        }
        if rel.starts_with("cache") {
            cached_maps += 1;
            continue;
        }
        let bytes = fs::read(&p)?;
        artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = ArtifactManifest { artifacts, cached_maps };
    write_json(&layout.artifacts(), &manifest)?;
    Ok(manifest)
}

pub fn require_file(path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{} not found; run `{hint}` first", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
        let failed = write_with(&dir.path().join("c.txt"), |_| bail!("boom"));
        assert!(failed.is_err());
        assert!(!dir.path().join("c.txt").exists());
    }

    #[test]
    fn audit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let a = AccessAudit::new();
        a.record("train", Partition::Train);
        a.record("evaluate", Partition::TestKnown);
        persist_audit(&layout, &a).unwrap();
        let b = AccessAudit::new();
        b.record("fuse", Partition::TestUnknown);
        persist_audit(&layout, &b).unwrap();
        assert_eq!(read_audit(&layout).unwrap().len(), 3);
        assert_eq!(audit_violations(&layout).unwrap(), vec![("fuse".to_string(), Partition::TestUnknown)]);
    }
}
