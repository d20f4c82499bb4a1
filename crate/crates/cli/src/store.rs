use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcvu::geom::PointSequence;
use pcvu::io::{decode_checkpoint, decode_sequence, encode_checkpoint, Checkpoint, Manifest, RunConfig};

pub const MANIFEST: &str = "manifest.toml";

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("config {}", path.display()))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Manifest::parse(&text).with_context(|| path.display().to_string())?)
}

/// Every sequence of a dataset directory, digest-checked, with class and
/// actor ids restored from the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<PointSequence>)> {
    let m = read_manifest(dir)?;
    if m.sequences.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    let mut seqs = Vec::with_capacity(m.sequences.len());
    for e in &m.sequences {
        let path = dir.join(&e.file);
        let bytes = read(&path)?;
        m.verify(e, &bytes)?;
        let mut s = decode_sequence(&bytes).with_context(|| path.display().to_string())?;
        s.meta.motion_class = e.class;
        s.meta.actor_id = e.actor;
        seqs.push(s);
    }
    Ok((m, seqs))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    decode_checkpoint(&bytes).with_context(|| path.display().to_string())
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write(path, encode_checkpoint(c)?)
}

pub fn out_dir(flag: Option<&Path>, configured: &str) -> PathBuf {
    flag.map_or_else(|| PathBuf::from(configured), Path::to_path_buf)
}
