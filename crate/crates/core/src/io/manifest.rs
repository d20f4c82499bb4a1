//! Dataset index written next to the containers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex, IoError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCount {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Container file name, relative to the manifest.
    pub file: String,
    pub index: u32,
    pub class: u32,
    pub actor: u32,
    /// SHA-256 of the container bytes, lowercase hex.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub frames: usize,
    pub points: usize,
    pub classes: Vec<ClassCount>,
    #[serde(rename = "sequence", default)]
    pub sequences: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(seed: u64, frames: usize, points: usize, class_names: &[&str]) -> Self {
        Self {
            seed,
            frames,
            points,
            classes: class_names
                .iter()
                .map(|n| ClassCount {
                    name: n.to_string(),
                    count: 0,
                })
                .collect(),
            sequences: Vec::new(),
        }
    }

    /// Records one encoded container.
    pub fn add(&mut self, file: &str, index: u32, class: u32, actor: u32, bytes: &[u8]) -> Result<(), IoError> {
        let c = self
            .classes
            .get_mut(class as usize)
            .ok_or_else(|| IoError::Manifest(format!("class {class} is not listed")))?;
        c.count += 1;
        self.sequences.push(ManifestEntry {
            file: file.to_string(),
            index,
            class,
            actor,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest always serializes")
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let m: Manifest = toml::from_str(text).map_err(|e| IoError::Manifest(e.message().replace('\n', " ")))?;
        for (c, cc) in m.classes.iter().enumerate() {
            let n = m.sequences.iter().filter(|s| s.class as usize == c).count();
            if n != cc.count {
                return Err(IoError::Manifest(format!(
                    "class {} lists {} sequences, index has {n}",
                    cc.name, cc.count
                )));
            }
        }
        if let Some(s) = m.sequences.iter().find(|s| s.class as usize >= m.classes.len()) {
            return Err(IoError::Manifest(format!("{} has unlisted class {}", s.file, s.class)));
        }
        Ok(m)
    }

    /// Checks a container's bytes against the recorded digest.
    pub fn verify(&self, entry: &ManifestEntry, bytes: &[u8]) -> Result<(), IoError> {
        let got = sha256_hex(bytes);
        if got != entry.sha256 {
            return Err(IoError::Manifest(format!("{} digest {got} does not match {}", entry.file, entry.sha256)));
        }
        Ok(())
    }

    /// Class label of every listed sequence, in manifest order.
    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.class as usize).collect()
    }
}
