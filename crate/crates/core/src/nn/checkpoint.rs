//! Checkpoints: a directory of HTX1 parameter tensors plus `manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htx;
use crate::tensor::MAX_RANK;

use super::models::{DiscConfig, PatchDiscriminator, UNet, UNetConfig};
use super::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "hairsynth-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Unet(UNetConfig),
    Discriminator(DiscConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub name: String,
    pub arch: Architecture,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub task: String,
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub networks: Vec<NetworkEntry>,
}

fn safe_file_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.len() <= 255
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

impl CheckpointManifest {
    /// Parses and validates a manifest. File references are restricted to
    /// plain names inside the checkpoint directory.
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        let mut nets = HashSet::new();
        let mut files = HashSet::new();
        for net in &self.networks {
            if !nets.insert(net.name.as_str()) {
                return Err(Error::Format(format!("duplicate network {:?}", net.name)));
            }
            for p in &net.params {
                if !safe_file_name(&p.file) {
                    return Err(Error::Format(format!("unsafe file name {:?}", p.file)));
                }
                if !files.insert(p.file.as_str()) {
                    return Err(Error::Format(format!("duplicate file {:?}", p.file)));
                }
                if p.shape.len() > MAX_RANK {
                    return Err(Error::Format(format!(
                        "rank of {:?} exceeds {MAX_RANK}",
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn network(&self, name: &str) -> Option<&NetworkEntry> {
        self.networks.iter().find(|n| n.name == name)
    }
}

/// A loaded checkpoint: the manifest and one parameter store per network.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub stores: Vec<ParamStore>,
}

impl Checkpoint {
    fn store(&self, name: &str) -> Result<(&NetworkEntry, &ParamStore)> {
        let i = self
            .manifest
            .networks
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no network {name:?}")))?;
        Ok((&self.manifest.networks[i], &self.stores[i]))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.network(name).is_some()
    }

    pub fn unet(&self, name: &str) -> Result<UNet> {
        let (entry, store) = self.store(name)?;
        let Architecture::Unet(cfg) = entry.arch else {
            return Err(Error::invalid(format!("{name:?} is not a U-Net")));
        };
        let mut net = UNet::new(cfg, 0)?;
        net.params_mut().load_from(store)?;
        Ok(net)
    }

    pub fn discriminator(&self, name: &str) -> Result<PatchDiscriminator> {
        let (entry, store) = self.store(name)?;
        let Architecture::Discriminator(cfg) = entry.arch else {
            return Err(Error::invalid(format!("{name:?} is not a discriminator")));
        };
        let mut net = PatchDiscriminator::new(cfg, 0)?;
        net.params_mut().load_from(store)?;
        Ok(net)
    }
}

pub struct CheckpointMeta<'a> {
    pub task: &'a str,
    pub stage: &'a str,
    pub step: usize,
    pub seed: u64,
}

/// Writes into a sibling temporary directory and swaps it in, so an
/// interrupted save leaves the previous checkpoint intact.
pub fn save(
    dir: impl AsRef<Path>,
    meta: &CheckpointMeta<'_>,
    networks: &[(&str, Architecture, &ParamStore)],
) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = staging_dir(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut entries = Vec::new();
    for (name, arch, store) in networks {
        let mut params = Vec::new();
        for (pname, tensor) in store.iter() {
            let file = format!("{name}.{pname}.htx");
            htx::write(tmp.join(&file), tensor)?;
            params.push(ParamEntry {
                name: pname.to_string(),
                file,
                shape: tensor.shape().to_vec(),
            });
        }
        entries.push(NetworkEntry {
            name: name.to_string(),
            arch: arch.clone(),
            params,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        task: meta.task.to_string(),
        stage: meta.stage.to_string(),
        step: meta.step,
        seed: meta.seed,
        networks: entries,
    };
    manifest.validate()?;
    let text = serde_json::to_string_pretty(&manifest)?;
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.partial"))
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = CheckpointManifest::parse(&text)?;
    let mut stores = Vec::new();
    for net in &manifest.networks {
        let mut store = ParamStore::new();
        for p in &net.params {
            let t = htx::read(dir.join(&p.file))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: shape {:?} differs from manifest {:?}",
                    p.file,
                    t.shape(),
                    p.shape
                )));
            }
            store.push(p.name.clone(), t);
        }
        stores.push(store);
    }
    Ok(Checkpoint { manifest, stores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = UNetConfig {
            in_channels: 2,
            out_channels: 3,
            base_channels: 4,
            depth: 2,
            extra_up: 0,
        };
        let net = UNet::new(cfg, 9).unwrap();
        let path = dir.path().join("ck");
        let meta = CheckpointMeta {
            task: "sketch2hair",
            stage: "basic",
            step: 3,
            seed: 9,
        };
        save(
            &path,
            &meta,
            &[("gb", Architecture::Unet(cfg), net.params())],
        )
        .unwrap();
        // saving twice replaces the directory cleanly
        save(
            &path,
            &meta,
            &[("gb", Architecture::Unet(cfg), net.params())],
        )
        .unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.manifest.step, 3);
        let back = ck.unet("gb").unwrap();
        for (a, b) in net.params().tensors().iter().zip(back.params().tensors()) {
            let bits = |t: &crate::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert!(ck.discriminator("gb").is_err());
        assert!(ck.unet("missing").is_err());
    }

    #[test]
    fn manifest_rejects_path_escapes() {
        let text = r#"{"format":"hairsynth-checkpoint-v1","task":"t","stage":"s","step":0,"seed":0,
            "networks":[{"name":"gb","arch":{"kind":"discriminator","in_channels":1,"base_channels":1,"layers":1},
            "params":[{"name":"w","file":"../etc/passwd","shape":[1]}]}]}"#;
        assert!(CheckpointManifest::parse(text).is_err());
        let ok = text.replace("../etc/passwd", "gb.w.htx");
        assert!(CheckpointManifest::parse(&ok).is_ok());
    }
}
