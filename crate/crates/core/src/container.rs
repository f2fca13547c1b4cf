//! On-disk container for every artifact: a directory holding `manifest.json`
//! and `arrays.bin`, a concatenation of little-endian f64 arrays whose names,
//! shapes and byte offsets the manifest lists.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ARRAYS: &str = "arrays.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `arrays.bin`.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format_version: u32,
    kind: String,
    backbone_fingerprint: Option<String>,
    meta: M,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Container<M> {
    pub kind: String,
    pub fingerprint: Option<String>,
    pub meta: M,
    pub arrays: Vec<(String, Tensor)>,
}

impl<M> Container<M> {
    /// Fails with a fingerprint error unless the container was made for `expected`.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        match &self.fingerprint {
            Some(fp) if fp == expected => Ok(()),
            Some(fp) => Err(Error::Fingerprint {
                expected: fp.clone(),
                found: expected.to_string(),
            }),
            None => Err(Error::Fingerprint {
                expected: "<none recorded>".into(),
                found: expected.to_string(),
            }),
        }
    }
}

pub fn write<M: Serialize>(
    dir: &Path,
    kind: &str,
    fingerprint: Option<&str>,
    meta: &M,
    arrays: &[(String, &Tensor)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(arrays.iter().map(|(_, t)| t.numel() * 8).sum());
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        backbone_fingerprint: fingerprint.map(str::to_string),
        meta,
        arrays: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let apath = dir.join(ARRAYS);
    fs::write(&apath, blob).map_err(|e| Error::io(&apath, e))?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(dir: &Path, kind: &str) -> Result<Container<M>> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(format!("{} (no {MANIFEST})", dir.display())));
    }
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Bundle {
            path: mpath.clone(),
            reason: "missing format_version".into(),
        })?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version as u32,
        });
    }
    let manifest: Manifest<M> = serde_json::from_value(value)?;
    if manifest.kind != kind {
        return Err(Error::Bundle {
            path: dir.to_path_buf(),
            reason: format!("expected a `{kind}` container, found `{}`", manifest.kind),
        });
    }
    let apath = dir.join(ARRAYS);
    let blob = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let len: usize = entry.shape.iter().product();
        let needed = entry.offset + len * 8;
        if needed > blob.len() {
            return Err(Error::TruncatedArray {
                name: entry.name.clone(),
                needed,
                available: blob.len(),
            });
        }
        let data = blob[entry.offset..needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Container {
        kind: manifest.kind,
        fingerprint: manifest.backbone_fingerprint,
        meta: manifest.meta,
        arrays,
    })
}
