//! Dataset container: a UTF-8 JSON manifest (counts, intrinsics, per-sample
//! crop transforms and targets) next to one little-endian f32 depth blob.
//! Round-trips are bitwise.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenConfig, Sample};
use crate::anchor::{CameraIntrinsics, CropTransform, DepthImage};
use crate::error::{A2jError, Result};
use crate::loss::GroundTruth;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub joints: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub intrinsics: CameraIntrinsics,
    pub master_seed: u64,
    pub gen: GenConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    transform: CropTransform,
    world_joints: Vec<[f32; 3]>,
    gt: GroundTruth,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: DatasetMeta,
    count: usize,
    samples: Vec<SampleMeta>,
}

/// Writes `manifest.json` and `depth.bin` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        meta: ds.meta.clone(),
        count: ds.samples.len(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleMeta {
                seed: s.seed,
                transform: s.transform,
                world_joints: s.world_joints.clone(),
                gt: s.gt.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| A2jError::Corrupt(format!("manifest encode failed: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    let mut blob = Vec::with_capacity(ds.samples.len() * ds.meta.crop_w * ds.meta.crop_h * 4);
    for s in &ds.samples {
        for v in &s.image.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("depth.bin"), blob)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], validating the manifest
/// against the blob before returning any data.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| A2jError::Corrupt(format!("bad dataset manifest: {e}")))?;
    if manifest.meta.version != FORMAT_VERSION {
        return Err(A2jError::Corrupt(format!(
            "dataset format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.meta.version
        )));
    }
    if manifest.samples.len() != manifest.count {
        return Err(A2jError::Corrupt(format!(
            "manifest declares {} samples, lists {}",
            manifest.count,
            manifest.samples.len()
        )));
    }
    let k = manifest.meta.joints;
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.gt.positions.len() != k || s.gt.depths.len() != k || s.world_joints.len() != k {
            return Err(A2jError::Corrupt(format!(
                "sample {i}: joint count disagrees with manifest K={k}"
            )));
        }
    }
    let (w, h) = (manifest.meta.crop_w, manifest.meta.crop_h);
    let px = w * h;
    let expected = manifest.count * px * 4;
    let mut blob = Vec::with_capacity(expected);
    fs::File::open(dir.join("depth.bin"))?.read_to_end(&mut blob)?;
    if blob.len() != expected {
        return Err(A2jError::Corrupt(format!(
            "depth blob is {} bytes, manifest requires {expected}",
            blob.len()
        )));
    }
    let samples = manifest
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let data: Vec<f32> = blob[i * px * 4..(i + 1) * px * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Sample {
                image: DepthImage::new(w, h, data),
                gt: m.gt,
                transform: m.transform,
                world_joints: m.world_joints,
                seed: m.seed,
            }
        })
        .collect();
    Ok(Dataset { meta: manifest.meta, samples })
}
