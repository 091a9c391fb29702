//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus, per scene, a JSON sidecar
//! `scene_NNNNN.json` (boxes, rig, poses, feature layout) and a tensor blob
//! `scene_NNNNN.bin`. The blob is a sequence of named little-endian tensor
//! records:
//!
//! ```text
//! magic  b"SLFB"   u32 version   u32 record count
//! record: u32 name length, name (UTF-8), u32 rank, rank x u64 dims,
//!         prod(dims) x f32 values
//! ```
//!
//! Records are `points.{t}` (`[N, 5]`: x, y, z, intensity, object index or
//! -1), `camera.{v}.{m}.{t}` (`[H, W, C]`) and `lidar.{r}` (`[G, G, C]`).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LidarPoint, SceneSample};
use crate::error::{Error, Result};
use crate::featuremaps::{CameraFeatureSet, FeatureMap, LidarFeaturePyramid};
use crate::geometry::{Box3D, CameraRig, DetectionRange};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"SLFB";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestScene {
    pub id: u64,
    pub sidecar: String,
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub scenes: Vec<ManifestScene>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    id: u64,
    seed: u64,
    boxes: Vec<Box3D>,
    rig: CameraRig,
    camera_strides: Vec<f64>,
    num_views: usize,
    num_scales: usize,
    num_frames: usize,
    lidar_range: DetectionRange,
    lidar_scales: usize,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<(String, Tensor<f32>)> {
    let n = read_u32(r)? as usize;
    if n > 1024 {
        return Err(format_err(path, "record name too long"));
    }
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| format_err(path, "record name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(format_err(path, "tensor rank too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn scene_stem(id: u64) -> String {
    format!("scene_{:05}", id)
}

fn write_scene(dir: &Path, s: &SceneSample) -> Result<ManifestScene> {
    let stem = scene_stem(s.id);
    let sidecar = Sidecar {
        id: s.id,
        seed: s.seed,
        boxes: s.boxes.clone(),
        rig: s.rig.clone(),
        camera_strides: s.camera.strides.clone(),
        num_views: s.camera.num_views,
        num_scales: s.camera.num_scales,
        num_frames: s.camera.num_frames,
        lidar_range: s.lidar.range,
        lidar_scales: s.lidar.num_scales(),
    };
    let sidecar_name = format!("{}.json", stem);
    fs::write(dir.join(&sidecar_name), serde_json::to_vec_pretty(&sidecar)?)?;

    let blob_name = format!("{}.bin", stem);
    let mut w = BufWriter::new(fs::File::create(dir.join(&blob_name))?);
    let records = s.points.len() + s.camera.maps().len() + s.lidar.maps.len();
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(records as u32).to_le_bytes())?;
    for (t, sweep) in s.points.iter().enumerate() {
        let data = sweep
            .iter()
            .flat_map(|p| [p.pos[0], p.pos[1], p.pos[2], p.intensity, p.object as f32]);
        write_record(&mut w, &format!("points.{}", t), &[sweep.len(), 5], data)?;
    }
    for v in 0..s.camera.num_views {
        for m in 0..s.camera.num_scales {
            for t in 0..s.camera.num_frames {
                let map = s.camera.get(v, m, t);
                let name = format!("camera.{}.{}.{}", v, m, t);
                write_record(&mut w, &name, map.data.shape(), map.data.data().iter().copied())?;
            }
        }
    }
    for (r, map) in s.lidar.maps.iter().enumerate() {
        write_record(&mut w, &format!("lidar.{}", r), map.data.shape(), map.data.data().iter().copied())?;
    }
    w.flush()?;
    Ok(ManifestScene {
        id: s.id,
        sidecar: sidecar_name,
        blob: blob_name,
    })
}

fn is_dataset_file(name: &str) -> bool {
    name == MANIFEST || (name.starts_with("scene_") && (name.ends_with(".json") || name.ends_with(".bin")))
}

/// Writes `scenes` into `dir`. A non-empty `dir` is refused unless `force`,
/// in which case previous dataset files there are removed first.
pub fn write_dataset(dir: &Path, scenes: &[SceneSample], config_hash: &str, seed: u64, force: bool) -> Result<Manifest> {
    if dir.exists() {
        let entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        if !entries.is_empty() {
            if !force {
                return Err(Error::NotEmpty(dir.to_path_buf()));
            }
            for p in entries {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if p.is_file() && is_dataset_file(name) {
                    fs::remove_file(&p)?;
                }
            }
        }
    }
    fs::create_dir_all(dir)?;
    let entries = scenes.iter().map(|s| write_scene(dir, s)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        scenes: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| format_err(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(
            &path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

fn read_scene(dir: &Path, entry: &ManifestScene) -> Result<SceneSample> {
    let side_path = dir.join(&entry.sidecar);
    let side: Sidecar =
        serde_json::from_slice(&fs::read(&side_path)?).map_err(|e| format_err(&side_path, e.to_string()))?;
    let blob_path = dir.join(&entry.blob);
    let mut r = BufReader::new(fs::File::open(&blob_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(format_err(&blob_path, "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(format_err(&blob_path, format!("unsupported blob version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_record(&mut r, &blob_path)?;
        records.insert(name, t);
    }
    let mut take = |name: String| {
        records
            .remove(&name)
            .ok_or_else(|| format_err(&blob_path, format!("missing record {}", name)))
    };
    let mut points = Vec::with_capacity(side.num_frames);
    for t in 0..side.num_frames {
        let raw = take(format!("points.{}", t))?;
        points.push(
            raw.data()
                .chunks_exact(5)
                .map(|c| LidarPoint {
                    pos: [c[0], c[1], c[2]],
                    intensity: c[3],
                    object: c[4] as i32,
                })
                .collect(),
        );
    }
    let mut maps = Vec::new();
    for v in 0..side.num_views {
        for m in 0..side.num_scales {
            for t in 0..side.num_frames {
                maps.push(FeatureMap::from_tensor(take(format!("camera.{}.{}.{}", v, m, t))?, m)?);
            }
        }
    }
    let camera = CameraFeatureSet::new(side.num_views, side.num_scales, side.num_frames, side.camera_strides, maps)?;
    let lidar_maps = (0..side.lidar_scales)
        .map(|r| FeatureMap::from_tensor(take(format!("lidar.{}", r))?, r))
        .collect::<Result<Vec<_>>>()?;
    let lidar = LidarFeaturePyramid::new(side.lidar_range, lidar_maps)?;
    let rig = CameraRig::new(side.rig.views, side.rig.ego_poses)?;
    Ok(SceneSample {
        id: side.id,
        seed: side.seed,
        boxes: side.boxes,
        rig,
        points,
        camera,
        lidar,
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| read_scene(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{generate_dataset, SensorLayout, SimConfig};

    #[test]
    fn round_trip_is_exact() {
        let layout = SensorLayout::default();
        let scenes = generate_dataset(&layout, &SimConfig::default(), 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let m = write_dataset(&path, &scenes, "abc", 4, false).unwrap();
        let (m2, back) = read_dataset(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, scenes);
        assert!(matches!(
            write_dataset(&path, &scenes, "abc", 4, false),
            Err(Error::NotEmpty(_))
        ));
        write_dataset(&path, &scenes[..1], "abc", 4, true).unwrap();
        assert_eq!(read_dataset(&path).unwrap().1.len(), 1);
    }
}
