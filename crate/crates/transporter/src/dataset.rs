//! Dataset directories: one subdirectory per sequence holding its PLY
//! frames and a JSON manifest, plus a top-level index.
//!
//! ```text
//! <root>/dataset.json
//! <root>/seq_0000/manifest.json
//! <root>/seq_0000/frame_0.ply
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transporter_core::geometry::{NormalizedFrame, RigidTransform};
use transporter_core::synth::{ArticulatedScene, Frame, Sequence};

use crate::error::{Error, Result};
use crate::ply;

pub const INDEX_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Part pose relative to the first frame, in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    /// Rotation, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidTransform> for Pose {
    fn from(x: &RigidTransform) -> Self {
        let m = x.r;
        Self {
            r: [
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ],
            t: x.t,
        }
    }
}

impl Pose {
    pub fn to_transform(&self) -> Result<RigidTransform> {
        let v = self.r;
        let r = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((dot - want).abs() < 1e-6) {
                    return Err(Error::Format(format!(
                        "pose rotation is not orthonormal: {v:?}"
                    )));
                }
            }
        }
        if self.t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!(
                "pose translation is not finite: {:?}",
                self.t
            )));
        }
        Ok(RigidTransform { r, t: self.t })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// PLY file relative to the manifest.
    pub path: String,
    pub joint_value: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub scene: ArticulatedScene,
    /// Maps world coordinates to the normalized coordinates of the frames.
    pub normalization: NormalizedFrame,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub scenes: usize,
    pub frames: usize,
    /// Manifest paths relative to the dataset root, in sequence order.
    pub sequences: Vec<String>,
    pub config_echo: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub sequences: usize,
    pub pairs: usize,
    pub triplets: usize,
    pub frames: usize,
    pub points: usize,
}

impl DatasetSummary {
    pub fn of(data: &[Sequence], scenes: usize) -> Self {
        Self {
            scenes,
            sequences: data.len(),
            pairs: data.iter().filter(|s| s.frames.len() == 2).count(),
            triplets: data.iter().filter(|s| s.frames.len() == 3).count(),
            frames: data.iter().map(|s| s.frames.len()).sum(),
            points: data
                .iter()
                .flat_map(|s| &s.frames)
                .map(|f| f.points.len())
                .sum(),
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one sequence into `dir` (created if missing).
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    create_dir(dir)?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let name = format!("frame_{i}.ply");
        ply::write(&dir.join(&name), &f.points, Some(&f.part))?;
        frames.push(FrameEntry {
            path: name,
            joint_value: f.joint_value,
            pose: Pose::from(&f.pose),
        });
    }
    let manifest = SequenceManifest {
        scene: seq.scene.clone(),
        normalization: seq.normalization,
        frames,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Loads a sequence from its manifest, checking it against the schema.
pub fn read_sequence(manifest_path: &Path) -> Result<Sequence> {
    let m: SequenceManifest = read_json(manifest_path)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", manifest_path.display()));
    m.scene.validate().map_err(|e| bad(e.to_string()))?;
    if !(2..=3).contains(&m.frames.len()) {
        return Err(bad(format!(
            "a sequence has 2 or 3 frames, found {}",
            m.frames.len()
        )));
    }
    if !(m.normalization.scale > 0.0 && m.normalization.scale.is_finite()) {
        return Err(bad(format!(
            "normalization scale {} must be positive",
            m.normalization.scale
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(m.frames.len());
    for entry in &m.frames {
        m.scene
            .joint
            .check(entry.joint_value)
            .map_err(|e| bad(e.to_string()))?;
        let pose = entry.pose.to_transform().map_err(|e| bad(e.to_string()))?;
        let cloud = ply::read(&dir.join(&entry.path))?;
        let Some(part) = cloud.part else {
            return Err(bad(format!("frame `{}` has no part mask", entry.path)));
        };
        frames.push(Frame {
            points: cloud.points,
            part,
            joint_value: entry.joint_value,
            pose,
        });
    }
    Ok(Sequence {
        scene: m.scene,
        normalization: m.normalization,
        frames,
    })
}

pub fn sequence_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seq_{i:04}"))
}

/// Writes every sequence and the index.
pub fn write_dataset(
    root: &Path,
    data: &[Sequence],
    scenes: usize,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<DatasetSummary> {
    create_dir(root)?;
    let mut sequences = Vec::with_capacity(data.len());
    for (i, seq) in data.iter().enumerate() {
        let dir = sequence_dir(root, i);
        write_sequence(&dir, seq)?;
        sequences.push(format!("seq_{i:04}/{MANIFEST_FILE}"));
    }
    let summary = DatasetSummary::of(data, scenes);
    let index = DatasetIndex {
        seed,
        scenes,
        frames: summary.frames,
        sequences,
        config_echo,
    };
    write_json(&root.join(INDEX_FILE), &index)?;
    Ok(summary)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    read_json(&root.join(INDEX_FILE))
}

/// Loads every sequence listed in the index, in order.
pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let index = read_index(root)?;
    if index.sequences.is_empty() {
        return Err(Error::Format(format!(
            "{}: dataset lists no sequences",
            root.display()
        )));
    }
    let data = index
        .sequences
        .iter()
        .map(|rel| read_sequence(&root.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    let frames: usize = data.iter().map(|s| s.frames.len()).sum();
    if frames != index.frames {
        return Err(Error::Format(format!(
            "{}: index declares {} frames, manifests hold {frames}",
            root.display(),
            index.frames
        )));
    }
    Ok(data)
}
