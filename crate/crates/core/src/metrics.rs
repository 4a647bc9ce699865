//! Keypoint quality metrics and the per-pair evaluation protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fit_rigid, KeypointSet, RigidTransform};
use crate::linalg::{self, Vec3};
use crate::model::{pair_keypoints, ModelParams};
use crate::synth::Sequence;

/// Distance of every frame-b keypoint from its frame-a partner carried by
/// the ground-truth part motion.
pub fn carried_distances(
    k_a: &KeypointSet,
    k_b: &KeypointSet,
    gt: &RigidTransform,
) -> Result<Vec<f64>> {
    if k_a.len() != k_b.len() || k_a.is_empty() {
        return Err(Error::Shape(format!(
            "keypoint counts {} and {}",
            k_a.len(),
            k_b.len()
        )));
    }
    Ok(k_a
        .points()
        .iter()
        .zip(k_b.points())
        .map(|(a, b)| linalg::dist(gt.apply(*a), *b))
        .collect())
}

/// Mean carried keypoint distance.
pub fn ackd(k_a: &KeypointSet, k_b: &KeypointSet, gt: &RigidTransform) -> Result<f64> {
    let d = carried_distances(k_a, k_b, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of keypoints whose carried distance is below `tau`.
pub fn rr(k_a: &KeypointSet, k_b: &KeypointSet, gt: &RigidTransform, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!(
            "rr threshold must be positive, got {tau}"
        )));
    }
    let d = carried_distances(k_a, k_b, gt)?;
    Ok(d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64)
}

/// Mean distance between part points moved by the predicted and the true motion.
pub fn add_metric(pred: &RigidTransform, gt: &RigidTransform, part_points: &[Vec3]) -> Result<f64> {
    if part_points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let total: f64 = part_points
        .iter()
        .map(|&x| linalg::dist(pred.apply(x), gt.apply(x)))
        .sum();
    Ok(total / part_points.len() as f64)
}

/// Source of keypoints for a pair of frames of one sequence.
pub trait Detector {
    fn detect(&self, seq: &Sequence, a: usize, b: usize) -> Result<(KeypointSet, KeypointSet)>;
}

/// The learned detector.
pub struct ModelDetector<'a>(pub &'a ModelParams);

impl Detector for ModelDetector<'_> {
    fn detect(&self, seq: &Sequence, a: usize, b: usize) -> Result<(KeypointSet, KeypointSet)> {
        pair_keypoints(&seq.frames[a].points, &seq.frames[b].points, self.0)
    }
}

/// Part centroid plus fixed offsets in frame a, carried by the true motion.
pub struct OracleDetector {
    pub offsets: Vec<Vec3>,
}

impl Default for OracleDetector {
    fn default() -> Self {
        let o = 0.05;
        Self {
            offsets: alloc::vec![
                [o, 0.0, 0.0],
                [-o, 0.0, 0.0],
                [0.0, o, 0.0],
                [0.0, -o, 0.0],
                [0.0, 0.0, o],
                [0.0, 0.0, -o]
            ],
        }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, seq: &Sequence, a: usize, b: usize) -> Result<(KeypointSet, KeypointSet)> {
        let c = linalg::centroid(&seq.part_points(a));
        let k_a = KeypointSet(self.offsets.iter().map(|&o| linalg::add(c, o)).collect());
        let k_b = k_a.transformed(&seq.relative_motion(a, b));
        Ok((k_a, k_b))
    }
}

/// Independent uniform keypoints in the cube for each frame.
pub struct RandomDetector {
    pub count: usize,
    pub seed: u64,
}

impl Detector for RandomDetector {
    fn detect(&self, seq: &Sequence, a: usize, b: usize) -> Result<(KeypointSet, KeypointSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((a as u64) << 32 | b as u64));
        rng.set_stream(seq.frames[a].points.len() as u64);
        let draw = |rng: &mut ChaCha8Rng| {
            KeypointSet(
                (0..self.count)
                    .map(|_| core::array::from_fn(|_| rng.random_range(-0.5..0.5)))
                    .collect(),
            )
        };
        let k_a = draw(&mut rng);
        let k_b = draw(&mut rng);
        Ok((k_a, k_b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub sequence: usize,
    pub scene: String,
    pub frames: [usize; 2],
    pub ackd: f64,
    pub rr: f64,
    pub add: f64,
    /// Mean keypoint distance to the mobile part surface (normalized units).
    pub part_distance: f64,
    /// Mean keypoint distance to the base surface (normalized units).
    pub base_distance: f64,
    pub keypoints_a: Vec<Vec3>,
    pub keypoints_b: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub ackd: f64,
    pub rr: f64,
    pub add: f64,
    pub part_distance: f64,
    pub base_distance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionReport {
    pub tau: f64,
    pub per_pair: Vec<PairReport>,
    pub aggregate: Aggregate,
}

/// Mean keypoint distances to the part and base surfaces of frame `a`.
fn localization(seq: &Sequence, a: usize, k: &KeypointSet) -> (f64, f64) {
    let q = seq.frames[a].joint_value;
    let n = seq.normalization;
    let (mut part, mut base) = (0.0, 0.0);
    for &p in k.points() {
        let w = n.to_world(p);
        part += seq.scene.part_distance(q, w) / n.scale;
        base += seq.scene.base_distance(w) / n.scale;
    }
    (part / k.len() as f64, base / k.len() as f64)
}

/// Scores every consecutive frame pair of every sequence.
pub fn evaluate(detector: &impl Detector, data: &[Sequence], tau: f64) -> Result<PerceptionReport> {
    let mut per_pair = Vec::new();
    for (si, seq) in data.iter().enumerate() {
        for a in 0..seq.frames.len().saturating_sub(1) {
            let b = a + 1;
            let (k_a, k_b) = detector.detect(seq, a, b)?;
            let gt = seq.relative_motion(a, b);
            let fit = fit_rigid(k_a.points(), k_b.points());
            let (part_distance, base_distance) = localization(seq, a, &k_a);
            per_pair.push(PairReport {
                sequence: si,
                scene: seq.scene.name.clone(),
                frames: [a, b],
                ackd: ackd(&k_a, &k_b, &gt)?,
                rr: rr(&k_a, &k_b, &gt, tau)?,
                add: add_metric(&fit.transform, &gt, &seq.part_points(a))?,
                part_distance,
                base_distance,
                keypoints_a: k_a.0,
                keypoints_b: k_b.0,
            });
        }
    }
    if per_pair.is_empty() {
        return Err(Error::Invalid("no frame pairs to evaluate".into()));
    }
    let n = per_pair.len() as f64;
    let mean = |f: fn(&PairReport) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        ackd: mean(|p| p.ackd),
        rr: mean(|p| p.rr),
        add: mean(|p| p.add),
        part_distance: mean(|p| p.part_distance),
        base_distance: mean(|p| p.base_distance),
        pairs: per_pair.len(),
    };
    Ok(PerceptionReport {
        tau,
        per_pair,
        aggregate,
    })
}
