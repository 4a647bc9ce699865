//! Two-box articulated scenes (a door on a hinge, a drawer on a slide) and
//! the frame sequences, occupancy queries and augmentations built from them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KeypointSet, NormalizedFrame, RigidTransform};
use crate::linalg::{self, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub kind: JointKind,
    /// A point on the hinge line (unused for prismatic joints).
    pub origin: Vec3,
    pub axis: Vec3,
    pub limits: [f64; 2],
}

impl JointSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.limits;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Invalid(format!(
                "joint limits [{lo}, {hi}] are empty"
            )));
        }
        if (linalg::norm(self.axis) - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "joint axis {:?} is not unit length",
                self.axis
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.limits[1] - self.limits[0]
    }

    pub fn check(&self, q: f64) -> Result<()> {
        let [lo, hi] = self.limits;
        if q < lo || q > hi || !q.is_finite() {
            return Err(Error::JointLimit { value: q, lo, hi });
        }
        Ok(())
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.limits[0], self.limits[1])
    }

    /// Pose of the part at joint value `q` relative to its rest pose.
    pub fn transform(&self, q: f64) -> RigidTransform {
        match self.kind {
            JointKind::Revolute => RigidTransform::about_line(self.origin, self.axis, q),
            JointKind::Prismatic => RigidTransform::translation(linalg::scale(self.axis, q)),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: Vec3,
    pub half: Vec3,
}

impl BoxSpec {
    pub fn area(&self) -> f64 {
        let [a, b, c] = self.half;
        8.0 * (a * b + b * c + a * c)
    }

    /// Centers of the six faces: -x, +x, -y, +y, -z, +z.
    pub fn face_centers(&self) -> [Vec3; 6] {
        let mut out = [self.center; 6];
        for axis in 0..3 {
            out[2 * axis][axis] -= self.half[axis];
            out[2 * axis + 1][axis] += self.half[axis];
        }
        out
    }

    /// Uniform point on the surface.
    fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        let [a, b, c] = self.half;
        // face pairs normal to x, y, z with areas 4bc, 4ac, 4ab
        let w = [b * c, a * c, a * b];
        let mut pick = rng.random::<f64>() * (w[0] + w[1] + w[2]);
        let mut normal = 2;
        for (i, &wi) in w.iter().enumerate() {
            if pick < wi {
                normal = i;
                break;
            }
            pick -= wi;
        }
        let mut p = [0.0; 3];
        for axis in 0..3 {
            p[axis] = if axis == normal {
                if rng.random::<bool>() {
                    self.half[axis]
                } else {
                    -self.half[axis]
                }
            } else {
                rng.random_range(-self.half[axis]..=self.half[axis])
            };
        }
        linalg::add(p, self.center)
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let d = linalg::sub(p, self.center);
        let q: Vec3 = core::array::from_fn(|i| d[i].abs() - self.half[i]);
        let outside = linalg::norm(core::array::from_fn(|i| q[i].max(0.0)));
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        outside + inside.abs()
    }
}

/// A fixed base box plus one mobile box on a single joint, in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArticulatedScene {
    pub name: String,
    pub base: BoxSpec,
    /// Mobile part at joint value 0.
    pub part: BoxSpec,
    pub joint: JointSpec,
}

impl ArticulatedScene {
    /// Cabinet with a door hinged on its front-left edge, opening outward.
    pub fn door() -> Self {
        Self {
            name: "door".into(),
            base: BoxSpec {
                center: [0.0, 0.0, 0.0],
                half: [0.4, 0.3, 0.5],
            },
            part: BoxSpec {
                center: [0.0, -0.32, 0.0],
                half: [0.4, 0.02, 0.5],
            },
            joint: JointSpec {
                kind: JointKind::Revolute,
                origin: [-0.4, -0.3, 0.0],
                axis: [0.0, 0.0, -1.0],
                limits: [0.0, 1.5],
            },
        }
    }

    /// Cabinet with a drawer sliding out of its front face.
    pub fn drawer() -> Self {
        Self {
            name: "drawer".into(),
            base: BoxSpec {
                center: [0.0, 0.0, 0.0],
                half: [0.4, 0.3, 0.5],
            },
            part: BoxSpec {
                center: [0.0, -0.07, 0.2],
                half: [0.3, 0.25, 0.12],
            },
            joint: JointSpec {
                kind: JointKind::Prismatic,
                origin: [0.0; 3],
                axis: [0.0, -1.0, 0.0],
                limits: [0.0, 0.4],
            },
        }
    }

    /// Built-in scene by name.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "door" => Ok(Self::door()),
            "drawer" => Ok(Self::drawer()),
            other => Err(Error::Invalid(format!(
                "unknown scene `{other}` (expected door or drawer)"
            ))),
        }
    }

    /// Copy with every dimension scaled by an independent factor in
    /// `[1 - jitter, 1 + jitter]`. Attachment points move with the boxes.
    pub fn jittered(&self, jitter: f64, rng: &mut impl Rng) -> Self {
        if jitter <= 0.0 {
            return self.clone();
        }
        let s: Vec3 = core::array::from_fn(|_| 1.0 + rng.random_range(-jitter..=jitter));
        let mul = |v: Vec3| -> Vec3 { core::array::from_fn(|i| v[i] * s[i]) };
        let mut out = self.clone();
        out.base = BoxSpec {
            center: mul(self.base.center),
            half: mul(self.base.half),
        };
        out.part = BoxSpec {
            center: mul(self.part.center),
            half: mul(self.part.half),
        };
        out.joint.origin = mul(self.joint.origin);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.joint.validate()?;
        for b in [&self.base, &self.part] {
            if b.half.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::Invalid(format!(
                    "box half extents must be positive: {:?}",
                    b.half
                )));
            }
        }
        Ok(())
    }

    /// Six part face centers carried to joint value `q` (world units).
    pub fn part_keypoints(&self, q: f64) -> KeypointSet {
        let t = self.joint.transform(q);
        KeypointSet(
            self.part
                .face_centers()
                .iter()
                .map(|&p| t.apply(p))
                .collect(),
        )
    }

    /// Distance from a world point to the part surface at joint value `q`.
    pub fn part_distance(&self, q: f64, p: Vec3) -> f64 {
        self.part
            .surface_distance(self.joint.transform(q).inverse().apply(p))
    }

    pub fn base_distance(&self, p: Vec3) -> f64 {
        self.base.surface_distance(p)
    }
}

/// Area-weighted uniform surface samples of both boxes at joint value `q`,
/// with a mask marking part points. World units.
pub fn generate_cloud(
    scene: &ArticulatedScene,
    q: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec3>, Vec<bool>)> {
    scene.joint.check(q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = scene.joint.transform(q);
    let part_share = scene.part.area() / (scene.part.area() + scene.base.area());
    let mut points = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let on_part = rng.random::<f64>() < part_share;
        let p = if on_part {
            t.apply(scene.part.sample_surface(&mut rng))
        } else {
            scene.base.sample_surface(&mut rng)
        };
        points.push(p);
        mask.push(on_part);
    }
    Ok((points, mask))
}

/// One frame of a sequence, in the sequence's normalized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub points: Vec<Vec3>,
    pub part: Vec<bool>,
    pub joint_value: f64,
    /// Part pose relative to the first frame.
    pub pose: RigidTransform,
}

/// Two or three frames of one scene sharing a normalized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub scene: ArticulatedScene,
    pub normalization: NormalizedFrame,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Ground-truth part motion taking frame `a` to frame `b`.
    pub fn relative_motion(&self, a: usize, b: usize) -> RigidTransform {
        self.frames[b].pose.compose(&self.frames[a].pose.inverse())
    }

    /// Part points of frame `a`.
    pub fn part_points(&self, a: usize) -> Vec<Vec3> {
        let f = &self.frames[a];
        f.points
            .iter()
            .zip(&f.part)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Largest rotation angle (radians) about a random axis.
    pub max_rotation: f64,
    /// Largest translation per axis (normalized units).
    pub max_translation: f64,
    /// Per-point Gaussian jitter (normalized units).
    pub noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation: 0.3,
            max_translation: 0.05,
            noise: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Built-in scene names cycled over the generated scenes.
    pub scenes: Vec<String>,
    pub pairs_per_scene: usize,
    pub triplets_per_scene: usize,
    pub points_per_frame: usize,
    /// Cube margin of the normalized frame.
    pub margin: f64,
    /// Minimum joint separation as a fraction of the joint range.
    pub min_separation: f64,
    /// Relative size jitter of generated scenes.
    pub size_jitter: f64,
    pub positive_queries: usize,
    pub negative_queries: usize,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: alloc::vec!["door".into(), "drawer".into()],
            pairs_per_scene: 20,
            triplets_per_scene: 10,
            points_per_frame: 5000,
            margin: 1.1,
            min_separation: 0.15,
            size_jitter: 0.0,
            positive_queries: 1000,
            negative_queries: 1000,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::Invalid("data.scenes is empty".into()));
        }
        for s in &self.scenes {
            ArticulatedScene::named(s)?;
        }
        if self.points_per_frame == 0 {
            return Err(Error::Invalid("points_per_frame must be positive".into()));
        }
        if !(self.min_separation >= 0.0 && self.min_separation < 0.5) {
            return Err(Error::Invalid(format!(
                "min_separation {} must be in [0, 0.5)",
                self.min_separation
            )));
        }
        if !(self.margin >= 1.0) {
            return Err(Error::Invalid(format!(
                "margin {} must be at least 1",
                self.margin
            )));
        }
        if self.positive_queries > self.points_per_frame {
            return Err(Error::Invalid(
                "positive_queries exceeds points_per_frame".into(),
            ));
        }
        Ok(())
    }

    /// Frames per scene: two per pair, three per triplet.
    pub fn frames_per_scene(&self) -> usize {
        2 * self.pairs_per_scene + 3 * self.triplets_per_scene
    }
}

fn build_sequence(
    scene: &ArticulatedScene,
    values: &[f64],
    cfg: &DataConfig,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    let mut world = Vec::with_capacity(values.len());
    for &q in values {
        world.push(generate_cloud(
            scene,
            q,
            cfg.points_per_frame,
            rng.random(),
        )?);
    }
    let normalization =
        NormalizedFrame::from_clouds(world.iter().map(|(p, _)| p.as_slice()), cfg.margin)?;
    let first = scene.joint.transform(values[0]).inverse();
    let frames = world
        .into_iter()
        .zip(values)
        .map(|((points, part), &q)| Frame {
            points: points
                .iter()
                .map(|&p| normalization.to_normalized(p))
                .collect(),
            part,
            joint_value: q,
            pose: normalization.transform_to_normalized(&scene.joint.transform(q).compose(&first)),
        })
        .collect();
    Ok(Sequence {
        scene: scene.clone(),
        normalization,
        frames,
    })
}

/// Two joint values at least `min_separation · range` apart.
pub fn sample_pair(
    scene: &ArticulatedScene,
    cfg: &DataConfig,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    let [lo, hi] = scene.joint.limits;
    let gap = cfg.min_separation * scene.joint.range();
    let a = rng.random_range(lo..=hi);
    // draw the second value from the admissible set on either side of `a`
    let below = (a - gap - lo).max(0.0);
    let above = (hi - (a + gap)).max(0.0);
    let b = if below + above <= 0.0 {
        if a - lo > hi - a {
            lo
        } else {
            hi
        }
    } else {
        let u = rng.random_range(0.0..below + above);
        if u < below {
            lo + u
        } else {
            a + gap + (u - below)
        }
    };
    build_sequence(scene, &[a, b], cfg, rng)
}

/// Three monotone joint values with consecutive gaps of at least
/// `min_separation · range`.
pub fn sample_triplet(
    scene: &ArticulatedScene,
    cfg: &DataConfig,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    let [lo, hi] = scene.joint.limits;
    let gap = cfg.min_separation * scene.joint.range();
    let slack = (scene.joint.range() - 2.0 * gap).max(0.0);
    // three sorted uniforms in the slack, then re-insert the two gaps
    let mut u = [
        rng.random_range(0.0..=slack),
        rng.random_range(0.0..=slack),
        rng.random_range(0.0..=slack),
    ];
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut values = [lo + u[0], lo + u[1] + gap, (lo + u[2] + 2.0 * gap).min(hi)];
    if rng.random::<bool>() {
        values.reverse();
    }
    build_sequence(scene, &values, cfg, rng)
}

/// Scenes and sequences of a dataset, as a pure function of the seed.
pub fn generate_dataset(cfg: &DataConfig, scenes: usize, seed: u64) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for i in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let template = ArticulatedScene::named(&cfg.scenes[i % cfg.scenes.len()])?;
        let mut scene = template.jittered(cfg.size_jitter, &mut rng);
        scene.name = format!("{}_{i:03}", template.name);
        for _ in 0..cfg.pairs_per_scene {
            out.push(sample_pair(&scene, cfg, &mut rng)?);
        }
        for _ in 0..cfg.triplets_per_scene {
            out.push(sample_triplet(&scene, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

/// Occupancy queries: `n_pos` distinct cloud points labeled 1 and `n_neg`
/// uniform points in the cube labeled 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Vec3>,
    pub labels: Vec<f64>,
}

pub fn sample_queries(
    cloud: &[Vec3],
    n_pos: usize,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<QueryBatch> {
    if n_pos > cloud.len() {
        return Err(Error::Invalid(format!(
            "{n_pos} positive queries requested from {} points",
            cloud.len()
        )));
    }
    let mut points = Vec::with_capacity(n_pos + n_neg);
    let mut labels = Vec::with_capacity(n_pos + n_neg);
    for i in rand::seq::index::sample(rng, cloud.len(), n_pos).into_iter() {
        points.push(cloud[i]);
        labels.push(1.0);
    }
    for _ in 0..n_neg {
        points.push(core::array::from_fn(|_| rng.random_range(-0.5..=0.5)));
        labels.push(0.0);
    }
    Ok(QueryBatch { points, labels })
}

/// Random rotation (uniform axis, angle up to `max_angle`) and translation.
pub fn random_rigid(max_angle: f64, max_translation: f64, rng: &mut impl Rng) -> RigidTransform {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let axis = loop {
        let v: Vec3 = core::array::from_fn(|_| normal.sample(rng));
        if let Some(a) = linalg::normalize(v) {
            break a;
        }
    };
    let angle = if max_angle > 0.0 {
        rng.random_range(-max_angle..=max_angle)
    } else {
        0.0
    };
    let t: Vec3 = if max_translation > 0.0 {
        core::array::from_fn(|_| rng.random_range(-max_translation..=max_translation))
    } else {
        [0.0; 3]
    };
    RigidTransform {
        r: linalg::rotation_about(axis, angle),
        t,
    }
}

/// Applies one shared rigid motion to every frame, re-fits the normalized
/// cube around the result, then jitters each point. Ground-truth poses are
/// conjugated accordingly.
pub fn augment(
    seq: &Sequence,
    cfg: &AugmentConfig,
    margin: f64,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    if cfg.noise < 0.0 {
        return Err(Error::Invalid(format!(
            "augmentation noise {} is negative",
            cfg.noise
        )));
    }
    let a = random_rigid(cfg.max_rotation, cfg.max_translation, rng);
    let moved: Vec<Vec<Vec3>> = seq
        .frames
        .iter()
        .map(|f| f.points.iter().map(|&p| a.apply(p)).collect())
        .collect();
    let renorm = NormalizedFrame::from_clouds(moved.iter().map(Vec::as_slice), margin)?;
    // s(x) = renorm(a(x)) is a similarity; poses become s ∘ pose ∘ s⁻¹
    let s = |p: Vec3| renorm.to_normalized(a.apply(p));
    let s_inv = |p: Vec3| a.inverse().apply(renorm.to_world(p));
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Invalid(format!("{e}")))?;
    let frames = seq
        .frames
        .iter()
        .zip(&moved)
        .map(|(f, pts)| {
            let points = pts
                .iter()
                .map(|&p| {
                    let n = renorm.to_normalized(p);
                    if cfg.noise > 0.0 {
                        core::array::from_fn(|i| n[i] + noise.sample(rng))
                    } else {
                        n
                    }
                })
                .collect();
            let r = linalg::mat_mul(&linalg::mat_mul(&a.r, &f.pose.r), &linalg::transpose(&a.r));
            let t = s(f.pose.apply(s_inv([0.0; 3])));
            Frame {
                points,
                part: f.part.clone(),
                joint_value: f.joint_value,
                pose: RigidTransform { r, t },
            }
        })
        .collect();
    let normalization = NormalizedFrame {
        center: seq.normalization.to_world(s_inv([0.0; 3])),
        scale: seq.normalization.scale * renorm.scale,
    };
    Ok(Sequence {
        scene: seq.scene.clone(),
        normalization,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, fit_rigid};

    fn cfg() -> DataConfig {
        DataConfig {
            points_per_frame: 400,
            ..DataConfig::default()
        }
    }

    #[test]
    fn rest_pose_part_points_lie_on_part_box() {
        let scene = ArticulatedScene::door();
        let (pts, mask) = generate_cloud(&scene, 0.0, 500, 1).unwrap();
        for (p, m) in pts.iter().zip(&mask) {
            if *m {
                assert!(scene.part.surface_distance(*p) < 1e-12);
            }
        }
        assert!(generate_cloud(&scene, 2.0, 10, 1).is_err());
    }

    #[test]
    fn prismatic_value_translates_part_points() {
        let scene = ArticulatedScene::drawer();
        let (rest, mask) = generate_cloud(&scene, 0.0, 300, 9).unwrap();
        let (open, mask2) = generate_cloud(&scene, 0.25, 300, 9).unwrap();
        assert_eq!(mask, mask2);
        for ((a, b), m) in rest.iter().zip(&open).zip(&mask) {
            let expect = if *m {
                linalg::add(*a, [0.0, -0.25, 0.0])
            } else {
                *a
            };
            assert!(linalg::dist(*b, expect) < 1e-12);
        }
    }

    #[test]
    fn pairs_are_separated_and_triplets_monotone() {
        let scene = ArticulatedScene::door();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let p = sample_pair(&scene, &c, &mut rng).unwrap();
            let (a, b) = (p.frames[0].joint_value, p.frames[1].joint_value);
            assert!((a - b).abs() >= 0.15 * 1.5 - 1e-12);
            let t = sample_triplet(&scene, &c, &mut rng).unwrap();
            let v: Vec<f64> = t.frames.iter().map(|f| f.joint_value).collect();
            assert!(
                (v[0] < v[1] && v[1] < v[2]) || (v[0] > v[1] && v[1] > v[2]),
                "{v:?}"
            );
        }
    }

    #[test]
    fn gt_pose_matches_part_points_and_axis() {
        let scene = ArticulatedScene::door();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = sample_pair(
            &scene,
            &DataConfig {
                points_per_frame: 200,
                ..cfg()
            },
            &mut rng,
        )
        .unwrap();
        let motion = seq.relative_motion(0, 1);
        let aa = axis_angle(&motion.r);
        assert!(linalg::dot(aa.axis, [0.0, 0.0, 1.0]).abs() > 1.0 - 1e-9);
        // the same seed regenerates identical rest samples, so part points correspond
        let (w0, m0) = generate_cloud(&scene, 0.0, 50, 77).unwrap();
        let src: Vec<Vec3> = w0
            .iter()
            .zip(&m0)
            .filter(|(_, &m)| m)
            .map(|(p, _)| {
                seq.normalization
                    .to_normalized(scene.joint.transform(seq.frames[0].joint_value).apply(*p))
            })
            .collect();
        let dst: Vec<Vec3> = w0
            .iter()
            .zip(&m0)
            .filter(|(_, &m)| m)
            .map(|(p, _)| {
                seq.normalization
                    .to_normalized(scene.joint.transform(seq.frames[1].joint_value).apply(*p))
            })
            .collect();
        let fit = fit_rigid(&src, &dst);
        assert!(fit.residual < 1e-9);
        for (a, b) in src.iter().zip(&dst) {
            assert!(linalg::dist(motion.apply(*a), *b) < 1e-9);
        }
    }

    #[test]
    fn queries_have_expected_labels() {
        let scene = ArticulatedScene::drawer();
        let (pts, _) = generate_cloud(&scene, 0.1, 300, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = sample_queries(&pts, 100, 50, &mut rng).unwrap();
        assert_eq!(q.labels.iter().sum::<f64>(), 100.0);
        for p in &q.points[..100] {
            assert!(pts.contains(p));
        }
        assert!(sample_queries(&pts, 301, 0, &mut rng).is_err());
    }

    #[test]
    fn identity_augmentation_is_a_no_op_up_to_renormalization() {
        let scene = ArticulatedScene::door();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = sample_pair(&scene, &cfg(), &mut rng).unwrap();
        let none = AugmentConfig {
            enabled: true,
            max_rotation: 0.0,
            max_translation: 0.0,
            noise: 0.0,
        };
        let out = augment(&seq, &none, 1.1, &mut rng).unwrap();
        for (a, b) in seq.frames.iter().zip(&out.frames) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!(linalg::dist(*p, *q) < 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_conjugates_gt_motion() {
        let scene = ArticulatedScene::door();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg();
        let seq = sample_pair(&scene, &c, &mut rng).unwrap();
        let rigid = AugmentConfig {
            enabled: true,
            max_rotation: 1.0,
            max_translation: 0.1,
            noise: 0.0,
        };
        let out = augment(&seq, &rigid, c.margin, &mut rng).unwrap();
        // recover the similarity x -> k R x + t from frame-0 correspondences
        let orig = &seq.frames[0].points;
        let aug = &out.frames[0].points;
        let spread = |pts: &[Vec3]| {
            let c = linalg::centroid(pts);
            pts.iter()
                .map(|p| linalg::dot(linalg::sub(*p, c), linalg::sub(*p, c)))
                .sum::<f64>()
        };
        let k = libm::sqrt(spread(aug) / spread(orig));
        let scaled: Vec<Vec3> = orig.iter().map(|&p| linalg::scale(p, k)).collect();
        let sim = fit_rigid(&scaled, aug);
        assert!(sim.residual < 1e-18 * orig.len() as f64 + 1e-20);
        let s = |p: Vec3| sim.transform.apply(linalg::scale(p, k));
        let before = seq.relative_motion(0, 1);
        let after = out.relative_motion(0, 1);
        assert!(after.orthonormality_error() < 1e-9);
        for x in seq.part_points(0) {
            assert!(linalg::dist(after.apply(s(x)), s(before.apply(x))) < 1e-9);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_counts_frames() {
        let c = DataConfig {
            pairs_per_scene: 2,
            triplets_per_scene: 1,
            points_per_frame: 50,
            positive_queries: 10,
            ..cfg()
        };
        let a = generate_dataset(&c, 2, 7).unwrap();
        let b = generate_dataset(&c, 2, 7).unwrap();
        assert_eq!(a, b);
        let frames: usize = a.iter().map(|s| s.frames.len()).sum();
        assert_eq!(frames, 2 * c.frames_per_scene());
    }
}
