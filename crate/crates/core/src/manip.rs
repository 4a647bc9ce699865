//! Kinematic articulated-object environment and the keypoint-flow
//! manipulation policy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, fit_rigid, keypoint_flow, KeypointSet, NormalizedFrame};
use crate::linalg::{self, Vec3};
use crate::model::{pair_keypoints, ModelParams};
use crate::synth::{generate_cloud, ArticulatedScene, JointKind};

/// Flow gain tuned for a physical suction gripper. Overshoots with a kinematic
/// plant; see [`ManipConfig::gain`].
pub const REFERENCE_FLOW_GAIN: f64 = 8.0;

/// Where the rotation branch places the origin before rotating the
/// suction keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationOrigin {
    /// Centroid of the current keypoints.
    #[default]
    Centroid,
    /// Point of the fitted rotation axis closest to the keypoint centroid.
    AxisPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipConfig {
    /// Proportional coefficient applied to the largest flow magnitude.
    pub gain: f64,
    /// Largest distance moved in one step (normalized units).
    pub step_cap: f64,
    /// Rotation angle (rad) above which the rotation branch is used.
    pub theta_threshold: f64,
    /// Suction must land this close to the part surface (normalized units).
    pub attach_tolerance: f64,
    pub max_steps: usize,
    /// Normalized distance below which an episode succeeds.
    pub success_threshold: f64,
    /// Flow magnitude treated as zero.
    pub flow_epsilon: f64,
    pub rotation_origin: RotationOrigin,
    /// Points per observed cloud.
    pub points: usize,
    pub margin: f64,
    /// Smallest `|q_init - q_goal|` as a fraction of the joint range.
    pub min_gap: f64,
}

impl Default for ManipConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            step_cap: 0.25,
            theta_threshold: 0.1,
            attach_tolerance: 0.02,
            max_steps: 15,
            success_threshold: 0.1,
            flow_epsilon: 1e-9,
            rotation_origin: RotationOrigin::Centroid,
            points: 5000,
            margin: 1.1,
            min_gap: 0.3,
        }
    }
}

impl ManipConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gain,
            self.step_cap,
            self.theta_threshold,
            self.attach_tolerance,
            self.success_threshold,
            self.margin,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid(format!(
                "manipulation gains, thresholds and tolerances must be positive: {self:?}"
            )));
        }
        if self.max_steps == 0 || self.points == 0 {
            return Err(Error::Invalid(
                "max_steps and points must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.min_gap) || !(self.flow_epsilon >= 0.0) {
            return Err(Error::Invalid(format!(
                "min_gap {} must lie in [0, 1)",
                self.min_gap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub scene: ArticulatedScene,
    pub q: f64,
    pub q_goal: f64,
}

impl EnvState {
    pub fn new(scene: ArticulatedScene, q: f64, q_goal: f64) -> Result<Self> {
        scene.validate()?;
        scene.joint.check(q)?;
        scene.joint.check(q_goal)?;
        Ok(Self { scene, q, q_goal })
    }

    /// Random start and goal at least `min_gap` of the joint range apart.
    pub fn sample(scene: ArticulatedScene, min_gap: f64, rng: &mut impl Rng) -> Result<Self> {
        let [lo, hi] = scene.joint.limits;
        let gap = min_gap * scene.joint.range();
        let (q, q_goal) = loop {
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            if (a - b).abs() >= gap {
                break (a, b);
            }
        };
        Self::new(scene, q, q_goal)
    }
}

/// Current and goal clouds in one shared normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub current: Vec<Vec3>,
    pub goal: Vec<Vec3>,
    pub current_part: Vec<bool>,
    pub frame: NormalizedFrame,
}

pub fn observe(state: &EnvState, n_points: usize, margin: f64, seed: u64) -> Result<Observation> {
    let (c, current_part) = generate_cloud(&state.scene, state.q, n_points, seed)?;
    let (g, _) = generate_cloud(
        &state.scene,
        state.q_goal,
        n_points,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    let frame = NormalizedFrame::from_clouds([c.as_slice(), g.as_slice()], margin)?;
    Ok(Observation {
        current: c.iter().map(|&p| frame.to_normalized(p)).collect(),
        goal: g.iter().map(|&p| frame.to_normalized(p)).collect(),
        current_part,
        frame,
    })
}

/// Suction action. `pos` and `distance` are in the units of the keypoints
/// it was planned from; `dir` is a unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub pos: Vec3,
    pub dir: Vec3,
    pub distance: f64,
}

/// Keypoint-flow policy. Returns `None` when the flow vanishes. Sees only
/// keypoints, never the joint.
pub fn plan_action(
    k_c: &KeypointSet,
    k_g: &KeypointSet,
    cfg: &ManipConfig,
) -> Result<Option<Action>> {
    if k_c.len() < 3 {
        return Err(Error::Invalid(format!(
            "planning needs at least 3 keypoints, got {}",
            k_c.len()
        )));
    }
    let flow = keypoint_flow(k_c, k_g)?;
    let mut s = 0;
    for (i, f) in flow.iter().enumerate() {
        if linalg::norm(*f) > linalg::norm(flow[s]) {
            s = i;
        }
    }
    let mag = linalg::norm(flow[s]);
    if !mag.is_finite() {
        return Err(Error::NonFinite(format!("keypoint flow {:?}", flow[s])));
    }
    if mag <= cfg.flow_epsilon {
        return Ok(None);
    }
    let fit = fit_rigid(k_c.points(), k_g.points());
    let aa = axis_angle(&fit.transform.r);
    let straight = linalg::scale(flow[s], 1.0 / mag);
    let dir = if aa.angle <= cfg.theta_threshold {
        straight
    } else {
        let origin = match cfg.rotation_origin {
            RotationOrigin::Centroid => linalg::centroid(k_c.points()),
            RotationOrigin::AxisPoint => axis_point(
                aa.axis,
                aa.angle,
                fit.transform.t,
                linalg::centroid(k_c.points()),
            ),
        };
        let v = linalg::sub(k_c.0[s], origin);
        let moved = linalg::mat_vec(&linalg::rotation_about(aa.axis, cfg.theta_threshold), v);
        linalg::normalize(linalg::sub(moved, v)).unwrap_or(straight)
    };
    Ok(Some(Action {
        pos: k_c.0[s],
        dir,
        distance: (cfg.gain * mag).min(cfg.step_cap),
    }))
}

/// Point on the screw axis of `x ↦ R(axis, angle)·x + t` closest to `near`.
pub fn axis_point(axis: Vec3, angle: f64, t: Vec3, near: Vec3) -> Vec3 {
    let t_perp = linalg::sub(t, linalg::scale(axis, linalg::dot(axis, t)));
    let cot = libm::cos(angle * 0.5) / libm::sin(angle * 0.5);
    let p0 = linalg::scale(
        linalg::add(t_perp, linalg::scale(linalg::cross(axis, t_perp), cot)),
        0.5,
    );
    linalg::add(
        p0,
        linalg::scale(axis, linalg::dot(axis, linalg::sub(near, p0))),
    )
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state_q: f64,
    pub attached: bool,
}

/// Kinematic projection of a world-unit action onto the joint. A suction
/// point farther than `attach_tolerance` (world units) from the part leaves
/// the state unchanged.
pub fn step(state: &EnvState, action: &Action, attach_tolerance: f64) -> Result<(EnvState, bool)> {
    let scene = &state.scene;
    if scene.part_distance(state.q, action.pos) > attach_tolerance {
        return Ok((state.clone(), false));
    }
    let joint = &scene.joint;
    let dq = match joint.kind {
        JointKind::Prismatic => action.distance * linalg::dot(action.dir, joint.axis),
        JointKind::Revolute => {
            let rel = linalg::sub(action.pos, joint.origin);
            let radial = linalg::sub(rel, linalg::scale(joint.axis, linalg::dot(rel, joint.axis)));
            let r = linalg::norm(radial);
            if r < 1e-9 {
                0.0
            } else {
                let tangent = linalg::scale(linalg::cross(joint.axis, radial), 1.0 / r);
                action.distance * linalg::dot(action.dir, tangent) / r
            }
        }
    };
    let q = joint.clamp(state.q + dq);
    Ok((EnvState { q, ..state.clone() }, true))
}

/// `|q - q_goal| / |q_init - q_goal|`, or 0 when start and goal coincide.
pub fn normalized_distance(q: f64, q_init: f64, q_goal: f64) -> f64 {
    let d0 = (q_init - q_goal).abs();
    if d0 == 0.0 {
        0.0
    } else {
        (q - q_goal).abs() / d0
    }
}

/// Keypoints for the current and goal observation.
pub trait KeypointSource {
    fn keypoints(&self, obs: &Observation, state: &EnvState) -> Result<(KeypointSet, KeypointSet)>;

    /// Turns a planned suction position into the point actually grasped.
    fn grasp_point(&self, pos: Vec3, _obs: &Observation) -> Vec3 {
        pos
    }
}

/// Ground-truth part face centers at `q` and `q_goal`.
pub struct OracleKeypoints;

impl KeypointSource for OracleKeypoints {
    fn keypoints(&self, obs: &Observation, state: &EnvState) -> Result<(KeypointSet, KeypointSet)> {
        let to_n =
            |k: KeypointSet| KeypointSet(k.0.iter().map(|&p| obs.frame.to_normalized(p)).collect());
        Ok((
            to_n(state.scene.part_keypoints(state.q)),
            to_n(state.scene.part_keypoints(state.q_goal)),
        ))
    }
}

/// Keypoints from a trained model. Suction snaps to the nearest observed
/// point since a learned keypoint may float off the surface.
pub struct LearnedKeypoints<'a>(pub &'a ModelParams);

impl KeypointSource for LearnedKeypoints<'_> {
    fn keypoints(
        &self,
        obs: &Observation,
        _state: &EnvState,
    ) -> Result<(KeypointSet, KeypointSet)> {
        pair_keypoints(&obs.current, &obs.goal, self.0)
    }

    fn grasp_point(&self, pos: Vec3, obs: &Observation) -> Vec3 {
        obs.current
            .iter()
            .copied()
            .min_by(|a, b| linalg::dist(*a, pos).total_cmp(&linalg::dist(*b, pos)))
            .unwrap_or(pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    #[serde(rename = "A_pos")]
    pub a_pos: Vec3,
    #[serde(rename = "A_dir")]
    pub a_dir: Vec3,
    pub distance: f64,
    pub attached: bool,
    pub q_after: f64,
    pub d_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene: String,
    pub seed: u64,
    pub q_init: f64,
    pub q_goal: f64,
    pub steps: Vec<StepLog>,
    pub final_distance: f64,
    pub success: bool,
    /// The policy reported zero flow before reaching the goal.
    pub stalled: bool,
}

impl EpisodeResult {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }
}

/// Closed loop: observe, detect, plan, act, until success or budget.
/// Actions are planned in the observation's normalized frame and executed
/// in world units.
pub fn run_episode(
    source: &impl KeypointSource,
    start: &EnvState,
    cfg: &ManipConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let mut state = start.clone();
    let mut steps = Vec::new();
    let mut d = normalized_distance(state.q, start.q, start.q_goal);
    let mut stalled = false;
    while d >= cfg.success_threshold && steps.len() < cfg.max_steps {
        let obs = observe(
            &state,
            cfg.points,
            cfg.margin,
            seed.wrapping_add(steps.len() as u64),
        )?;
        let (k_c, k_g) = source.keypoints(&obs, &state)?;
        let Some(action) = plan_action(&k_c, &k_g, cfg)? else {
            stalled = true;
            break;
        };
        let pos = source.grasp_point(action.pos, &obs);
        let scale = obs.frame.scale;
        let world = Action {
            pos: obs.frame.to_world(pos),
            dir: action.dir,
            distance: action.distance * scale,
        };
        let (next, attached) = step(&state, &world, cfg.attach_tolerance * scale)?;
        state = next;
        d = normalized_distance(state.q, start.q, start.q_goal);
        steps.push(StepLog {
            a_pos: world.pos,
            a_dir: world.dir,
            distance: world.distance,
            attached,
            q_after: state.q,
            d_after: d,
        });
    }
    Ok(EpisodeResult {
        scene: start.scene.name.clone(),
        seed,
        q_init: start.q,
        q_goal: start.q_goal,
        steps,
        final_distance: d,
        success: d < cfg.success_threshold,
        stalled,
    })
}

/// `count` episodes on one scene; episode `i` draws its start and goal from
/// stream `i` of the seed.
pub fn run_episodes(
    source: &impl KeypointSource,
    scene: &ArticulatedScene,
    count: usize,
    cfg: &ManipConfig,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    if count == 0 {
        return Err(Error::Invalid("at least one episode is required".into()));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let start = EnvState::sample(scene.clone(), cfg.min_gap, &mut rng)?;
            run_episode(source, &start, cfg, rng.random())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_normalized_distance: f64,
}

pub fn manipulation_metrics(results: &[EpisodeResult]) -> Result<ManipMetrics> {
    if results.is_empty() {
        return Err(Error::Invalid("no episodes to aggregate".into()));
    }
    let n = results.len() as f64;
    Ok(ManipMetrics {
        episodes: results.len(),
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        mean_normalized_distance: results.iter().map(|r| r.final_distance).sum::<f64>() / n,
    })
}
