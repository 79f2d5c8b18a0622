//! Synthetic workspace scenes and kinesthetic-style demonstrations.
//!
//! Stands in for a camera + teaching rig: each scene is a small RGB image
//! of red berry blobs on a green/brown background with the target berry
//! masked by a white box, plus the reach pose that box implies. Each
//! demonstration is a minimum-jerk point-to-point motion from a fixed home
//! pose to the (noise-perturbed) target, recorded both in task space and
//! through a fixed nonlinear surrogate joint map.
//!
//! All values that end up in the on-disk container are quantized to `f32`
//! at generation time, so save → load round-trips are bit-exact.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::derive_seed;
use crate::promp::Trajectory;

#[derive(Error, Debug)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place {requested} berries after {attempts} attempts; image too small or too crowded")]
    LayoutOverflow { requested: usize, attempts: usize },
}

/// Workspace cuboid the reach targets live in (meters). The bounds are
/// binary fractions so mapped positions stay exact under f32 quantization.
pub const WORKSPACE_X: (f64, f64) = (0.3125, 0.6875);
pub const WORKSPACE_Y: (f64, f64) = (-0.25, 0.25);
pub const WORKSPACE_Z: (f64, f64) = (0.1875, 0.5625);

/// Fixed home pose every demonstration starts from.
pub const HOME_POSITION: [f64; 3] = [0.3125, 0.0, 0.5625];
pub const HOME_QUATERNION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Task-space channel count: x, y, z plus a w-x-y-z quaternion.
pub const TASK_DIMS: usize = 7;
/// Surrogate arm joint count.
pub const JOINT_DIMS: usize = 7;

/// Row-major interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }
}

/// Position plus w-x-y-z unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
}

impl Pose {
    pub fn as_vector(&self) -> [f64; 7] {
        [
            self.position[0],
            self.position[1],
            self.position[2],
            self.quaternion[0],
            self.quaternion[1],
            self.quaternion[2],
            self.quaternion[3],
        ]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            position: [v[0], v[1], v[2]],
            quaternion: [v[3], v[4], v[5], v[6]],
        }
    }
}

/// One rendered workspace with its reach target.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageBuf,
    /// Target-box center in normalized pixel coordinates, each in `[0, 1]`.
    pub condition: [f64; 2],
    pub target_pose: Pose,
    pub config_id: u32,
    pub target_id: u32,
}

/// A recorded reach: the same motion in task space and through the
/// surrogate joint map.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub scene_index: usize,
    pub joint: Trajectory,
    pub task: Trajectory,
}

/// Scene/demonstration generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub n_distractors: usize,
    pub n_configs: usize,
    pub n_targets: usize,
    pub n_repeats: usize,
    /// Samples per trajectory.
    pub n_steps: usize,
    /// Motion duration in seconds; `dt = duration / (n_steps - 1)`.
    pub duration: f64,
    /// Endpoint position noise, meters (also scales endpoint orientation
    /// noise through [`ROTATION_NOISE_COUPLING`]).
    pub sigma_end: f64,
    /// Mid-trajectory bump noise, meters.
    pub sigma_mid: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            n_distractors: 6,
            n_configs: 5,
            n_targets: 5,
            n_repeats: 10,
            n_steps: 100,
            duration: 5.0,
            sigma_end: 0.01,
            sigma_mid: 0.02,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.image_h < 16 || self.image_w < 16 {
            return Err(SceneError::InvalidConfig(
                "image size must be at least 16x16".into(),
            ));
        }
        if self.n_distractors < 1 || self.n_distractors > 8 {
            return Err(SceneError::InvalidConfig(
                "distractor count must be in 1..=8".into(),
            ));
        }
        if self.n_configs < 1 || self.n_targets < 1 || self.n_repeats < 1 {
            return Err(SceneError::InvalidConfig(
                "counts must be at least 1".into(),
            ));
        }
        if self.n_steps < 2 {
            return Err(SceneError::InvalidConfig("n_steps must be >= 2".into()));
        }
        if !(self.duration > 0.0) {
            return Err(SceneError::InvalidConfig("duration must be > 0".into()));
        }
        if self.sigma_end < 0.0 || self.sigma_mid < 0.0 {
            return Err(SceneError::InvalidConfig("noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.duration / (self.n_steps - 1) as f64
    }

    pub fn n_scenes(&self) -> usize {
        self.n_configs * self.n_targets
    }
}

/// Endpoint orientation noise per meter of endpoint position noise.
pub const ROTATION_NOISE_COUPLING: f64 = 2.0;

/// Map a normalized box center `(u, v)` to a workspace position.
///
/// `u` moves laterally, `v` moves down the image and therefore down the
/// workspace; depth varies with their mean. `(0, 0)` maps to the cuboid
/// corner `(x_lo, y_lo, z_hi)`.
pub fn condition_to_position(u: f64, v: f64) -> [f64; 3] {
    [
        WORKSPACE_X.0 + 0.5 * (u + v) * (WORKSPACE_X.1 - WORKSPACE_X.0),
        WORKSPACE_Y.0 + u * (WORKSPACE_Y.1 - WORKSPACE_Y.0),
        WORKSPACE_Z.1 - v * (WORKSPACE_Z.1 - WORKSPACE_Z.0),
    ]
}

/// Orientation facing `target` from the home position: yaw about z toward
/// the target, then pitch about y to line up the approach axis.
pub fn facing_quaternion(target: &[f64; 3]) -> [f64; 4] {
    let dx = target[0] - HOME_POSITION[0];
    let dy = target[1] - HOME_POSITION[1];
    let dz = target[2] - HOME_POSITION[2];
    let yaw = dy.atan2(dx.max(1e-6));
    let pitch = (-dz).atan2((dx * dx + dy * dy).sqrt().max(1e-6));
    let qz = [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()];
    let qy = [(pitch / 2.0).cos(), 0.0, (pitch / 2.0).sin(), 0.0];
    quat_normalize(quat_mul(&qz, &qy))
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_from_rotation_vector(r: [f64; 3]) -> [f64; 4] {
    let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if angle < 1e-12 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let half = 0.5 * angle;
    let s = half.sin() / angle;
    [half.cos(), r[0] * s, r[1] * s, r[2] * s]
}

/// Spherical interpolation with exact endpoints at `s = 0` and `s = 1`.
fn slerp(q0: &[f64; 4], q1: &[f64; 4], s: f64) -> [f64; 4] {
    if s == 0.0 {
        return *q0;
    }
    if s == 1.0 {
        return *q1;
    }
    let mut b = *q1;
    let mut dot = q0[0] * b[0] + q0[1] * b[1] + q0[2] * b[2] + q0[3] * b[3];
    if dot < 0.0 {
        for v in &mut b {
            *v = -*v;
        }
        dot = -dot;
    }
    if dot > 1.0 - 1e-10 {
        // Nearly identical: fall back to normalized linear interpolation.
        let out = [
            q0[0] + s * (b[0] - q0[0]),
            q0[1] + s * (b[1] - q0[1]),
            q0[2] + s * (b[2] - q0[2]),
            q0[3] + s * (b[3] - q0[3]),
        ];
        return quat_normalize(out);
    }
    let omega = dot.acos();
    let sin_omega = omega.sin();
    let w0 = ((1.0 - s) * omega).sin() / sin_omega;
    let w1 = (s * omega).sin() / sin_omega;
    quat_normalize([
        w0 * q0[0] + w1 * b[0],
        w0 * q0[1] + w1 * b[1],
        w0 * q0[2] + w1 * b[2],
        w0 * q0[3] + w1 * b[3],
    ])
}

/// Minimum-jerk time scaling `s(u) = 10u³ - 15u⁴ + 6u⁵`.
pub fn quintic(u: f64) -> f64 {
    let u3 = u * u * u;
    u3 * (10.0 + u * (-15.0 + 6.0 * u))
}

// Surrogate joint map coefficients: per-channel slope, offset, sinusoid
// amplitude/frequency/phase, and the lower-triangular coupling of earlier
// channels into the sinusoid argument.
const JOINT_SLOPE: [f64; 7] = [0.85, 0.70, 0.80, 0.65, 0.75, 0.90, 0.70];
const JOINT_OFFSET: [f64; 7] = [0.10, -0.20, 0.30, 0.05, -0.10, 0.20, 0.00];
const JOINT_AMP: [f64; 7] = [0.0, 0.30, 0.25, 0.35, 0.30, 0.20, 0.40];
const JOINT_FREQ: [f64; 7] = [0.0, 2.0, 3.0, 2.5, 2.0, 4.0, 3.0];
const JOINT_PHASE: [f64; 7] = [0.0, 0.4, -0.3, 0.9, 0.2, -0.7, 0.5];
const JOINT_COUPLING: [[f64; 7]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.5, -1.1, 0.7, 0.0, 0.0, 0.0, 0.0],
    [1.0, 0.4, -0.6, 0.8, 0.0, 0.0, 0.0],
    [-0.7, 0.6, 1.3, -0.5, 0.9, 0.0, 0.0],
    [0.9, -0.3, 0.5, 1.1, -0.8, 0.6, 0.0],
];

fn coupling_argument(joint: usize, task: &[f64; 7]) -> f64 {
    let mut acc = 0.0;
    for (j, t) in task.iter().enumerate().take(joint) {
        acc += JOINT_COUPLING[joint][j] * t;
    }
    JOINT_FREQ[joint] * acc + JOINT_PHASE[joint]
}

/// The fixed surrogate kinematics: a triangular sinusoidal mixing of the
/// task channels into 7 joint channels. Invertible in closed form; see
/// [`joint_to_task`].
pub fn task_to_joint(task: &[f64; 7]) -> [f64; 7] {
    let mut joint = [0.0; 7];
    for i in 0..7 {
        joint[i] = JOINT_SLOPE[i] * task[i]
            + JOINT_OFFSET[i]
            + JOINT_AMP[i] * coupling_argument(i, task).sin();
    }
    joint
}

/// Exact inverse of [`task_to_joint`], solved channel by channel: the
/// sinusoid for channel `i` only involves task channels `< i`.
pub fn joint_to_task(joint: &[f64; 7]) -> [f64; 7] {
    let mut task = [0.0; 7];
    for i in 0..7 {
        let s = JOINT_AMP[i] * coupling_argument(i, &task).sin();
        task[i] = (joint[i] - JOINT_OFFSET[i] - s) / JOINT_SLOPE[i];
    }
    task
}

/// The home configuration in joint coordinates, quantized the same way
/// generated trajectories are.
pub fn home_joint_configuration() -> [f64; 7] {
    let home = Pose {
        position: HOME_POSITION,
        quaternion: HOME_QUATERNION,
    };
    let mut j = task_to_joint(&home.as_vector());
    for v in &mut j {
        *v = quantize(*v);
    }
    j
}

#[inline]
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

struct Berry {
    cx: i64,
    cy: i64,
    r: i64,
}

fn overlaps(berries: &[Berry], cx: i64, cy: i64, r: i64, gap: i64) -> bool {
    berries.iter().any(|b| {
        let dx = b.cx - cx;
        let dy = b.cy - cy;
        let min_d = b.r + r + gap;
        dx * dx + dy * dy < min_d * min_d
    })
}

fn draw_berry(image: &mut ImageBuf, berry: &Berry, shade: f32) {
    let (h, w) = (image.h as i64, image.w as i64);
    for y in (berry.cy - berry.r).max(0)..=(berry.cy + berry.r).min(h - 1) {
        for x in (berry.cx - berry.r).max(0)..=(berry.cx + berry.r).min(w - 1) {
            let dx = x - berry.cx;
            let dy = y - berry.cy;
            if dx * dx + dy * dy <= berry.r * berry.r {
                let edge = 1.0 - 0.3 * ((dx * dx + dy * dy) as f32 / (berry.r * berry.r) as f32);
                image.set_pixel(
                    y as usize,
                    x as usize,
                    [
                        (0.75 + 0.15 * shade) * edge,
                        0.08 * edge,
                        (0.10 + 0.05 * shade) * edge,
                    ],
                );
            }
        }
    }
}

/// Region center (normalized image coordinates) for a plant configuration.
///
/// Targets of one configuration cluster around this point; that shared
/// geometry is what makes configurations separable in latent space.
/// Berry radius cap for a given image size; small images get small berries
/// so layouts stay feasible.
fn max_berry_radius(h: usize, w: usize) -> i64 {
    ((h.min(w) / 16) as i64).clamp(2, 5)
}

fn region_center(dataset_seed: u64, config_id: u32) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        dataset_seed,
        &format!("region/{config_id}"),
    ));
    // Low-discrepancy anchor per config plus a small jitter keeps regions
    // separated for up to ~8 configurations without rejection sampling.
    let anchors = [
        (0.25, 0.30),
        (0.75, 0.30),
        (0.50, 0.60),
        (0.25, 0.80),
        (0.75, 0.80),
        (0.50, 0.25),
        (0.20, 0.55),
        (0.80, 0.55),
    ];
    let (ax, ay) = anchors[(config_id as usize) % anchors.len()];
    let jx: f64 = rng.random_range(-0.04..0.04);
    let jy: f64 = rng.random_range(-0.04..0.04);
    ((ax + jx).clamp(0.12, 0.88), (ay + jy).clamp(0.12, 0.88))
}

/// Layout inputs for one scene.
#[derive(Debug, Clone)]
pub struct SceneLayout {
    pub config_id: u32,
    pub target_id: u32,
    /// Seed shared by the whole dataset; fixes the per-configuration
    /// target regions independently of the per-scene seed.
    pub dataset_seed: u64,
}

/// Render one scene: clutter from `rng_seed`, target placement from the
/// dataset seed and ids. Bit-identical for identical inputs.
pub fn generate_scene(
    rng_seed: u64,
    cfg: &SceneGenConfig,
    layout: &SceneLayout,
) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut image = ImageBuf::new(h, w);

    // Green canopy fading into brown soil, with per-pixel texture noise.
    for y in 0..h {
        let soil = (y as f32) / (h as f32);
        for x in 0..w {
            let n: f32 = rng.random_range(-0.04..0.04);
            let g = 0.42 - 0.18 * soil + n;
            let r = 0.16 + 0.22 * soil + n * 0.5;
            let b = 0.10 + 0.02 * soil;
            image.set_pixel(y, x, [r.clamp(0.0, 0.9), g.clamp(0.0, 0.9), b.clamp(0.0, 0.9)]);
        }
    }

    // Target berry around the configuration's region center.
    let (rcx, rcy) = region_center(layout.dataset_seed, layout.config_id);
    let mut target_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        layout.dataset_seed,
        &format!("target/{}/{}", layout.config_id, layout.target_id),
    ));
    let r_hi = max_berry_radius(h, w);
    let target_r: i64 = target_rng.random_range(r_hi.min(3)..=r_hi);
    let margin = (target_r + 2) as f64;
    let span_x = 0.09 * w as f64;
    let span_y = 0.09 * h as f64;
    let tcx = ((rcx * w as f64) + target_rng.random_range(-span_x..span_x))
        .clamp(margin, w as f64 - 1.0 - margin)
        .round() as i64;
    let tcy = ((rcy * h as f64) + target_rng.random_range(-span_y..span_y))
        .clamp(margin, h as f64 - 1.0 - margin)
        .round() as i64;

    // Distractor berries anywhere that does not collide with the target box.
    let mut berries = vec![Berry {
        cx: tcx,
        cy: tcy,
        r: target_r,
    }];
    let mut attempts = 0usize;
    let max_attempts = 200 * cfg.n_distractors;
    while berries.len() < cfg.n_distractors + 1 {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SceneError::LayoutOverflow {
                requested: cfg.n_distractors,
                attempts,
            });
        }
        let r: i64 = rng.random_range(2..=r_hi);
        let cx: i64 = rng.random_range(r..(w as i64 - r));
        let cy: i64 = rng.random_range(r..(h as i64 - r));
        if overlaps(&berries, cx, cy, r, 2) {
            continue;
        }
        berries.push(Berry { cx, cy, r });
    }
    for (i, berry) in berries.iter().enumerate().skip(1) {
        let shade = ((i * 37) % 10) as f32 / 10.0;
        draw_berry(&mut image, berry, shade);
    }

    // White bounding box mask over the target berry; these pixels are the
    // only exact 1.0 values in the image.
    let target = &berries[0];
    let bx0 = (target.cx - target.r - 1).max(0) as usize;
    let bx1 = ((target.cx + target.r + 1) as usize).min(w - 1);
    let by0 = (target.cy - target.r - 1).max(0) as usize;
    let by1 = ((target.cy + target.r + 1) as usize).min(h - 1);
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            image.set_pixel(y, x, [1.0, 1.0, 1.0]);
        }
    }

    let u = target.cx as f64 / w as f64;
    let v = target.cy as f64 / h as f64;
    let position = condition_to_position(u, v);
    let quaternion = facing_quaternion(&position);
    let mut pose_vec = Pose {
        position,
        quaternion,
    }
    .as_vector();
    for val in &mut pose_vec {
        *val = quantize(*val);
    }
    Ok(Scene {
        image,
        condition: [u, v],
        target_pose: Pose::from_vector(&pose_vec),
        config_id: layout.config_id,
        target_id: layout.target_id,
    })
}

/// Per-demonstration noise settings.
#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    pub sigma_end: f64,
    pub sigma_mid: f64,
}

/// Generate one demonstration for a scene.
///
/// The task-space path is a minimum-jerk interpolation from the home pose
/// to the target pose with Gaussian endpoint noise (`sigma_end`, which also
/// perturbs the final orientation) and a smooth mid-trajectory bump
/// (`sigma_mid`). The joint trajectory is the same motion pushed through
/// [`task_to_joint`].
pub fn generate_demonstration(
    scene: &Scene,
    scene_index: usize,
    rng_seed: u64,
    cfg: &SceneGenConfig,
    noise: &NoiseConfig,
) -> Demonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let t_len = cfg.n_steps;
    let dt = quantize(cfg.dt());

    let end_noise: [f64; 3] =
        std::array::from_fn(|_| noise.sigma_end * rng.sample::<f64, _>(StandardNormal));
    let rot_noise: [f64; 3] = std::array::from_fn(|_| {
        ROTATION_NOISE_COUPLING * noise.sigma_end * rng.sample::<f64, _>(StandardNormal)
    });
    let mid_bump: [f64; 3] =
        std::array::from_fn(|_| noise.sigma_mid * rng.sample::<f64, _>(StandardNormal));

    let p0 = HOME_POSITION;
    let q0 = HOME_QUATERNION;
    let p1 = [
        scene.target_pose.position[0] + end_noise[0],
        scene.target_pose.position[1] + end_noise[1],
        scene.target_pose.position[2] + end_noise[2],
    ];
    let q1 = if noise.sigma_end == 0.0 {
        scene.target_pose.quaternion
    } else {
        quat_normalize(quat_mul(
            &quat_from_rotation_vector(rot_noise),
            &scene.target_pose.quaternion,
        ))
    };

    let mut task = DMatrix::zeros(TASK_DIMS, t_len);
    let mut joint = DMatrix::zeros(JOINT_DIMS, t_len);
    for t in 0..t_len {
        let u = t as f64 / (t_len - 1) as f64;
        let s = quintic(u);
        let bump = (std::f64::consts::PI * u).sin().powi(2);
        let mut col = [0.0f64; 7];
        for d in 0..3 {
            col[d] = p0[d] + s * (p1[d] - p0[d]) + bump * mid_bump[d];
        }
        let q = slerp(&q0, &q1, s);
        col[3..7].copy_from_slice(&q);
        for v in &mut col {
            *v = quantize(*v);
        }
        let j = task_to_joint(&col);
        for d in 0..7 {
            task[(d, t)] = col[d];
            joint[(d, t)] = quantize(j[d]);
        }
    }
    Demonstration {
        scene_index,
        joint: Trajectory { values: joint, dt },
        task: Trajectory { values: task, dt },
    }
}

/// Train/validation/test scene indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Scenes, their repeated demonstrations, and the scene-level split.
///
/// Demonstrations are stored scene-major: scene `s` owns demos
/// `s * n_repeats .. (s + 1) * n_repeats`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub demos: Vec<Demonstration>,
    pub split: SplitIndices,
    pub seed: u64,
    pub gen: SceneGenConfig,
}

impl Dataset {
    pub fn demos_for_scene(&self, scene_index: usize) -> &[Demonstration] {
        let r = self.gen.n_repeats;
        &self.demos[scene_index * r..(scene_index + 1) * r]
    }
}

/// Deterministic 80/10/10 scene split: floor for train and validation,
/// remainder to test.
pub fn make_split(n_scenes: usize, seed: u64) -> SplitIndices {
    let mut order: Vec<usize> = (0..n_scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    // Fisher-Yates with draws from the seeded stream.
    for i in (1..n_scenes).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    // At least one scene always trains; tiny datasets are legal.
    let n_train = ((n_scenes as f64 * 0.8).floor() as usize).max(1).min(n_scenes);
    let n_val = ((n_scenes as f64 * 0.1).floor() as usize).min(n_scenes - n_train);
    let mut split = SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Generate the full dataset: `n_configs × n_targets` scenes with
/// `n_repeats` demonstrations each. A pure function of `(seed, cfg)`;
/// every scene and demo derives its own stream from those, so generation
/// order cannot matter.
pub fn build_dataset(cfg: &SceneGenConfig, seed: u64) -> Result<Dataset, SceneError> {
    cfg.validate()?;
    let noise = NoiseConfig {
        sigma_end: cfg.sigma_end,
        sigma_mid: cfg.sigma_mid,
    };
    let n_scenes = cfg.n_scenes();
    let scene_jobs: Vec<(u32, u32)> = (0..cfg.n_configs as u32)
        .flat_map(|c| (0..cfg.n_targets as u32).map(move |k| (c, k)))
        .collect();
    let scenes = crate::workers::run_indexed(n_scenes, |i| {
        let (config_id, target_id) = scene_jobs[i];
        let layout = SceneLayout {
            config_id,
            target_id,
            dataset_seed: seed,
        };
        let scene_seed = derive_seed(seed, &format!("scene/{config_id}/{target_id}"));
        generate_scene(scene_seed, cfg, &layout)
    });
    let scenes: Vec<Scene> = scenes.into_iter().collect::<Result<_, _>>()?;

    let demos = crate::workers::run_indexed(n_scenes * cfg.n_repeats, |i| {
        let scene_index = i / cfg.n_repeats;
        let rep = i % cfg.n_repeats;
        let demo_seed = derive_seed(seed, &format!("demo/{scene_index}/{rep}"));
        generate_demonstration(&scenes[scene_index], scene_index, demo_seed, cfg, &noise)
    });

    Ok(Dataset {
        scenes,
        demos,
        split: make_split(n_scenes, seed),
        seed,
        gen: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneGenConfig {
        SceneGenConfig {
            image_h: 32,
            image_w: 32,
            n_distractors: 3,
            n_configs: 2,
            n_targets: 2,
            n_repeats: 3,
            n_steps: 50,
            ..SceneGenConfig::default()
        }
    }

    #[test]
    fn condition_is_normalized_box_center() {
        let cfg = SceneGenConfig::default();
        let layout = SceneLayout {
            config_id: 0,
            target_id: 0,
            dataset_seed: 1,
        };
        let scene = generate_scene(3, &cfg, &layout).unwrap();
        assert!(scene.condition[0] > 0.0 && scene.condition[0] < 1.0);
        assert!(scene.condition[1] > 0.0 && scene.condition[1] < 1.0);
        // Centers are integer pixels, so condition * size is an integer:
        // a box centered at pixel (32, 32) of a 64x64 image reads (0.5, 0.5).
        let cx = scene.condition[0] * cfg.image_w as f64;
        let cy = scene.condition[1] * cfg.image_h as f64;
        assert_eq!(cx, cx.round());
        assert_eq!(cy, cy.round());
    }

    #[test]
    fn corner_condition_maps_to_cuboid_corner() {
        let pos = condition_to_position(0.0, 0.0);
        assert_eq!(pos, [WORKSPACE_X.0, WORKSPACE_Y.0, WORKSPACE_Z.1]);
        let pos = condition_to_position(1.0, 1.0);
        assert_eq!(pos, [WORKSPACE_X.1, WORKSPACE_Y.1, WORKSPACE_Z.0]);
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = small_cfg();
        let layout = SceneLayout {
            config_id: 1,
            target_id: 0,
            dataset_seed: 9,
        };
        let a = generate_scene(42, &cfg, &layout).unwrap();
        let b = generate_scene(42, &cfg, &layout).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(43, &cfg, &layout).unwrap();
        assert_ne!(a.image, c.image);
        // The target placement is fixed by (dataset_seed, ids), not the
        // per-scene seed.
        assert_eq!(a.condition, c.condition);
    }

    #[test]
    fn white_box_pixels_are_exactly_one() {
        let cfg = small_cfg();
        let layout = SceneLayout {
            config_id: 0,
            target_id: 1,
            dataset_seed: 5,
        };
        let scene = generate_scene(7, &cfg, &layout).unwrap();
        let n_white = scene
            .image
            .data
            .chunks(3)
            .filter(|px| px[0] == 1.0 && px[1] == 1.0 && px[2] == 1.0)
            .count();
        assert!(n_white >= 5 * 5, "white box missing: {n_white} pixels");
        let q = scene.target_pose.quaternion;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn crowded_layout_errors() {
        let cfg = SceneGenConfig {
            image_h: 16,
            image_w: 16,
            n_distractors: 8,
            ..small_cfg()
        };
        let layout = SceneLayout {
            config_id: 0,
            target_id: 0,
            dataset_seed: 1,
        };
        let mut failures = 0;
        for seed in 0..4 {
            if matches!(
                generate_scene(seed, &cfg, &layout),
                Err(SceneError::LayoutOverflow { .. })
            ) {
                failures += 1;
            }
        }
        assert!(failures > 0, "16x16 with 8 distractors should overflow");
    }

    #[test]
    fn quintic_midpoint_is_half() {
        assert_eq!(quintic(0.0), 0.0);
        assert_eq!(quintic(1.0), 1.0);
        assert!((quintic(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_demos_are_identical_and_hit_target() {
        let cfg = SceneGenConfig {
            sigma_end: 0.0,
            sigma_mid: 0.0,
            ..small_cfg()
        };
        let layout = SceneLayout {
            config_id: 0,
            target_id: 0,
            dataset_seed: 11,
        };
        let scene = generate_scene(1, &cfg, &layout).unwrap();
        let noise = NoiseConfig {
            sigma_end: 0.0,
            sigma_mid: 0.0,
        };
        let d1 = generate_demonstration(&scene, 0, 100, &cfg, &noise);
        let d2 = generate_demonstration(&scene, 0, 200, &cfg, &noise);
        assert_eq!(d1, d2);
        // Noiseless endpoint equals the stored target pose.
        let end = d1.task.final_point();
        let target = scene.target_pose.as_vector();
        for d in 0..7 {
            assert!(
                (end[d] - target[d]).abs() < 1e-9,
                "channel {d}: {} vs {}",
                end[d],
                target[d]
            );
        }
    }

    #[test]
    fn demos_start_at_home() {
        let cfg = small_cfg();
        let layout = SceneLayout {
            config_id: 1,
            target_id: 1,
            dataset_seed: 2,
        };
        let scene = generate_scene(5, &cfg, &layout).unwrap();
        let noise = NoiseConfig {
            sigma_end: 0.02,
            sigma_mid: 0.03,
        };
        let demo = generate_demonstration(&scene, 0, 77, &cfg, &noise);
        let home_task = Pose {
            position: HOME_POSITION,
            quaternion: HOME_QUATERNION,
        }
        .as_vector();
        let home_joint = home_joint_configuration();
        for d in 0..7 {
            assert!((demo.task.values[(d, 0)] - home_task[d]).abs() < 1e-9);
            assert!((demo.joint.values[(d, 0)] - home_joint[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn quaternions_stay_unit_norm() {
        let cfg = small_cfg();
        let layout = SceneLayout {
            config_id: 0,
            target_id: 1,
            dataset_seed: 3,
        };
        let scene = generate_scene(8, &cfg, &layout).unwrap();
        let noise = NoiseConfig {
            sigma_end: 0.05,
            sigma_mid: 0.05,
        };
        let demo = generate_demonstration(&scene, 0, 9, &cfg, &noise);
        for t in 0..cfg.n_steps {
            let q: Vec<f64> = (3..7).map(|d| demo.task.values[(d, t)]).collect();
            let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "t={t}: quaternion norm {n}");
        }
    }

    #[test]
    fn joint_map_round_trips() {
        let samples = [
            [0.4, -0.1, 0.3, 0.98, 0.05, -0.1, 0.15],
            [0.6, 0.2, 0.5, 0.7, 0.4, 0.5, 0.3],
            [0.3125, 0.0, 0.5625, 1.0, 0.0, 0.0, 0.0],
        ];
        for task in &samples {
            let joint = task_to_joint(task);
            let back = joint_to_task(&joint);
            for d in 0..7 {
                assert!((back[d] - task[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_counts_and_split() {
        let cfg = SceneGenConfig {
            image_h: 16,
            image_w: 16,
            n_distractors: 2,
            n_configs: 5,
            n_targets: 5,
            n_repeats: 2,
            n_steps: 20,
            ..SceneGenConfig::default()
        };
        let ds = build_dataset(&cfg, 123).unwrap();
        assert_eq!(ds.scenes.len(), 25);
        assert_eq!(ds.demos.len(), 50);
        assert_eq!(ds.split.train.len(), 20);
        assert_eq!(ds.split.val.len(), 2);
        assert_eq!(ds.split.test.len(), 3);
        // Disjoint and covering.
        let mut all: Vec<usize> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
            .cloned()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn single_scene_dataset() {
        let cfg = SceneGenConfig {
            image_h: 16,
            image_w: 16,
            n_distractors: 1,
            n_configs: 1,
            n_targets: 1,
            n_repeats: 2,
            n_steps: 20,
            ..SceneGenConfig::default()
        };
        let ds = build_dataset(&cfg, 7).unwrap();
        assert_eq!(ds.scenes.len(), 1);
        assert_eq!(ds.demos.len(), 2);
    }

    #[test]
    fn dataset_is_pure_function_of_seed() {
        let cfg = small_cfg();
        let a = build_dataset(&cfg, 55).unwrap();
        let b = build_dataset(&cfg, 55).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&cfg, 56).unwrap();
        assert_ne!(a, c);
    }
}
