//! Synthetic two-domain scenes and per-agent rendering.
//!
//! Objects are oriented boxes standing on the ground plane. Each agent
//! renders them with an exact z-buffer (ray/box intersection per pixel, so
//! the silhouette of a box is exactly the convex hull of its projected
//! corners) and produces:
//!
//! * a semantic feature image in the [`channels`](crate::channels) layout,
//! * ground-truth camera depth,
//! * per-pixel depth logits `-(D_k - d)^2 / (2 sigma_d^2) + noise`.
//!
//! Only visible pixels are stored. Background pixels have all-zero
//! features and uniform (all-zero) logits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channels::{self, NUM_CHANNELS};
use crate::depthcrf::DepthBins;
use crate::error::{invalid, Error, Result};
use crate::geometry::{body_to_world, make_camera, BevGrid, CameraModel};

pub const SCENE_FILE_VERSION: u32 = 1;

/// Sentinel for "no visible pixel" in [`AgentFrame::slot`].
const NO_SLOT: u32 = u32::MAX;
const NEAR_CLIP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Bus,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Car, Self::Truck, Self::Bus, Self::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Nominal `(l, w, h)` in metres.
    pub fn size_prior(self) -> [f64; 3] {
        match self {
            Self::Car => [4.5, 1.9, 1.6],
            Self::Truck => [8.0, 2.5, 3.0],
            Self::Bus => [11.0, 2.9, 3.2],
            Self::Pedestrian => [0.5, 0.5, 1.8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Truck => "truck",
            Self::Bus => "bus",
            Self::Pedestrian => "pedestrian",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Ground,
    Aerial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentId {
    Vehicle,
    UavR,
    UavL,
}

impl AgentId {
    pub const ALL: [AgentId; 3] = [Self::Vehicle, Self::UavR, Self::UavL];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vehicle => "vehicle",
            Self::UavR => "uav_r",
            Self::UavL => "uav_l",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Self::Vehicle => Domain::Ground,
            Self::UavR | Self::UavL => Domain::Aerial,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub(crate) fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the camera rig table: field of view, mount height and
/// attitude as tabulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigEntry {
    pub agent: AgentId,
    pub fov_deg: f64,
    pub height_m: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
}

impl RigEntry {
    /// `(altitude, pitch, yaw, roll)` actually used for the camera.
    ///
    /// A negative tabulated height describes a mount mirrored through the
    /// ground plane; the physical pose flips the sign of height, pitch and
    /// yaw, giving a camera above ground that looks down toward the scene
    /// from the opposite side.
    pub fn effective_pose(&self) -> (f64, f64, f64, f64) {
        if self.height_m < 0.0 {
            (-self.height_m, -self.pitch_deg, -self.yaw_deg, self.roll_deg)
        } else {
            (self.height_m, self.pitch_deg, self.yaw_deg, self.roll_deg)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigPreset {
    /// One ground vehicle and two UAVs.
    Table1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub preset: RigPreset,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            preset: RigPreset::Table1,
            image_width: 704,
            image_height: 256,
        }
    }
}

impl RigConfig {
    pub fn entries(&self) -> Vec<RigEntry> {
        match self.preset {
            RigPreset::Table1 => vec![
                RigEntry {
                    agent: AgentId::Vehicle,
                    fov_deg: 70.0,
                    height_m: 2.0,
                    pitch_deg: 0.0,
                    yaw_deg: 0.0,
                    roll_deg: 0.0,
                },
                RigEntry {
                    agent: AgentId::UavR,
                    fov_deg: 70.0,
                    height_m: 80.0,
                    pitch_deg: -90.0,
                    yaw_deg: -60.0,
                    roll_deg: 0.0,
                },
                RigEntry {
                    agent: AgentId::UavL,
                    fov_deg: 70.0,
                    height_m: -70.0,
                    pitch_deg: 90.0,
                    yaw_deg: -60.0,
                    roll_deg: 0.0,
                },
            ],
        }
    }

    /// Builds the cameras. The ground vehicle sits at the origin of the
    /// perception range looking along `+x`; aerial cameras are placed so
    /// that their optical axis hits the ground at the grid centre.
    pub fn cameras(&self, grid: &BevGrid) -> Result<BTreeMap<AgentId, CameraModel>> {
        let aim = Vector3::new(
            0.5 * (grid.x_min + grid.x_max),
            0.5 * (grid.y_min + grid.y_max),
            0.0,
        );
        let mut out = BTreeMap::new();
        for e in self.entries() {
            let (alt, pitch, yaw, roll) = e.effective_pose();
            let position = match e.agent.domain() {
                Domain::Ground => Vector3::new(0.0, 0.0, -alt),
                Domain::Aerial => {
                    let fwd = body_to_world(pitch, yaw, roll) * Vector3::x();
                    if !(fwd.z > 1e-6) {
                        return invalid(format!("aerial camera {} does not look down", e.agent));
                    }
                    let t = alt / fwd.z;
                    aim - fwd * t
                }
            };
            let cam = make_camera(
                e.fov_deg,
                self.image_width,
                self.image_height,
                position,
                pitch,
                yaw,
                roll,
            )?;
            out.insert(e.agent, cam);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class: ObjectClass,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl SceneObject {
    fn center_v(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// BEV footprint corners, counter-clockwise in the `(x, y)` plane.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        footprint(self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let fp = self.footprint();
        let zt = self.center[2] - self.size[2] / 2.0;
        let zb = self.center[2] + self.size[2] / 2.0;
        let mut out = [Vector3::zeros(); 8];
        for (i, (x, y)) in fp.iter().enumerate() {
            out[i] = Vector3::new(*x, *y, zt);
            out[i + 4] = Vector3::new(*x, *y, zb);
        }
        out
    }

    /// World point to box-local coordinates (`x` along the heading).
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center_v();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.size[0] / 2.0 && l.y.abs() <= self.size[1] / 2.0 && l.z.abs() <= self.size[2] / 2.0
    }

    /// Entry parameter of the ray `origin + t * dir` into the box, if it hits
    /// with `t > t_min`.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let mut ta = (-half[a] - o[a]) * inv;
            let mut tb = (half[a] - o[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        if t0 > t_min {
            Some(t0)
        } else {
            None
        }
    }
}

fn footprint(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> [(f64, f64); 4] {
    let (s, c) = yaw.sin_cos();
    let mut out = [(0.0, 0.0); 4];
    for (i, (a, b)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].iter().enumerate() {
        let lx = a * l / 2.0;
        let ly = b * w / 2.0;
        out[i] = (cx + c * lx - s * ly, cy + s * lx + c * ly);
    }
    out
}

/// Separating-axis overlap test for two BEV rectangles.
fn footprints_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % 4];
            let (nx, ny) = (y1 - y0, x0 - x1);
            let proj = |p: &[(f64, f64); 4]| {
                p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| {
                    let v = x * nx + y * ny;
                    (lo.min(v), hi.max(v))
                })
            };
            let (alo, ahi) = proj(a);
            let (blo, bhi) = proj(b);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub cameras: BTreeMap<AgentId, CameraModel>,
    pub seed: u64,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraEntry {
    agent: AgentId,
    domain: Domain,
    #[serde(flatten)]
    camera: CameraModel,
}

/// Versioned on-disk scene document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub seed: u64,
    pub timestamp: f64,
    cameras: Vec<CameraEntry>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn camera(&self, agent: AgentId) -> Result<&CameraModel> {
        self.cameras
            .get(&agent)
            .ok_or_else(|| Error::NotFound(format!("agent {agent} has no camera in this scene")))
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            version: SCENE_FILE_VERSION,
            seed: self.seed,
            timestamp: self.timestamp,
            cameras: self
                .cameras
                .iter()
                .map(|(a, c)| CameraEntry {
                    agent: *a,
                    domain: a.domain(),
                    camera: c.clone(),
                })
                .collect(),
            objects: self.objects.clone(),
        }
    }

    pub fn from_file(file: SceneFile) -> Result<Self> {
        if file.version != SCENE_FILE_VERSION {
            return invalid(format!(
                "unsupported scene file version {} (expected {SCENE_FILE_VERSION})",
                file.version
            ));
        }
        let mut cameras = BTreeMap::new();
        for e in file.cameras {
            if e.domain != e.agent.domain() {
                return invalid(format!("camera {} has domain {:?}", e.agent, e.domain));
            }
            cameras.insert(e.agent, e.camera);
        }
        Ok(Self {
            objects: file.objects,
            cameras,
            seed: file.seed,
            timestamp: file.timestamp,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    /// Sampling weights for car, truck, bus, pedestrian.
    pub class_weights: [f64; 4],
    /// Probability that an object inside the vehicle's view gets a parked
    /// truck placed on its line of sight.
    pub occlusion_rate: f64,
    /// Clearance kept between object footprints (m).
    pub min_gap: f64,
    /// No objects closer than this to the ground vehicle (m).
    pub ego_clearance: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 24,
            class_weights: [0.5, 0.15, 0.1, 0.25],
            occlusion_rate: 0.0,
            min_gap: 1.0,
            ego_clearance: 8.0,
            max_retries: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Width of the Gaussian depth evidence around the true depth (m).
    /// Zero splits the evidence between the two bin centers around the true
    /// depth so that the expected depth is exact.
    pub depth_sigma: f64,
    /// Standard deviation of additive noise on every depth logit.
    pub logit_sigma: f64,
    /// Standard deviation of additive noise on every feature channel of a
    /// visible pixel.
    pub feat_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            depth_sigma: 2.0,
            logit_sigma: 1.0,
            feat_sigma: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            depth_sigma: 0.0,
            logit_sigma: 0.0,
            feat_sigma: 0.0,
        }
    }
}

fn sample_class(rng: &mut ChaCha8Rng, weights: &[f64; 4]) -> ObjectClass {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return ObjectClass::ALL[i];
        }
        r -= w;
    }
    ObjectClass::Pedestrian
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

struct Placer<'a> {
    grid: &'a BevGrid,
    gap: f64,
    placed: Vec<[(f64, f64); 4]>,
}

impl Placer<'_> {
    fn fits(&self, fp_tight: &[(f64, f64); 4], fp_padded: &[(f64, f64); 4]) -> bool {
        fp_tight.iter().all(|(x, y)| self.grid.contains_xy(*x, *y))
            && self.placed.iter().all(|p| !footprints_overlap(p, fp_padded))
    }

    fn padded(&self, cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> [(f64, f64); 4] {
        footprint(cx, cy, l + self.gap, w + self.gap, yaw)
    }
}

/// Generates a scene deterministically from `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, rig: &RigConfig, grid: &BevGrid, seed: u64) -> Result<Scene> {
    if !(0.0..=1.0).contains(&cfg.occlusion_rate) {
        return invalid("occlusion_rate must lie in [0, 1]");
    }
    if cfg.class_weights.iter().any(|w| !(*w >= 0.0)) || cfg.class_weights.iter().sum::<f64>() <= 0.0 {
        return invalid("class_weights must be non-negative with a positive sum");
    }
    let cameras = rig.cameras(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placer = Placer {
        grid,
        gap: cfg.min_gap,
        placed: Vec::new(),
    };
    let mut objects: Vec<SceneObject> = Vec::new();

    for i in 0..cfg.num_objects {
        let mut accepted = None;
        for _ in 0..cfg.max_retries.max(1) {
            let class = sample_class(&mut rng, &cfg.class_weights);
            let prior = class.size_prior();
            let size = [
                prior[0] * rng.gen_range(0.9..1.1),
                prior[1] * rng.gen_range(0.9..1.1),
                prior[2] * rng.gen_range(0.9..1.1),
            ];
            let yaw = wrap_angle(rng.gen_range(-PI..PI));
            let x = rng.gen_range(grid.x_min..grid.x_max);
            let y = rng.gen_range(grid.y_min..grid.y_max);
            if x.hypot(y) < cfg.ego_clearance {
                continue;
            }
            let tight = footprint(x, y, size[0], size[1], yaw);
            let padded = placer.padded(x, y, size[0], size[1], yaw);
            if !placer.fits(&tight, &padded) {
                continue;
            }
            let velocity = match class {
                ObjectClass::Pedestrian => {
                    let s = rng.gen_range(0.0..2.0);
                    let h = rng.gen_range(-PI..PI);
                    [s * h.cos(), s * h.sin()]
                }
                _ => {
                    if rng.gen_bool(0.7) {
                        let s = rng.gen_range(0.0..15.0);
                        [s * yaw.cos(), s * yaw.sin()]
                    } else {
                        [0.0, 0.0]
                    }
                }
            };
            accepted = Some((padded, SceneObject {
                id: 0,
                class,
                center: [x, y, -size[2] / 2.0],
                size,
                yaw,
                velocity,
            }));
            break;
        }
        let Some((padded, obj)) = accepted else {
            return Err(Error::Capacity(format!(
                "could not place object {} of {} after {} retries",
                i + 1,
                cfg.num_objects,
                cfg.max_retries
            )));
        };
        placer.placed.push(padded);
        objects.push(obj);
    }

    if cfg.occlusion_rate > 0.0 {
        if let Some(veh) = cameras.get(&AgentId::Vehicle) {
            place_occluders(cfg, veh, &mut placer, &mut objects, &mut rng);
        }
    }

    for (i, o) in objects.iter_mut().enumerate() {
        o.id = i as u32;
    }
    Ok(Scene {
        objects,
        cameras,
        seed,
        timestamp: 0.0,
    })
}

/// Parks trucks across the vehicle's line of sight to randomly chosen
/// targets inside its field of view.
fn place_occluders(
    cfg: &SceneConfig,
    veh: &CameraModel,
    placer: &mut Placer<'_>,
    objects: &mut Vec<SceneObject>,
    rng: &mut ChaCha8Rng,
) {
    let eye = veh.center();
    let targets: Vec<SceneObject> = objects.clone();
    for t in &targets {
        let draw = rng.gen::<f64>();
        let Some(p) = veh.project(&Vector3::from(t.center)) else {
            continue;
        };
        if !veh.in_image(p.u, p.v) || draw >= cfg.occlusion_rate {
            continue;
        }
        let (dx, dy) = (t.center[0] - eye.x, t.center[1] - eye.y);
        let range = dx.hypot(dy);
        if range < 2.0 * cfg.ego_clearance {
            continue;
        }
        let heading = dy.atan2(dx);
        let prior = ObjectClass::Truck.size_prior();
        let size = [prior[0], prior[1], prior[2]];
        let yaw = wrap_angle(heading + PI / 2.0);
        for frac in [0.55, 0.45, 0.65, 0.35, 0.75] {
            let d = range * frac;
            if d < cfg.ego_clearance {
                continue;
            }
            let (x, y) = (eye.x + d * heading.cos(), eye.y + d * heading.sin());
            let tight = footprint(x, y, size[0], size[1], yaw);
            let padded = placer.padded(x, y, size[0], size[1], yaw);
            if placer.fits(&tight, &padded) {
                placer.placed.push(padded);
                objects.push(SceneObject {
                    id: 0,
                    class: ObjectClass::Truck,
                    center: [x, y, -size[2] / 2.0],
                    size,
                    yaw,
                    velocity: [0.0, 0.0],
                });
                break;
            }
        }
    }
}

/// One agent's rendered observation. Per-pixel arrays are stored for
/// visible pixels only, in row-major pixel order ("slots").
#[derive(Clone, Debug)]
pub struct AgentFrame {
    pub agent: AgentId,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    /// Linear pixel index `v * width + u` of each visible slot, ascending.
    pub pixels: Vec<usize>,
    slot_of: Vec<u32>,
    /// `n_visible x C` semantic features.
    pub features: Array2<f64>,
    /// Camera-frame depth of the visible surface, per slot.
    pub gt_depth: Vec<f64>,
    /// Scene object seen at each slot.
    pub object_ids: Vec<u32>,
    /// `n_visible x K` depth logits.
    pub unary_logits: Array2<f64>,
}

impl AgentFrame {
    /// Builds a frame from dense `H x W` arrays. Features and logits of
    /// invisible pixels are ignored.
    pub fn from_dense(
        agent: AgentId,
        features: &Array3<f64>,
        gt_depth: &Array2<f64>,
        visibility: &Array2<bool>,
        unary_logits: &Array3<f64>,
    ) -> Result<Self> {
        let (h, w, c) = features.dim();
        let k = unary_logits.dim().2;
        if gt_depth.dim() != (h, w) || visibility.dim() != (h, w) || unary_logits.dim().0 != h || unary_logits.dim().1 != w {
            return invalid("dense frame arrays disagree on H x W");
        }
        let mut pixels = Vec::new();
        for v in 0..h {
            for u in 0..w {
                if visibility[(v, u)] {
                    if !(gt_depth[(v, u)] > 0.0) {
                        return invalid(format!("visible pixel ({u}, {v}) has non-positive depth"));
                    }
                    pixels.push(v * w + u);
                }
            }
        }
        let mut slot_of = vec![NO_SLOT; w * h];
        let mut feats = Array2::zeros((pixels.len(), c));
        let mut logits = Array2::zeros((pixels.len(), k));
        let mut depth = Vec::with_capacity(pixels.len());
        for (s, &p) in pixels.iter().enumerate() {
            let (u, v) = (p % w, p / w);
            slot_of[p] = s as u32;
            for ch in 0..c {
                feats[(s, ch)] = features[(v, u, ch)];
            }
            for b in 0..k {
                logits[(s, b)] = unary_logits[(v, u, b)];
            }
            depth.push(gt_depth[(v, u)]);
        }
        Ok(Self {
            agent,
            domain: agent.domain(),
            width: w,
            height: h,
            object_ids: vec![0; pixels.len()],
            pixels,
            slot_of,
            features: feats,
            gt_depth: depth,
            unary_logits: logits,
        })
    }

    pub fn n_visible(&self) -> usize {
        self.pixels.len()
    }

    pub fn num_channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_bins(&self) -> usize {
        self.unary_logits.ncols()
    }

    /// Slot of pixel `(u, v)` if it is visible.
    #[inline]
    pub fn slot(&self, u: usize, v: usize) -> Option<usize> {
        if u >= self.width || v >= self.height {
            return None;
        }
        match self.slot_of[v * self.width + u] {
            NO_SLOT => None,
            s => Some(s as usize),
        }
    }

    /// Integer pixel coordinates of a slot.
    #[inline]
    pub fn pixel_uv(&self, slot: usize) -> (usize, usize) {
        let p = self.pixels[slot];
        (p % self.width, p / self.width)
    }

    pub fn is_visible(&self, u: usize, v: usize) -> bool {
        self.slot(u, v).is_some()
    }

    pub fn visibility(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.height, self.width), false);
        for &p in &self.pixels {
            m[(p / self.width, p % self.width)] = true;
        }
        m
    }

    pub fn gt_depth_map(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.height, self.width));
        for (s, &p) in self.pixels.iter().enumerate() {
            m[(p / self.width, p % self.width)] = self.gt_depth[s];
        }
        m
    }

    /// Dense `H x W x C` feature image (zero on background).
    pub fn features_dense(&self) -> Array3<f64> {
        let c = self.num_channels();
        let mut m = Array3::zeros((self.height, self.width, c));
        for (s, &p) in self.pixels.iter().enumerate() {
            for ch in 0..c {
                m[(p / self.width, p % self.width, ch)] = self.features[(s, ch)];
            }
        }
        m
    }
}

/// Logit of the bins that get no evidence when `depth_sigma` is zero.
const DELTA_FLOOR: f64 = -60.0;

/// Renders one agent's frame: z-buffered boxes, semantic features, true
/// depth and noisy depth logits over `bins`. Surfaces beyond the last bin
/// edge are clipped.
pub fn render_agent_frame(
    scene: &Scene,
    agent: AgentId,
    noise: &NoiseConfig,
    bins: &DepthBins,
    seed: u64,
) -> Result<AgentFrame> {
    let cam = scene.camera(agent)?;
    if !(noise.depth_sigma >= 0.0) || !(noise.logit_sigma >= 0.0) || !(noise.feat_sigma >= 0.0) {
        return invalid("noise sigmas must be non-negative");
    }
    let (w, h) = (cam.image_width, cam.image_height);
    let far = bins.d_max;
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut owner = vec![NO_SLOT; w * h];
    let eye = cam.center();

    for (oi, obj) in scene.objects.iter().enumerate() {
        let Some((u0, u1, v0, v1)) = pixel_bounds(cam, obj) else {
            continue;
        };
        for v in v0..v1 {
            for u in u0..u1 {
                let ray = cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
                if let Some(t) = obj.ray_entry(&eye, &ray, NEAR_CLIP) {
                    let idx = v * w + u;
                    if t < zbuf[idx] && t <= far {
                        zbuf[idx] = t;
                        owner[idx] = oi as u32;
                    }
                }
            }
        }
    }

    let pixels: Vec<usize> = (0..w * h).filter(|&i| owner[i] != NO_SLOT).collect();
    let n = pixels.len();
    let k = bins.k();
    let mut slot_of = vec![NO_SLOT; w * h];
    let mut features = Array2::zeros((n, NUM_CHANNELS));
    let mut gt_depth = Vec::with_capacity(n);
    let mut object_ids = Vec::with_capacity(n);
    let mut logits = Array2::zeros((n, k));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent.stream());
    let feat_noise = Normal::new(0.0, noise.feat_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let logit_noise = Normal::new(0.0, noise.logit_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let inv2s2 = 1.0 / (2.0 * noise.depth_sigma * noise.depth_sigma);

    for (s, &p) in pixels.iter().enumerate() {
        slot_of[p] = s as u32;
        let (u, v) = (p % w, p / w);
        let obj = &scene.objects[owner[p] as usize];
        let d = zbuf[p];
        let hit = eye + cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5) * d;
        gt_depth.push(d);
        object_ids.push(obj.id);

        let mut row = features.row_mut(s);
        row[obj.class.index()] = 1.0;
        row[channels::OFFSET.start] = obj.center[0] - hit.x;
        row[channels::OFFSET.start + 1] = obj.center[1] - hit.y;
        for a in 0..3 {
            row[channels::LOG_SIZE.start + a] = obj.size[a].ln();
        }
        row[channels::YAW.start] = obj.yaw.sin();
        row[channels::YAW.start + 1] = obj.yaw.cos();
        row[channels::VELOCITY.start] = obj.velocity[0];
        row[channels::VELOCITY.start + 1] = obj.velocity[1];
        if noise.feat_sigma > 0.0 {
            for x in row.iter_mut() {
                *x += feat_noise.sample(&mut rng);
            }
        }

        let mut lrow = logits.row_mut(s);
        if noise.depth_sigma > 0.0 {
            for (b, x) in lrow.iter_mut().enumerate() {
                let r = bins.centers[b] - d;
                *x = -r * r * inv2s2;
            }
        } else {
            // finite, so -log q stays finite in the CRF
            lrow.fill(DELTA_FLOOR);
            let x = ((d - bins.d_min) / bins.spacing() - 0.5).clamp(0.0, (k - 1) as f64);
            let lo = (x.floor() as usize).min(k - 2);
            let f = x - lo as f64;
            lrow[lo] = (1.0 - f).ln().max(DELTA_FLOOR);
            lrow[lo + 1] = f.ln().max(DELTA_FLOOR);
        }
        if noise.logit_sigma > 0.0 {
            for x in lrow.iter_mut() {
                *x += logit_noise.sample(&mut rng);
            }
        }
    }

    Ok(AgentFrame {
        agent,
        domain: agent.domain(),
        width: w,
        height: h,
        pixels,
        slot_of,
        features,
        gt_depth,
        object_ids,
        unary_logits: logits,
    })
}

/// Pixel rectangle `[u0, u1) x [v0, v1)` covering an object's silhouette.
/// Falls back to the whole image when a corner is behind the camera.
fn pixel_bounds(cam: &CameraModel, obj: &SceneObject) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cam.image_width as f64, cam.image_height as f64);
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut all_front = true;
    let mut any_front = false;
    for c in obj.corners() {
        match cam.project(&c) {
            Some(p) if p.depth > NEAR_CLIP => {
                any_front = true;
                lo = (lo.0.min(p.u), lo.1.min(p.v));
                hi = (hi.0.max(p.u), hi.1.max(p.v));
            }
            _ => all_front = false,
        }
    }
    if !any_front {
        return None;
    }
    if !all_front {
        return Some((0, cam.image_width, 0, cam.image_height));
    }
    let u0 = (lo.0 - 1.0).floor().clamp(0.0, w) as usize;
    let u1 = (hi.0 + 1.0).ceil().clamp(0.0, w) as usize;
    let v0 = (lo.1 - 1.0).floor().clamp(0.0, h) as usize;
    let v1 = (hi.1 + 1.0).ceil().clamp(0.0, h) as usize;
    if u0 >= u1 || v0 >= v1 {
        None
    } else {
        Some((u0, u1, v0, v1))
    }
}
