//! Synthetic multi-agent driving scenes and a beam-structured LiDAR renderer.
//!
//! Scenes are a straight two-way road with constant-velocity traffic and a few
//! parked cars. Domain profiles change the sensor (beam count, dropout, range
//! noise, ground clutter) to create a simulated and a real-looking domain.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::Box3D;
use crate::error::{invalid, Error, Result};
use crate::evalkit::bev_intersection_area;
use crate::geometry::{normalize_angle, Point, PointCloud, Pose};
use crate::seed::{derive_seed, rng_from};

/// Upper bound on connected vehicles per scene.
pub const MAX_AGENTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// Box center at `t = 0`; `z` is half the height (resting on the ground).
    pub center: [f64; 3],
    /// `[length, width, height]`
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Vehicle {
    pub fn pose_at(&self, t: f64) -> Pose {
        Pose::new(
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.yaw,
            t,
        )
    }

    pub fn box_at(&self, t: f64) -> Box3D<f64> {
        let p = self.pose_at(t);
        Box3D::new([p.x, p.y, self.center[2]], self.size, self.yaw)
    }
}

/// Sensor characteristics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    /// Elevation channels.
    pub beams: u32,
    /// Azimuth samples per revolution per beam.
    pub points_per_beam: u32,
    /// Per-return drop probability.
    pub dropout: f64,
    /// Std of radial range noise, meters.
    pub range_noise: f64,
    /// Ground clutter returns per square meter within sensor range.
    pub clutter_rate: f64,
}

impl DomainProfile {
    pub fn sim() -> Self {
        Self {
            name: "sim".into(),
            beams: 64,
            points_per_beam: 1024,
            dropout: 0.0,
            range_noise: 0.01,
            clutter_rate: 0.005,
        }
    }

    pub fn real() -> Self {
        Self {
            name: "real".into(),
            beams: 16,
            points_per_beam: 1024,
            dropout: 0.2,
            range_noise: 0.05,
            clutter_rate: 0.02,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sim" => Ok(Self::sim()),
            "real" => Ok(Self::real()),
            other => invalid(format!("unknown domain profile `{other}` (expected sim|real)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 || self.points_per_beam == 0 {
            return invalid("profile needs at least one beam and one point per beam");
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if !(self.range_noise >= 0.0 && self.clutter_rate >= 0.0) {
            return invalid("range_noise and clutter_rate must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Each vehicle is sampled independently; no inter-vehicle occlusion.
    Surface,
    /// Surface samples whose ray from the sensor crosses another vehicle are removed.
    RayOcclusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub vehicles: usize,
    pub agents: usize,
    pub road_half_length: f64,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub parked_fraction: f64,
    /// Non-ego agents are placed within this longitudinal distance of the ego.
    pub agent_radius: f64,
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub frames: usize,
    pub frame_dt: f64,
    /// Time before the first frame, so stale captures stay inside the scene.
    pub warmup: f64,
    pub sensor_range: f64,
    pub sensor_height: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub render_mode: RenderMode,
    pub profile: DomainProfile,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            vehicles: 12,
            agents: 2,
            road_half_length: 60.0,
            lanes_per_direction: 2,
            lane_width: 3.5,
            speed_min: 6.0,
            speed_max: 14.0,
            parked_fraction: 0.2,
            agent_radius: 25.0,
            length_range: [3.8, 5.2],
            width_range: [1.7, 2.1],
            height_range: [1.4, 1.9],
            frames: 10,
            frame_dt: 0.1,
            warmup: 1.0,
            sensor_range: 50.0,
            sensor_height: 1.8,
            elevation_min_deg: -25.0,
            elevation_max_deg: 3.0,
            render_mode: RenderMode::Surface,
            profile: DomainProfile::sim(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.agents > MAX_AGENTS {
            return invalid(format!("agent count {} outside [1, {MAX_AGENTS}]", self.agents));
        }
        if self.vehicles < self.agents {
            return Err(Error::Generation(format!(
                "vehicle count {} below agent count {}",
                self.vehicles, self.agents
            )));
        }
        if self.lanes_per_direction == 0 || self.frames == 0 || self.frame_dt <= 0.0 {
            return invalid("need lanes, frames and a positive frame_dt");
        }
        for r in [self.length_range, self.width_range, self.height_range] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return invalid(format!("size range {r:?} must be positive and ordered"));
            }
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return invalid("speed range must be non-negative and ordered");
        }
        if self.elevation_max_deg <= self.elevation_min_deg {
            return invalid("elevation range must be ordered");
        }
        self.profile.validate()
    }

    /// Capture times of the scene's frames.
    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.frames).map(|f| self.warmup + f as f64 * self.frame_dt).collect()
    }

    pub fn duration(&self) -> f64 {
        self.warmup + self.frames as f64 * self.frame_dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub vehicles: Vec<Vehicle>,
    /// Vehicle indices of the connected agents; the first is the ego.
    pub agents: Vec<usize>,
    pub duration: f64,
    pub seed: u64,
    pub profile: DomainProfile,
    pub render_mode: RenderMode,
    pub sensor_range: f64,
    pub sensor_height: f64,
    pub elevation_deg: [f64; 2],
}

impl Scenario {
    pub fn ego_pose(&self, t: f64) -> Pose {
        self.vehicles[self.agents[0]].pose_at(t)
    }

    pub fn agent_pose(&self, agent_id: usize, t: f64) -> Pose {
        self.vehicles[self.agents[agent_id]].pose_at(t)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.duration) {
            return Err(Error::OutOfRange(format!(
                "time {t:.3}s outside scenario span [0, {:.3}]s",
                self.duration
            )));
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 200;

/// Places vehicles without footprint overlap; deterministic in `seed`.
pub fn generate_scenario(config: &SceneConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = rng_from(seed, 0x5CE7E);
    let lanes: Vec<(f64, f64)> = (0..config.lanes_per_direction)
        .flat_map(|i| {
            let off = config.lane_width * (i as f64 + 0.5);
            [(-off, 0.0), (off, PI)]
        })
        .collect();
    let road_edge = config.lane_width * config.lanes_per_direction as f64;

    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(config.vehicles);
    for i in 0..config.vehicles {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = [
                rng.gen_range(config.length_range[0]..=config.length_range[1]),
                rng.gen_range(config.width_range[0]..=config.width_range[1]),
                rng.gen_range(config.height_range[0]..=config.height_range[1]),
            ];
            let parked = i >= config.agents && rng.gen_bool(config.parked_fraction.clamp(0.0, 1.0));
            let (x, y, yaw, speed) = if parked {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (
                    rng.gen_range(-config.road_half_length..config.road_half_length),
                    side * (road_edge + 1.5 + rng.gen_range(0.0..2.0)),
                    rng.gen_range(-PI..PI),
                    0.0,
                )
            } else {
                let (ly, lyaw) = lanes[rng.gen_range(0..lanes.len())];
                let x = if i == 0 {
                    rng.gen_range(-2.0..2.0)
                } else if i < config.agents {
                    vehicles[0].center[0] + rng.gen_range(-config.agent_radius..config.agent_radius)
                } else {
                    rng.gen_range(-config.road_half_length..config.road_half_length)
                };
                let jitter = rng.gen_range(-0.05..0.05);
                (
                    x,
                    ly + rng.gen_range(-0.3..0.3),
                    lyaw + jitter,
                    rng.gen_range(config.speed_min..=config.speed_max),
                )
            };
            let yaw = normalize_angle(yaw);
            let cand = Vehicle {
                center: [x, y, size[2] / 2.0],
                size,
                yaw,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
            };
            let margin = Box3D::new(cand.center, [size[0] + 1.0, size[1] + 0.6, size[2]], yaw);
            let clear = vehicles.iter().all(|v| {
                let other = v.box_at(0.0);
                bev_intersection_area(&margin, &other) <= 0.0
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(v) => vehicles.push(v),
            None => {
                return Err(Error::Generation(format!(
                    "could not place vehicle {i} without overlap after {PLACEMENT_RETRIES} tries"
                )))
            }
        }
    }
    Ok(Scenario {
        vehicles,
        agents: (0..config.agents).collect(),
        duration: config.duration(),
        seed,
        profile: config.profile.clone(),
        render_mode: config.render_mode,
        sensor_range: config.sensor_range,
        sensor_height: config.sensor_height,
        elevation_deg: [config.elevation_min_deg, config.elevation_max_deg],
    })
}

/// Boxes of every vehicle (ego excluded) whose center lies in the ego-frame
/// window `[-range_x, range_x) x [-range_y, range_y)`, expressed in the ego frame.
pub fn ground_truth_boxes(scenario: &Scenario, t: f64, range: [f64; 2]) -> Result<Vec<Box3D<f64>>> {
    if scenario.agents.is_empty() {
        return Ok(Vec::new());
    }
    scenario.check_time(t)?;
    let ego_idx = scenario.agents[0];
    let ego = scenario.vehicles[ego_idx].pose_at(t);
    let mut out = Vec::new();
    for (i, v) in scenario.vehicles.iter().enumerate() {
        if i == ego_idx {
            continue;
        }
        let p = v.pose_at(t);
        let (x, y) = ego.to_local(p.x, p.y);
        if x >= -range[0] && x < range[0] && y >= -range[1] && y < range[1] {
            out.push(Box3D::new([x, y, v.center[2]], v.size, normalize_angle(p.yaw - ego.yaw)));
        }
    }
    Ok(out)
}

fn beam_elevations(beams: u32, range_deg: [f64; 2]) -> Vec<f64> {
    if beams == 1 {
        return vec![((range_deg[0] + range_deg[1]) / 2.0).to_radians()];
    }
    (0..beams)
        .map(|b| {
            (range_deg[0] + (range_deg[1] - range_deg[0]) * b as f64 / (beams - 1) as f64)
                .to_radians()
        })
        .collect()
}

/// Angle of `to - from` measured relative to `reference`, wrapped to `(-pi, pi]`.
fn rel_angle(from: [f64; 2], to: [f64; 2], reference: f64) -> f64 {
    normalize_angle((to[1] - from[1]).atan2(to[0] - from[0]) - reference)
}

/// Number of azimuth steps covering `width` radians, stochastically rounded.
fn azimuth_steps(width: f64, per_rev: u32, rng: &mut ChaCha8Rng) -> usize {
    let exact = width.abs() * per_rev as f64 / (2.0 * PI);
    let base = exact.floor();
    base as usize + usize::from(rng.gen::<f64>() < exact - base)
}

/// Samples the sensor-facing surfaces of one box along beam rings, in world
/// coordinates `[x, y, z, intensity]`.
fn sample_vehicle(
    b: &Box3D<f64>,
    sensor: [f64; 3],
    elevations: &[f64],
    profile: &DomainProfile,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 4]> {
    let corners = b.corners_bev();
    let s2 = [sensor[0], sensor[1]];
    let z0 = b.center[2] - b.size[2] / 2.0;
    let z1 = z0 + b.size[2];
    let mut pts = Vec::new();

    for j in 0..4 {
        let (a, c) = (corners[j], corners[(j + 1) % 4]);
        let mid = [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0];
        // corners run counter-clockwise, so the outward normal is the edge turned clockwise
        let normal = [c[1] - a[1], a[0] - c[0]];
        if normal[0] * (s2[0] - mid[0]) + normal[1] * (s2[1] - mid[1]) <= 0.0 {
            continue;
        }
        let reference = (mid[1] - s2[1]).atan2(mid[0] - s2[0]);
        let width = rel_angle(s2, c, reference) - rel_angle(s2, a, reference);
        let steps = azimuth_steps(width, profile.points_per_beam, rng);
        for step in 0..steps {
            let u = (step as f64 + rng.gen::<f64>()) / steps as f64;
            let p = [a[0] + u * (c[0] - a[0]), a[1] + u * (c[1] - a[1])];
            let d = ((p[0] - s2[0]).powi(2) + (p[1] - s2[1]).powi(2)).sqrt();
            for &e in elevations {
                let z = sensor[2] + d * e.tan();
                if z >= z0 && z <= z1 {
                    pts.push([p[0], p[1], z, 0.2 + 0.6 * rng.gen::<f64>()]);
                }
            }
        }
    }

    if sensor[2] > z1 {
        let center = [b.center[0], b.center[1]];
        let reference = (center[1] - s2[1]).atan2(center[0] - s2[0]);
        let angles: Vec<f64> = corners.iter().map(|&k| rel_angle(s2, k, reference)).collect();
        let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let steps = azimuth_steps(hi - lo, profile.points_per_beam, rng);
        for &e in elevations.iter().filter(|&&e| e < 0.0) {
            let d = (sensor[2] - z1) / (-e).tan();
            for step in 0..steps {
                let phi = reference + lo + (step as f64 + 0.5) * (hi - lo) / steps as f64;
                let p = [s2[0] + d * phi.cos(), s2[1] + d * phi.sin()];
                if b.contains_bev(p[0], p[1]) {
                    pts.push([p[0], p[1], z1, 0.2 + 0.6 * rng.gen::<f64>()]);
                }
            }
        }
    }

    let sigma = profile.range_noise;
    let noise = Normal::new(0.0, sigma).expect("validated profile");
    let mut out = Vec::with_capacity(pts.len());
    for mut p in pts {
        let dropped = rng.gen::<f64>() < profile.dropout;
        let r = noise.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma);
        if dropped {
            continue;
        }
        let dir = [p[0] - sensor[0], p[1] - sensor[1], p[2] - sensor[2]];
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if n > 0.0 {
            for k in 0..3 {
                p[k] += r * dir[k] / n;
            }
        }
        out.push(p);
    }
    out
}

/// Whether the segment `from -> to` passes through box `b` (slab test in box frame).
fn segment_hits_box(from: [f64; 3], to: [f64; 3], b: &Box3D<f64>) -> bool {
    let pose = Pose::new(b.center[0], b.center[1], b.yaw, 0.0);
    let (fx, fy) = pose.to_local(from[0], from[1]);
    let (tx, ty) = pose.to_local(to[0], to[1]);
    let z0 = b.center[2] - b.size[2] / 2.0;
    let lo = [-b.size[0] / 2.0, -b.size[1] / 2.0, z0];
    let hi = [b.size[0] / 2.0, b.size[1] / 2.0, z0 + b.size[2]];
    let o = [fx, fy, from[2]];
    let d = [tx - fx, ty - fy, to[2] - from[2]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return false;
            }
        } else {
            let (mut a, mut c) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            if a > c {
                std::mem::swap(&mut a, &mut c);
            }
            t0 = t0.max(a);
            t1 = t1.min(c);
            if t0 > t1 {
                return false;
            }
        }
    }
    // stop just short of the end point so a box does not occlude its own surface
    t0 < 1.0 - 1e-6
}

/// Renders the cloud seen from `agent_pose` at time `t`, in the agent frame.
/// Vehicle returns come from per-vehicle sub-streams of `rng`, so a vehicle's
/// samples depend only on its geometry relative to the sensor.
pub fn render_lidar(
    scenario: &Scenario,
    agent_pose: &Pose,
    profile: &DomainProfile,
    t: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    scenario.check_time(t)?;
    profile.validate()?;
    let base: u64 = rng.gen();
    let sensor = [agent_pose.x, agent_pose.y, scenario.sensor_height];
    let elevations = beam_elevations(profile.beams, scenario.elevation_deg);
    let boxes: Vec<Box3D<f64>> = scenario.vehicles.iter().map(|v| v.box_at(t)).collect();
    let range = scenario.sensor_range;

    let mut world = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if b.contains_bev(sensor[0], sensor[1]) {
            continue;
        }
        let dist = ((b.center[0] - sensor[0]).powi(2) + (b.center[1] - sensor[1]).powi(2)).sqrt();
        if dist > range + b.size[0] {
            continue;
        }
        let mut vrng = rng_from(base, i as u64);
        let mut pts = sample_vehicle(b, sensor, &elevations, profile, &mut vrng);
        if scenario.render_mode == RenderMode::RayOcclusion {
            pts.retain(|p| {
                boxes.iter().enumerate().all(|(j, other)| {
                    j == i
                        || other.contains_bev(sensor[0], sensor[1])
                        || !segment_hits_box(sensor, [p[0], p[1], p[2]], other)
                })
            });
        }
        world.extend(pts);
    }

    let mut cloud: PointCloud = Vec::with_capacity(world.len());
    for p in world {
        let (x, y) = agent_pose.to_local(p[0], p[1]);
        if x * x + y * y <= range * range {
            cloud.push([x as f32, y as f32, p[2] as f32, p[3] as f32]);
        }
    }

    let mut crng = rng_from(base, derive_seed(u64::MAX, 1));
    let area = PI * range * range;
    let count = (profile.clutter_rate * area).round() as usize;
    for _ in 0..count {
        let r = range * crng.gen::<f64>().sqrt();
        let th = crng.gen_range(-PI..PI);
        let p: Point = [
            (r * th.cos()) as f32,
            (r * th.sin()) as f32,
            crng.gen_range(0.0..0.3) as f32,
            (0.1 * crng.gen::<f64>()) as f32,
        ];
        if crng.gen::<f64>() >= profile.dropout {
            cloud.push(p);
        }
    }
    Ok(cloud)
}
