//! Planar rigid transforms, ego-frame projection and deployment-gap injection.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scenario::{render_lidar, Scenario};
use crate::seed::rng_from;
use crate::Scalar;

/// One LiDAR return: `[x, y, z, intensity]`.
pub type Point = [f32; 4];
pub type PointCloud = Vec<Point>;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Planar pose with capture timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub t: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64, t: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw), t }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite() && self.t.is_finite()
    }

    /// Local `(x, y)` to world.
    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    /// World `(x, y)` to local.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Rounds every field through `f32`, the precision of stored records.
    pub fn quantized(&self) -> Self {
        Self {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            yaw: self.yaw as f32 as f64,
            t: self.t as f32 as f64,
        }
    }
}

/// Deployment-gap noise: positional std (m), heading std (degrees), latency (s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_pos: f64,
    pub sigma_head: f64,
    pub latency: f64,
}

impl NoiseSpec {
    pub const PERFECT: NoiseSpec = NoiseSpec { sigma_pos: 0.0, sigma_head: 0.0, latency: 0.0 };
    /// 0.2 m / 0.2 deg / 100 ms.
    pub const NOISY: NoiseSpec = NoiseSpec { sigma_pos: 0.2, sigma_head: 0.2, latency: 0.1 };

    pub fn new(sigma_pos: f64, sigma_head: f64, latency: f64) -> Result<Self> {
        let s = Self { sigma_pos, sigma_head, latency };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("sigma_pos", self.sigma_pos), ("sigma_head", self.sigma_head), ("latency", self.latency)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("noise {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_pos == 0.0 && self.sigma_head == 0.0 && self.latency == 0.0
    }
}

impl std::str::FromStr for NoiseSpec {
    type Err = Error;

    /// Parses `"sigma_pos,sigma_head,latency"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return invalid(format!("noise triple needs 3 comma-separated values, got `{s}`"));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad noise value `{p}`")))?;
        }
        NoiseSpec::new(v[0], v[1], v[2])
    }
}

/// Re-expresses points captured at `src` in the frame of `dst`. Only `(x, y)` are
/// transformed; height and intensity pass through. Arithmetic is done in `f64`.
pub fn project_points<T: Scalar>(points: &[[T; 4]], src: &Pose, dst: &Pose) -> Result<Vec<[T; 4]>> {
    if !src.is_finite() || !dst.is_finite() {
        return invalid("non-finite pose");
    }
    let (s, c) = (src.yaw - dst.yaw).sin_cos();
    let (tx, ty) = dst.to_local(src.x, src.y);
    points
        .iter()
        .map(|p| {
            if !p.iter().all(|v| v.is_finite()) {
                return invalid("non-finite point");
            }
            let (x, y) = (p[0].as_f64(), p[1].as_f64());
            Ok([T::lit(tx + c * x - s * y), T::lit(ty + s * x + c * y), p[2], p[3]])
        })
        .collect()
}

/// Adds Gaussian GPS error: `N(0, sigma_pos)` to x and y, `N(0, sigma_head deg)` to yaw.
pub fn perturb_pose(pose: &Pose, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<Pose> {
    spec.validate()?;
    let pos = Normal::new(0.0, spec.sigma_pos).expect("validated");
    let head = Normal::new(0.0, spec.sigma_head.to_radians()).expect("validated");
    // draw unconditionally so the stream advances identically for any spec
    let (dx, dy, dyaw) = (pos.sample(rng), pos.sample(rng), head.sample(rng));
    let mut out = *pose;
    if spec.sigma_pos > 0.0 {
        out.x += dx;
        out.y += dy;
    }
    if spec.sigma_head > 0.0 {
        out.yaw = normalize_angle(out.yaw + dyaw);
    }
    Ok(out)
}

/// One agent's capture: cloud in its own sensor frame plus the pose it reports.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFrame {
    pub agent_id: usize,
    pub pose: Pose,
    pub points: PointCloud,
}

/// Frame an agent would have delivered `latency` seconds ago: rendered at
/// `t - latency` with the pose recorded at that time. The render stream is keyed
/// by `t`, so `latency = 0` reproduces the live frame exactly. Callers keep the
/// ego at zero latency.
pub fn stale_frame(scenario: &Scenario, agent_id: usize, t: f64, latency: f64) -> Result<AgentFrame> {
    if !(latency.is_finite() && latency >= 0.0 && t.is_finite()) {
        return invalid("latency and time must be finite, latency >= 0");
    }
    let Some(&vehicle) = scenario.agents.get(agent_id) else {
        return invalid(format!("agent {agent_id} not in scenario"));
    };
    let when = t - latency;
    if when < 0.0 || t > scenario.duration {
        return Err(Error::OutOfRange(format!(
            "capture time {when:.3}s outside scenario span [0, {:.3}]s",
            scenario.duration
        )));
    }
    let pose = scenario.vehicles[vehicle].pose_at(when);
    let mut rng = rng_from(scenario.seed, frame_tag(agent_id, t));
    let points = render_lidar(scenario, &pose, &scenario.profile, when, &mut rng)?;
    Ok(AgentFrame { agent_id, pose: pose.quantized(), points })
}

/// Live frame; identical to `stale_frame(.., 0.0)`.
pub fn live_frame(scenario: &Scenario, agent_id: usize, t: f64) -> Result<AgentFrame> {
    stale_frame(scenario, agent_id, t, 0.0)
}

fn frame_tag(agent_id: usize, t: f64) -> u64 {
    t.to_bits().rotate_left(17) ^ (agent_id as u64).wrapping_mul(0x2545_F491_4F6C_DD1D)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, SceneConfig, Vehicle};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn projection_examples() {
        let origin = Pose::new(0.0, 0.0, 0.0, 0.0);
        let p = project_points(&[[1.0f64, 0.0, 0.0, 0.5]], &Pose::new(10.0, 0.0, 0.0, 0.0), &origin).unwrap();
        assert_eq!(p[0], [11.0, 0.0, 0.0, 0.5]);
        let q = project_points(&[[1.0f64, 0.0, 0.3, 0.5]], &Pose::new(0.0, 0.0, FRAC_PI_2, 0.0), &origin).unwrap();
        assert!(q[0][0].abs() < 1e-15 && (q[0][1] - 1.0).abs() < 1e-15);
        assert_eq!(&q[0][2..], &[0.3, 0.5]);
        assert!(project_points(&[[f64::NAN, 0.0, 0.0, 0.0]], &origin, &origin).is_err());
        assert!(project_points::<f64>(&[], &Pose { x: f64::INFINITY, ..origin }, &origin).is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (-100.0..100.0f64, -100.0..100.0f64, -7.0..7.0f64).prop_map(|(x, y, yaw)| Pose::new(x, y, yaw, 0.0))
    }

    proptest! {
        #[test]
        fn projection_inverse_and_composition(
            a in pose_strategy(), b in pose_strategy(), c in pose_strategy(),
            pts in proptest::collection::vec((-80.0..80.0f64, -80.0..80.0f64, -2.0..4.0f64), 1..20),
        ) {
            let pts: Vec<[f64; 4]> = pts.into_iter().map(|(x, y, z)| [x, y, z, 0.1]).collect();
            let fwd = project_points(&pts, &a, &b).unwrap();
            let back = project_points(&fwd, &b, &a).unwrap();
            let via = project_points(&fwd, &b, &c).unwrap();
            let direct = project_points(&pts, &a, &c).unwrap();
            for k in 0..pts.len() {
                for d in 0..4 {
                    prop_assert!((back[k][d] - pts[k][d]).abs() < 1e-9);
                    prop_assert!((via[k][d] - direct[k][d]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn yaw_normalized(yaw in -50.0..50.0f64) {
            let a = normalize_angle(yaw);
            prop_assert!(a > -std::f64::consts::PI && a <= std::f64::consts::PI);
            prop_assert!(((a - yaw) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-9
                || (1.0 - ((a - yaw) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-9);
        }
    }

    #[test]
    fn perturb_examples() {
        let pose = Pose::new(3.0, -1.0, 0.4, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_pose(&pose, &NoiseSpec::PERFECT, &mut rng).unwrap(), pose);

        let spec = NoiseSpec::new(0.2, 0.0, 0.0).unwrap();
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| perturb_pose(&pose, &spec, &mut rng).unwrap().x - pose.x).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((0.19..=0.21).contains(&std), "std {std}");

        let noisy = NoiseSpec::NOISY;
        let a = perturb_pose(&pose, &noisy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = perturb_pose(&pose, &noisy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, pose.t);
        assert!(perturb_pose(&pose, &NoiseSpec { sigma_pos: -1.0, ..noisy }, &mut rng).is_err());
    }

    #[test]
    fn heading_noise_in_degrees() {
        let pose = Pose::new(0.0, 0.0, 0.0, 0.0);
        let spec = NoiseSpec::new(0.0, 2.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let ys: Vec<f64> = (0..n).map(|_| perturb_pose(&pose, &spec, &mut rng).unwrap().yaw).collect();
        let std = (ys.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((std - 2f64.to_radians()).abs() < 0.002, "std {std}");
    }

    #[test]
    fn noise_spec_parsing() {
        let s: NoiseSpec = "0.2, 0.2, 0.1".parse().unwrap();
        assert_eq!(s, NoiseSpec::NOISY);
        assert!("0.2,0.2".parse::<NoiseSpec>().is_err());
        assert!("0.2,x,0".parse::<NoiseSpec>().is_err());
        assert!("0.2,-1,0".parse::<NoiseSpec>().is_err());
    }

    #[test]
    fn zero_latency_is_live() {
        let sc = generate_scenario(&SceneConfig::default(), 3).unwrap();
        let live = live_frame(&sc, 1, 1.2).unwrap();
        assert_eq!(stale_frame(&sc, 1, 1.2, 0.0).unwrap(), live);
        assert!(!live.points.is_empty());
        assert!(matches!(stale_frame(&sc, 1, 0.05, 0.1), Err(Error::OutOfRange(_))));
        assert!(stale_frame(&sc, 7, 1.0, 0.0).is_err());
    }

    #[test]
    fn latency_shifts_moving_target() {
        // a two-car platoon at 10 m/s: the follower sees the leader at the same
        // relative geometry at every instant, so a stale frame is the live frame
        // displaced by speed * latency
        let mk = |x: f64| Vehicle { center: [x, 0.0, 0.8], size: [4.5, 1.9, 1.6], yaw: 0.0, velocity: [10.0, 0.0] };
        let mut sc = generate_scenario(&SceneConfig { vehicles: 2, ..SceneConfig::default() }, 1).unwrap();
        sc.vehicles = vec![mk(-30.0), mk(0.0)];
        sc.profile.clutter_rate = 0.0;
        sc.profile.dropout = 0.0;
        let t = 1.5;
        let ego = sc.ego_pose(t);
        let live = live_frame(&sc, 1, t).unwrap();
        let stale = stale_frame(&sc, 1, t, 0.1).unwrap();
        let lp = project_points(&live.points, &live.pose, &ego).unwrap();
        let sp = project_points(&stale.points, &stale.pose, &ego).unwrap();
        assert!(!lp.is_empty());
        assert_eq!(lp.len(), sp.len());
        for (l, s) in lp.iter().zip(&sp) {
            assert!((l[0] - s[0] - 1.0).abs() < 1e-3, "{l:?} vs {s:?}");
            assert!((l[1] - s[1]).abs() < 1e-3);
            assert_eq!(l[2], s[2]);
        }
    }
}
