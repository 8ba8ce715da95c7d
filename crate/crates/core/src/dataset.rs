//! On-disk datasets: a JSON manifest plus one binary record per frame.
//!
//! Records hold every agent's cloud in its own sensor frame, the poses the
//! agents report, and ego-frame ground-truth boxes. Scenarios are regenerated
//! from the manifest seeds so stale frames can be rendered for latency.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::detection::Box3D;
use crate::error::{invalid, Error, Result};
use crate::geometry::{live_frame, perturb_pose, stale_frame, NoiseSpec, PointCloud, Pose};
use crate::scenario::{generate_scenario, ground_truth_boxes, Scenario, SceneConfig};
use crate::seed::derive_seed;

pub const MANIFEST: &str = "manifest.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceLabeled,
    TargetUnlabeled,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-labeled" => Ok(Split::SourceLabeled),
            "target-unlabeled" => Ok(Split::TargetUnlabeled),
            "test" => Ok(Split::Test),
            _ => invalid(format!("unknown split `{s}`")),
        }
    }
}

/// One frame: agent clouds and poses (ego first) and ego-frame boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub points: Vec<PointCloud>,
    pub poses: Vec<Pose>,
    pub boxes: Vec<Box3D<f64>>,
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

/// Box with every field rounded through `f32`.
fn quantize_box(b: &Box3D<f64>) -> Box3D<f64> {
    Box3D { center: b.center.map(q), size: b.size.map(q), yaw: q(b.yaw) }
}

impl FrameRecord {
    pub fn num_agents(&self) -> usize {
        self.poses.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.points.len() as u32);
        for cloud in &self.points {
            let flat: Vec<f32> = cloud.iter().flatten().copied().collect();
            w.f32_array(&flat);
        }
        let poses: Vec<f32> =
            self.poses.iter().flat_map(|p| [p.x, p.y, p.yaw, p.t]).map(|v| v as f32).collect();
        w.f32_array(&poses);
        let boxes: Vec<f32> = self
            .boxes
            .iter()
            .flat_map(|b| [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw])
            .map(|v| v as f32)
            .collect();
        w.f32_array(&boxes);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let at = r.offset();
        let n = r.u32()? as usize;
        if n > crate::scenario::MAX_AGENTS {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("agent count {n} exceeds {}", crate::scenario::MAX_AGENTS),
            });
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let flat = r.f32_array()?;
            if flat.len() % 4 != 0 {
                return Err(Error::Format { offset: at as u64, msg: "point array not a multiple of 4".into() });
            }
            points.push(flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect());
        }
        let at = r.offset();
        let poses = r.f32_array()?;
        if poses.len() != 4 * n {
            return Err(Error::Format { offset: at as u64, msg: format!("expected {n} poses") });
        }
        let poses = poses
            .chunks_exact(4)
            .map(|c| Pose { x: c[0] as f64, y: c[1] as f64, yaw: c[2] as f64, t: c[3] as f64 })
            .collect();
        let at = r.offset();
        let boxes = r.f32_array()?;
        if boxes.len() % 7 != 0 {
            return Err(Error::Format { offset: at as u64, msg: "box array not a multiple of 7".into() });
        }
        let boxes = boxes
            .chunks_exact(7)
            .map(|c| {
                let c: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                Box3D { center: [c[0], c[1], c[2]], size: [c[3], c[4], c[5]], yaw: c[6] }
            })
            .collect();
        r.finish()?;
        Ok(Self { points, poses, boxes })
    }
}

/// Renders the record of scenario `sc` at time `t`.
pub fn render_record(sc: &Scenario, t: f64, range: [f64; 2]) -> Result<FrameRecord> {
    let mut points = Vec::with_capacity(sc.agents.len());
    let mut poses = Vec::with_capacity(sc.agents.len());
    for a in 0..sc.agents.len() {
        let f = live_frame(sc, a, t)?;
        points.push(f.points);
        poses.push(f.pose);
    }
    let boxes = ground_truth_boxes(sc, t, range)?.iter().map(quantize_box).collect();
    Ok(FrameRecord { points, poses, boxes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub scenario: usize,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub split: Split,
    pub seed: u64,
    /// Ego-frame half extents of the ground-truth window.
    pub range: [f64; 2],
    pub scene: SceneConfig,
    /// Seed of each scenario, indexed by `FrameEntry::scenario`.
    pub scenario_seeds: Vec<u64>,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub scene: SceneConfig,
    pub seed: u64,
    pub frames: usize,
    pub split: Split,
    pub range: [f64; 2],
}

/// Writes a dataset directory; identical inputs give identical bytes.
pub fn generate_dataset(dir: &Path, cfg: &GenConfig) -> Result<Manifest> {
    cfg.scene.validate()?;
    if !(cfg.range[0] > 0.0 && cfg.range[1] > 0.0) {
        return invalid("ground-truth range must be positive");
    }
    fs::create_dir_all(dir.join(FRAMES_DIR))?;
    let times = cfg.scene.frame_times();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut scenario_seeds = Vec::new();
    while frames.len() < cfg.frames {
        let s = scenario_seeds.len();
        let seed = derive_seed(cfg.seed, s as u64);
        let sc = generate_scenario(&cfg.scene, seed)?;
        scenario_seeds.push(seed);
        for &t in times.iter().take(cfg.frames - frames.len()) {
            let rec = render_record(&sc, t, cfg.range)?;
            let file = format!("{FRAMES_DIR}/{:06}.s2rd", frames.len());
            fs::write(dir.join(&file), rec.to_bytes())?;
            frames.push(FrameEntry { file, scenario: s, t });
        }
    }
    let manifest = Manifest {
        format_version: crate::container::VERSION,
        split: cfg.split,
        seed: cfg.seed,
        range: cfg.range,
        scene: cfg.scene.clone(),
        scenario_seeds,
        frames,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        if manifest.format_version != crate::container::VERSION {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported dataset version {}", manifest.format_version),
            });
        }
        let scenarios = manifest
            .scenario_seeds
            .iter()
            .map(|&s| generate_scenario(&manifest.scene, s))
            .collect::<Result<Vec<_>>>()?;
        if manifest.frames.iter().any(|f| f.scenario >= scenarios.len()) {
            return invalid("manifest frame refers to a missing scenario");
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, scenarios })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn split(&self) -> Split {
        self.manifest.split
    }

    pub fn scenario(&self, frame: usize) -> &Scenario {
        &self.scenarios[self.manifest.frames[frame].scenario]
    }

    pub fn record(&self, i: usize) -> Result<FrameRecord> {
        let Some(entry) = self.manifest.frames.get(i) else {
            return invalid(format!("frame {i} out of {}", self.len()));
        };
        let path = self.dir.join(&entry.file);
        FrameRecord::from_bytes(&fs::read(&path)?).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })
    }

    pub fn records(&self) -> Result<Vec<FrameRecord>> {
        (0..self.len()).map(|i| self.record(i)).collect()
    }

    /// Record `i` as delivered under deployment noise: non-ego agents send
    /// frames `latency` seconds old and report poses with GPS error. The ego
    /// and the ground truth are untouched.
    pub fn noisy_record(&self, i: usize, noise: &NoiseSpec, rng: &mut impl Rng) -> Result<FrameRecord> {
        noise.validate()?;
        let mut rec = self.record(i)?;
        if noise.latency > 0.0 {
            let sc = self.scenario(i);
            let t = self.manifest.frames[i].t;
            for a in 1..rec.num_agents() {
                let f = stale_frame(sc, a, t, noise.latency)?;
                rec.points[a] = f.points;
                rec.poses[a] = f.pose;
            }
        }
        for a in 1..rec.num_agents() {
            rec.poses[a] = perturb_pose(&rec.poses[a], noise, rng)?;
        }
        Ok(rec)
    }
}
