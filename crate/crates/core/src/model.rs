//! The full detector: per-agent pillar encoders, fusion transformer, ego
//! projection and detection head, plus the two domain discriminators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::afa::{init_discriminator, DISC_EGO, DISC_INTER};
use crate::container::{Reader, Writer};
use crate::dataset::FrameRecord;
use crate::detection::{decode, head_forward, init_head, nms, Detection, HeadOutput, LossConfig};
use crate::error::{config, invalid, Error, Result};
use crate::geometry::project_points;
use crate::params::{Ctx, ParamStore};
use crate::pillars::{encode, init_encoder, pillarize, stack_agents, BevGridSpec, FeatureMap, PillarStats};
use crate::scenario::MAX_AGENTS;
use crate::seed::rng_from;
use crate::uvit::{fuse, init_block, init_fuse, s2r_uvit, AttentionSpec};
use crate::{Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    pub attention: AttentionSpec,
    /// Agents fused per frame; extra agents in a record are ignored.
    pub max_agents: usize,
    /// One encoder for all agents, or one per agent slot.
    pub share_encoder: bool,
    pub loss: LossConfig,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGridSpec::default(),
            attention: AttentionSpec::default(),
            max_agents: MAX_AGENTS,
            share_encoder: true,
            loss: LossConfig::default(),
            score_thresh: 0.25,
            nms_iou: 0.15,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.max_agents == 0 || self.max_agents > MAX_AGENTS {
            return config(format!("max_agents {} outside [1, {MAX_AGENTS}]", self.max_agents));
        }
        for k in 1..=self.max_agents {
            self.attention.validate(k * self.grid.channels)?;
        }
        if !(0.0..1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return config("score_thresh must be in [0, 1) and nms_iou in [0, 1]");
        }
        Ok(())
    }

    fn encoder_prefix(&self, agent: usize) -> String {
        if self.share_encoder {
            "enc".into()
        } else {
            format!("enc{agent}")
        }
    }
}

/// Fusion parameters depend on the stacked width, so each agent count has its own set.
pub fn fusion_prefix(k: usize) -> String {
    format!("fusion.k{k}")
}

/// Pillar statistics of each agent's cloud in the ego frame, ego first.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput {
    pub agents: Vec<PillarStats>,
}

impl FusionInput {
    /// Projects every agent's cloud into the ego frame using the reported poses.
    pub fn from_record(rec: &FrameRecord, grid: &BevGridSpec, max_agents: usize) -> Result<Self> {
        if rec.num_agents() == 0 || rec.points.len() != rec.num_agents() {
            return invalid("record needs at least the ego agent and one cloud per pose");
        }
        let ego = rec.poses[0];
        let agents = (0..rec.num_agents().min(max_agents))
            .map(|a| {
                let pts = if a == 0 {
                    rec.points[0].clone()
                } else {
                    project_points(&rec.points[a], &rec.poses[a], &ego)?
                };
                Ok(pillarize(&pts, grid))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { agents })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    /// Pre-fusion maps, ego first.
    pub agent_maps: Vec<FeatureMap>,
    /// Fused ego map `[H, W, C]`.
    pub fused: Var,
    pub head: HeadOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct S2rModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

pub type Model32 = S2rModel<f32>;
pub type Model64 = S2rModel<f64>;

impl<T: Scalar> S2rModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.grid.channels;
        let mut params = ParamStore::new();
        let mut rng = rng_from(seed, 0x4D0DE1);
        let encoders = if config.share_encoder { 1 } else { config.max_agents };
        for a in 0..encoders {
            init_encoder(&mut params, &config.encoder_prefix(a), &config.grid, &mut rng);
        }
        for k in 1..=config.max_agents {
            let p = fusion_prefix(k);
            for b in 0..config.attention.blocks {
                init_block(&mut params, &format!("{p}.block{b}"), &config.attention, c, k, &mut rng);
            }
            init_fuse(&mut params, &format!("{p}.fuse"), c, k, &mut rng);
        }
        init_head(&mut params, "head", c, &mut rng);
        init_discriminator(&mut params, DISC_INTER, c, &mut rng);
        init_discriminator(&mut params, DISC_EGO, c, &mut rng);
        Ok(Self { config, params })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, input: &FusionInput) -> Result<ForwardOut> {
        let cfg = &self.config;
        let k = input.agents.len();
        if k == 0 || k > cfg.max_agents {
            return invalid(format!("{k} agents outside [1, {}]", cfg.max_agents));
        }
        let agent_maps = input
            .agents
            .iter()
            .enumerate()
            .map(|(a, stats)| encode(ctx, stats, &cfg.grid, &cfg.encoder_prefix(a)))
            .collect::<Result<Vec<_>>>()?;
        let stacked = stack_agents(ctx, &agent_maps)?;
        let p = fusion_prefix(k);
        let fused_stack = s2r_uvit(ctx, &stacked, &cfg.attention, &p)?;
        let fused = fuse(ctx, &fused_stack, &format!("{p}.fuse"))?;
        let head = head_forward(ctx, fused, "head")?;
        Ok(ForwardOut { agent_maps, fused, head })
    }

    /// Decoded detections after NMS.
    pub fn predict(&self, input: &FusionInput) -> Result<Vec<Detection>> {
        let mut ctx = Ctx::new(&self.params);
        let out = self.forward(&mut ctx, input)?;
        let grid = self.config.grid.feature_grid();
        let dets = decode(ctx.value(out.head.cls), ctx.value(out.head.reg), &grid, self.config.score_thresh)?;
        Ok(nms(&dets, self.config.nms_iou))
    }

    pub fn cast<U: Scalar>(&self) -> S2rModel<U> {
        S2rModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Serializes the parameters and config as named `f32` arrays. The config is
    /// stored as its JSON bytes under `config.json`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.params.len() as u32 + 1);
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        write_named(&mut w, "config.json", &[json.len()], &json.iter().map(|&b| b as f32).collect::<Vec<_>>());
        for (name, t) in self.params.iter() {
            let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
            write_named(&mut w, name, t.shape(), &data);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let count = r.u32()? as usize;
        let mut config = None;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return r.error(format!("array `{name}` has {ndim} dimensions"));
            }
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data_at = r.offset();
            let data = r.f32_array()?;
            if data.len() != dims.iter().product::<usize>() {
                return Err(Error::Format {
                    offset: data_at as u64,
                    msg: format!("array `{name}` length {} does not match shape {dims:?}", data.len()),
                });
            }
            if name == "config.json" {
                let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                let cfg: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
                    offset: at as u64,
                    msg: format!("bad model config: {e}"),
                })?;
                config = Some(cfg);
            } else {
                let t = Tensor::from_vec(&dims, data.iter().map(|&v| T::lit(v as f64)).collect())?;
                params.insert(name, t);
            }
        }
        r.finish()?;
        let Some(config) = config else {
            return r.error("checkpoint has no config.json entry");
        };
        config.validate()?;
        let expected = Self::new(config.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return r.error(format!("parameter `{name}` has shape {:?}, expected {:?}", p.shape(), t.shape()))
                }
                None => return r.error(format!("checkpoint is missing parameter `{name}`")),
            }
        }
        if params.len() != expected.params.len() {
            return r.error("checkpoint has unexpected parameters");
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rounds every parameter through `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(v.as_f64() as f32 as f64));
        }
    }
}

fn write_named(w: &mut Writer, name: &str, dims: &[usize], data: &[f32]) {
    w.string(name);
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u32(d as u32);
    }
    w.f32_array(data);
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, SceneConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            grid: BevGridSpec { range_x: 16.0, range_y: 8.0, cell: 0.5, channels: 8, downsample: 4 },
            attention: AttentionSpec { heads: 4, blocks: 1, ..AttentionSpec::default() },
            max_agents: 3,
            ..ModelConfig::default()
        }
    }

    fn record() -> FrameRecord {
        let sc = generate_scenario(&SceneConfig { agents: 2, ..SceneConfig::default() }, 5).unwrap();
        crate::dataset::render_record(&sc, 1.0, [16.0, 8.0]).unwrap()
    }

    #[test]
    fn forward_shapes_for_each_agent_count() {
        let model = Model32::new(tiny_config(), 1).unwrap();
        let rec = record();
        for k in 1..=2 {
            let input = FusionInput::from_record(&rec, &model.config.grid, k).unwrap();
            assert_eq!(input.agents.len(), k);
            let mut ctx = Ctx::new(&model.params);
            let out = model.forward(&mut ctx, &input).unwrap();
            assert_eq!(out.agent_maps.len(), k);
            assert_eq!(ctx.value(out.fused).shape(), &[16, 8, 8]);
            assert_eq!(ctx.value(out.head.reg).shape(), &[16, 8, 8]);
        }
        let empty = FusionInput { agents: vec![] };
        assert!(model.forward(&mut Ctx::new(&model.params), &empty).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { max_agents: 6, ..tiny_config() }.validate().is_err());
        let bad = ModelConfig { attention: AttentionSpec { heads: 3, ..AttentionSpec::default() }, ..tiny_config() };
        assert_eq!(bad.validate().unwrap_err().kind(), "config");
        let d = ModelConfig::default();
        assert_eq!((d.attention.heads, d.attention.groups, d.attention.win_local, d.attention.win_global), (8, 2, 4, 8));
        assert!(d.validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model32::new(ModelConfig { share_encoder: false, ..tiny_config() }, 2).unwrap();
        let bytes = model.to_bytes();
        let back = Model32::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        let input = FusionInput::from_record(&record(), &model.config.grid, 3).unwrap();
        assert_eq!(back.predict(&input).unwrap(), model.predict(&input).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.s2rd");
        model.save(&path).unwrap();
        assert_eq!(Model32::load(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let bytes = Model32::new(tiny_config(), 2).unwrap().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let e = Model32::from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(e.kind(), "format", "cut {cut}");
        }
        let other = Model32::new(ModelConfig { max_agents: 2, ..tiny_config() }, 2).unwrap().to_bytes();
        let mut spliced = other[..12].to_vec();
        spliced.extend_from_slice(&bytes[12..]);
        assert!(Model32::from_bytes(&spliced).is_err());
    }
}
