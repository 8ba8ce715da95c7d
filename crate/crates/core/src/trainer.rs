//! Training: weighted detection plus adversarial adaptation loss, Adam with a
//! step-decay schedule, and the epoch loop with checkpoints and a TSV log.
//!
//! A batch is split into one graph per frame. Each frame's loss is scaled so
//! the per-frame gradients add up to the gradient of the batch objective, and
//! they are summed in frame order, so the result does not depend on the number
//! of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::afa::{afa_loss, discriminate_ego, discriminate_inter, grl, DomainLabel};
use crate::dataset::{Dataset, FrameRecord};
use crate::detection::{assign_targets, detection_loss, LossConfig, Targets};
use crate::error::{config, invalid, Error, Result};
use crate::geometry::NoiseSpec;
use crate::model::{FusionInput, ModelConfig, S2rModel};
use crate::params::{Ctx, ParamGrads, ParamStore};
use crate::pillars::BevGridSpec;
use crate::seed::{derive_seed, rng_from};
use crate::uvit::AttentionSpec;
use crate::{Model32, Scalar, Tensor, Var};

/// Flat training configuration. Every key is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Detection loss weight.
    pub w1: f64,
    /// Adaptation loss weight; 0 disables the discriminators.
    pub w2: f64,
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: u32,
    pub decay_factor: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub target_batch_size: usize,
    pub seed: u64,
    /// Final gradient reversal strength.
    pub lambda_max: f64,
    /// Fraction of all steps over which the reversal strength ramps up from 0.
    pub lambda_warmup: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    pub adam_eps: f64,
    /// Pose noise applied to source frames (meters, degrees, seconds).
    pub aug_sigma_pos: f64,
    pub aug_sigma_head: f64,
    pub aug_latency: f64,
    /// Worker threads for per-frame gradients.
    pub threads: usize,
    /// Epochs between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u32,

    pub range_x: f64,
    pub range_y: f64,
    pub cell: f64,
    pub channels: usize,
    pub downsample: usize,
    pub heads: usize,
    pub win_local: usize,
    pub win_global: usize,
    pub blocks: usize,
    pub uam: bool,
    pub max_agents: usize,
    pub share_encoder: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub sl1_beta: f64,
    pub reg_weight: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_model(&ModelConfig::default())
    }
}

impl TrainConfig {
    /// Default optimization settings around the given model.
    pub fn with_model(m: &ModelConfig) -> Self {
        Self {
            w1: 0.9,
            w2: 0.1,
            lr0: 1e-3,
            decay_every: 10,
            decay_factor: 0.1,
            epochs: 20,
            batch_size: 4,
            target_batch_size: 4,
            seed: 0,
            lambda_max: 0.1,
            lambda_warmup: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            aug_sigma_pos: 0.0,
            aug_sigma_head: 0.0,
            aug_latency: 0.0,
            threads: 1,
            checkpoint_every: 0,
            range_x: m.grid.range_x,
            range_y: m.grid.range_y,
            cell: m.grid.cell,
            channels: m.grid.channels,
            downsample: m.grid.downsample,
            heads: m.attention.heads,
            win_local: m.attention.win_local,
            win_global: m.attention.win_global,
            blocks: m.attention.blocks,
            uam: m.attention.uam,
            max_agents: m.max_agents,
            share_encoder: m.share_encoder,
            focal_alpha: m.loss.alpha,
            focal_gamma: m.loss.gamma,
            sl1_beta: m.loss.beta,
            reg_weight: m.loss.reg_weight,
            score_thresh: m.score_thresh,
            nms_iou: m.nms_iou,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: BevGridSpec {
                range_x: self.range_x,
                range_y: self.range_y,
                cell: self.cell,
                channels: self.channels,
                downsample: self.downsample,
            },
            attention: AttentionSpec {
                heads: self.heads,
                groups: 2,
                win_local: self.win_local,
                win_global: self.win_global,
                blocks: self.blocks,
                uam: self.uam,
            },
            max_agents: self.max_agents,
            share_encoder: self.share_encoder,
            loss: LossConfig {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
                beta: self.sl1_beta,
                reg_weight: self.reg_weight,
            },
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
        }
    }

    pub fn augmentation(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.aug_sigma_pos, self.aug_sigma_head, self.aug_latency)
            .map_err(|e| Error::Config(format!("augmentation noise: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(self.w1, self.w2)?;
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return config(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return config("decay_every must be >= 1 and decay_factor in (0, 1]");
        }
        if self.batch_size == 0 || self.target_batch_size == 0 || self.threads == 0 {
            return config("batch sizes and threads must be >= 1");
        }
        if !(self.lambda_max.is_finite() && self.lambda_max >= 0.0) || !(0.0..=1.0).contains(&self.lambda_warmup) {
            return config("lambda_max must be >= 0 and lambda_warmup in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return config("Adam betas must be in [0, 1) and adam_eps positive");
        }
        self.augmentation()?;
        self.model_config().validate()
    }

    pub fn afa_enabled(&self) -> bool {
        self.w2 > 0.0
    }

    pub fn lr(&self, epoch: u32) -> f64 {
        lr_schedule(self.lr0, self.decay_every, self.decay_factor, epoch)
    }

    /// Reversal strength at `step` of `total` steps: linear ramp, then constant.
    pub fn lambda(&self, step: u64, total: u64) -> f64 {
        let ramp = self.lambda_warmup * total as f64;
        if ramp <= 0.0 {
            return self.lambda_max;
        }
        self.lambda_max * (step as f64 / ramp).min(1.0)
    }
}

fn check_weights(w1: f64, w2: f64) -> Result<()> {
    if !(w1 >= 0.0 && w2 >= 0.0) || (w1 + w2 - 1.0).abs() > 1e-9 {
        return config(format!("loss weights must be non-negative and sum to 1, got w1={w1} w2={w2}"));
    }
    Ok(())
}

/// `w1 * l_det + w2 * l_afa`.
pub fn total_loss(l_det: f64, l_afa: f64, w1: f64, w2: f64) -> Result<f64> {
    check_weights(w1, w2)?;
    Ok(w1 * l_det + w2 * l_afa)
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_schedule(lr0: f64, decay_every: u32, decay_factor: f64, epoch: u32) -> f64 {
    lr0 * decay_factor.powi((epoch / decay_every.max(1)) as i32)
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that has a gradient; others are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return invalid(format!("gradient for unknown parameter `{name}`"));
            };
            if p.shape() != g.shape() {
                return invalid(format!("gradient shape mismatch for `{name}`"));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = p.data_mut().iter_mut().zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, (m, v)), &g) in iter.zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = m.as_f64() / c1;
                let vhat = v.as_f64() / c2;
                *p -= T::lit(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// One frame ready for the graph: pillar statistics and, for labeled frames, targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: FusionInput,
    pub targets: Option<Targets>,
}

impl Sample {
    pub fn labeled(rec: &FrameRecord, cfg: &ModelConfig) -> Result<Self> {
        let input = FusionInput::from_record(rec, &cfg.grid, cfg.max_agents)?;
        Ok(Self { input, targets: Some(assign_targets(&rec.boxes, &cfg.grid.feature_grid())) })
    }

    pub fn unlabeled(rec: &FrameRecord, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { input: FusionInput::from_record(rec, &cfg.grid, cfg.max_agents)?, targets: None })
    }
}

/// Per-frame loss weights derived from the batch composition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameWeights {
    /// Multiplies this frame's detection loss (`w1 / n_source`).
    pub det: f64,
    /// Multiplies the adaptation terms; 0 skips the discriminators.
    pub afa: f64,
    /// Number of inter-agent terms in the whole batch.
    pub n_inter: usize,
    /// Number of ego terms in the whole batch.
    pub n_ego: usize,
    /// Gradient reversal strength; `None` leaves the discriminator inputs
    /// unreversed, giving the plain gradient of the objective.
    pub lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameLoss {
    pub total: Var,
    pub det: Option<Var>,
    /// This frame's share of the batch adaptation loss.
    pub afa: Option<Var>,
}

fn reverse<T: Scalar>(ctx: &mut Ctx<T>, x: Var, lambda: Option<f64>) -> Result<Var> {
    match lambda {
        Some(l) => grl(ctx, x, l),
        None => Ok(x),
    }
}

/// Builds one frame's contribution to the batch objective.
pub fn frame_objective<T: Scalar>(
    ctx: &mut Ctx<T>,
    model: &S2rModel<T>,
    sample: &Sample,
    domain: DomainLabel,
    w: &FrameWeights,
) -> Result<FrameLoss> {
    let out = model.forward(ctx, &sample.input)?;
    let mut parts = Vec::new();
    let det = match &sample.targets {
        Some(t) if w.det > 0.0 => {
            let d = detection_loss(ctx, out.head, t, &model.config.loss)?.total;
            parts.push(ctx.g.scale(d, T::lit(w.det)));
            Some(d)
        }
        _ => None,
    };
    let afa = if w.afa > 0.0 {
        let mut inter = Vec::with_capacity(out.agent_maps.len());
        for map in &out.agent_maps {
            let r = reverse(ctx, map.var, w.lambda)?;
            inter.push((discriminate_inter(ctx, r)?, domain));
        }
        let r = reverse(ctx, out.fused, w.lambda)?;
        let ego = [(discriminate_ego(ctx, r)?, domain)];
        let k = inter.len() as f64;
        let a = afa_loss(ctx, &inter, &ego, k / w.n_inter as f64, 1.0 / w.n_ego as f64)?;
        parts.push(ctx.g.scale(a, T::lit(w.afa)));
        Some(a)
    } else {
        None
    };
    let Some(mut total) = parts.first().copied() else {
        return invalid("frame contributes no loss term");
    };
    for &p in &parts[1..] {
        total = ctx.g.add(total, p)?;
    }
    Ok(FrameLoss { total, det, afa })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub w1: f64,
    pub w2: f64,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Mean source detection loss.
    pub l_det: f64,
    /// Batch adaptation loss; `None` when disabled.
    pub l_afa: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub lambda: f64,
}

struct FrameResult<T> {
    grads: ParamGrads<T>,
    det: f64,
    afa: f64,
}

/// Batch gradient of the weighted objective and its loss values.
pub fn batch_gradients<T: Scalar>(
    model: &S2rModel<T>,
    src: &[Sample],
    tgt: &[Sample],
    hp: &StepParams,
) -> Result<(ParamGrads<T>, StepMetrics)> {
    check_weights(hp.w1, hp.w2)?;
    let afa = hp.w2 > 0.0;
    if src.is_empty() {
        return invalid("source batch is empty");
    }
    if src.iter().any(|s| s.targets.is_none()) {
        return invalid("source frames need targets");
    }
    if afa && tgt.is_empty() {
        return config("adaptation is enabled (w2 > 0) but the target batch is empty");
    }
    let tgt = if afa { tgt } else { &[] };
    let frames: Vec<(&Sample, DomainLabel)> = src
        .iter()
        .map(|s| (s, DomainLabel::Sim))
        .chain(tgt.iter().map(|s| (s, DomainLabel::Real)))
        .collect();
    let n_inter = frames.iter().map(|(s, _)| s.input.agents.len()).sum();
    let base = FrameWeights {
        det: hp.w1 / src.len() as f64,
        afa: if afa { hp.w2 } else { 0.0 },
        n_inter,
        n_ego: frames.len(),
        lambda: Some(hp.lambda),
    };
    let results = frames
        .par_iter()
        .map(|&(s, domain)| {
            let mut ctx = Ctx::new(&model.params);
            let w = if s.targets.is_some() && domain == DomainLabel::Sim { base } else { FrameWeights { det: 0.0, ..base } };
            let fl = frame_objective(&mut ctx, model, s, domain, &w)?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| ctx.value(v).item().as_f64());
            let (det, afa) = (value(fl.det), value(fl.afa));
            Ok(FrameResult { grads: ctx.param_grads(fl.total), det, afa })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: ParamGrads<T> = BTreeMap::new();
    let (mut l_det, mut l_afa) = (0.0, 0.0);
    for r in results {
        l_det += r.det;
        l_afa += r.afa;
        for (name, g) in r.grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let l_det = l_det / src.len() as f64;
    let total = total_loss(l_det, l_afa, hp.w1, hp.w2)?;
    let metrics = StepMetrics { l_det, l_afa: afa.then_some(l_afa), total, lr: hp.lr, lambda: hp.lambda };
    Ok((grads, metrics))
}

/// One optimizer step on the batch objective.
pub fn train_step<T: Scalar>(
    model: &mut S2rModel<T>,
    opt: &mut Adam<T>,
    src: &[Sample],
    tgt: &[Sample],
    hp: &StepParams,
) -> Result<StepMetrics> {
    let (grads, metrics) = batch_gradients(model, src, tgt, hp)?;
    if !metrics.total.is_finite() {
        return Err(Error::Generation(format!("non-finite loss {}", metrics.total)));
    }
    opt.step(&mut model.params, &grads, hp.lr)?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u32,
    pub metrics: StepMetrics,
}

/// Tab-separated log, one row per step; a disabled adaptation loss is `NA`.
pub fn log_tsv(rows: &[LogRow]) -> String {
    let mut s = String::from("step\tepoch\tl_det\tl_afa\tlr\tlambda\n");
    for r in rows {
        let m = &r.metrics;
        let afa = m.l_afa.map_or("NA".to_string(), |v| format!("{v:.9e}"));
        let _ = writeln!(s, "{}\t{}\t{:.9e}\t{afa}\t{:e}\t{:e}", r.step, r.epoch, m.l_det, m.lr, m.lambda);
    }
    s
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: Model32,
    pub log: Vec<LogRow>,
    /// Periodic checkpoints written during training.
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from in-memory frames. `source(epoch, i)` yields source frame `i`
/// for an epoch, which lets callers re-noise frames every epoch.
pub fn fit_with(
    cfg: &TrainConfig,
    n_source: usize,
    source: impl Fn(u32, usize) -> Result<Sample> + Sync,
    target: &[Sample],
    checkpoint_dir: Option<&Path>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if cfg.afa_enabled() && target.is_empty() {
        return config("adaptation is enabled (w2 > 0) but no target frames were given");
    }
    if n_source == 0 && cfg.epochs > 0 {
        return invalid("source dataset is empty");
    }
    let mut model = Model32::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let per_epoch = n_source.div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut log = Vec::with_capacity(total as usize);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_source).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, 0x5348), epoch as u64));
        let lr = cfg.lr(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let src = pool.install(|| chunk.par_iter().map(|&i| source(epoch, i)).collect::<Result<Vec<_>>>())?;
            let tgt: Vec<Sample> = if cfg.afa_enabled() {
                (0..cfg.target_batch_size)
                    .map(|j| target[(step as usize * cfg.target_batch_size + j) % target.len()].clone())
                    .collect()
            } else {
                Vec::new()
            };
            let hp = StepParams { w1: cfg.w1, w2: cfg.w2, lr, lambda: cfg.lambda(step, total) };
            let metrics = pool.install(|| train_step(&mut model, &mut opt, &src, &tgt, &hp))?;
            log.push(LogRow { step, epoch, metrics });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch{:04}.ckpt", epoch + 1));
                model.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(FitOutput { model, log, checkpoints })
}

/// Trains on dataset directories. Source frames get the configured pose-noise
/// augmentation, drawn afresh each epoch.
pub fn fit(
    cfg: &TrainConfig,
    source: &Dataset,
    target: Option<&Dataset>,
    checkpoint_dir: Option<&Path>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let target = match target {
        Some(t) if cfg.afa_enabled() => {
            t.records()?.iter().map(|r| Sample::unlabeled(r, &mcfg)).collect::<Result<Vec<_>>>()?
        }
        None if cfg.afa_enabled() => {
            return config("adaptation is enabled (w2 > 0) but no target dataset was given");
        }
        _ => Vec::new(),
    };
    let noise = cfg.augmentation()?;
    if noise == NoiseSpec::PERFECT {
        let clean = source.records()?.iter().map(|r| Sample::labeled(r, &mcfg)).collect::<Result<Vec<_>>>()?;
        fit_with(cfg, clean.len(), |_, i| Ok(clean[i].clone()), &target, checkpoint_dir)
    } else {
        let aug_seed = derive_seed(cfg.seed, 0x4155);
        let make = |epoch: u32, i: usize| {
            let mut rng = rng_from(derive_seed(aug_seed, epoch as u64), i as u64);
            Sample::labeled(&source.noisy_record(i, &noise, &mut rng)?, &mcfg)
        };
        fit_with(cfg, source.len(), make, &target, checkpoint_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afa::{DISC_EGO, DISC_INTER};
    use crate::dataset::render_record;
    use crate::gradcheck::{check_param_grads, DEFAULT_EPS};
    use crate::scenario::{generate_scenario, SceneConfig};
    use rand::Rng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            grid: BevGridSpec { range_x: 8.0, range_y: 8.0, cell: 1.0, channels: 4, downsample: 2 },
            attention: AttentionSpec { heads: 2, win_local: 2, win_global: 4, blocks: 1, ..AttentionSpec::default() },
            max_agents: 2,
            ..ModelConfig::default()
        }
    }

    fn micro_train(w2: f64) -> TrainConfig {
        let mut c = TrainConfig::with_model(&micro_config());
        c.w1 = 1.0 - w2;
        c.w2 = w2;
        c.lambda_warmup = 0.0;
        c
    }

    fn scene() -> SceneConfig {
        SceneConfig { vehicles: 8, agents: 2, frames: 4, ..SceneConfig::default() }
    }

    fn frames(cfg: &ModelConfig, seed: u64, n: usize, labeled: bool) -> Vec<Sample> {
        let sc = generate_scenario(&scene(), seed).unwrap();
        let r = [cfg.grid.range_x, cfg.grid.range_y];
        scene()
            .frame_times()
            .iter()
            .take(n)
            .map(|&t| {
                let rec = render_record(&sc, t, r).unwrap();
                if labeled {
                    Sample::labeled(&rec, cfg).unwrap()
                } else {
                    Sample::unlabeled(&rec, cfg).unwrap()
                }
            })
            .collect()
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(3.25, 7.0, 1.0, 0.0).unwrap(), 3.25);
        assert!((total_loss(1.0, 2.0, 0.9, 0.1).unwrap() - 1.1).abs() < 1e-15);
        assert!(matches!(total_loss(1.0, 2.0, 0.5, 0.4), Err(Error::Config(_))));
        assert!(matches!(total_loss(1.0, 2.0, 1.2, -0.2), Err(Error::Config(_))));
    }

    #[test]
    fn lr_schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.lr(0), 1e-3);
        assert_eq!(c.lr(5), 1e-3);
        assert!((c.lr(10) - 1e-4).abs() < 1e-18);
        assert!((c.lr(25) - 1e-5).abs() < 1e-19);
        assert!((c.lr(30) - 1e-6).abs() < 1e-20);
        assert!((c.lr(19) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn lambda_ramps_then_holds() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda(0, 100), 0.0);
        assert!((c.lambda(10, 100) - 0.05).abs() < 1e-15);
        assert_eq!(c.lambda(20, 100), 0.1);
        assert_eq!(c.lambda(99, 100), 0.1);
        let flat = TrainConfig { lambda_warmup: 0.0, ..TrainConfig::default() };
        assert_eq!(flat.lambda(0, 100), 0.1);
    }

    #[test]
    fn config_toml() {
        let c = TrainConfig::from_toml_str("epochs = 3\nw1 = 1.0\nw2 = 0.0\nchannels = 16\nheads = 4\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model_config().grid.channels, 16);
        assert_eq!(c.lr0, 1e-3);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        for bad in ["w1 = 0.5\nw2 = 0.4\n", "bogus = 1\n", "lr0 = 0.0\n", "heads = 3\n", "aug_sigma_pos = -1.0\n"] {
            assert!(matches!(TrainConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
        assert_eq!(TrainConfig::default().model_config(), ModelConfig::default());
    }

    #[test]
    fn adam_zero_lr_and_missing_grads() {
        let mut model = Model32::new(micro_config(), 1).unwrap();
        let before = model.params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.cls.b".to_string(), Tensor::full(&[1], 3.0f32));
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        opt.step(&mut model.params, &grads, 0.0).unwrap();
        assert_eq!(model.params, before);
        opt.step(&mut model.params, &grads, 0.1).unwrap();
        for (name, t) in model.params.iter() {
            if name == "head.cls.b" {
                assert!((t.data()[0] - (before.get(name).unwrap().data()[0] - 0.1)).abs() < 1e-5);
            } else {
                assert_eq!(t, before.get(name).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn afa_needs_target_batch() {
        let cfg = micro_config();
        let mut model = Model32::new(cfg.clone(), 1).unwrap();
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let src = frames(&cfg, 3, 1, true);
        let hp = StepParams { w1: 0.9, w2: 0.1, lr: 1e-3, lambda: 0.1 };
        assert!(matches!(train_step(&mut model, &mut opt, &src, &[], &hp), Err(Error::Config(_))));
        let hp = StepParams { w1: 1.0, w2: 0.0, ..hp };
        let m = train_step(&mut model, &mut opt, &src, &[], &hp).unwrap();
        assert!(m.l_afa.is_none());
        assert_eq!(m.total, m.l_det);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let cfg = micro_config();
        let model = S2rModel::<f64>::new(cfg.clone(), 5).unwrap();
        let mut model = model;
        // Nonzero discriminator outputs so the adaptation path carries gradient,
        // and biases moved off zero so empty cells do not sit on activation kinks.
        let mut rng = rng_from(5, 1);
        for (name, t) in model.params.iter_mut() {
            let disc_out = name == &format!("{DISC_INTER}.out.w") || name == &format!("{DISC_EGO}.out.w");
            if name.ends_with(".b") || disc_out {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        let src = frames(&cfg, 7, 1, true);
        let tgt = frames(&cfg, 8, 1, false);
        let hp = StepParams { w1: 0.9, w2: 0.1, lr: 0.0, lambda: 0.0 };
        let (grads, metrics) = batch_gradients(&model, &src, &tgt, &hp).unwrap();
        // The reference objective runs without reversal so every gradient is a true derivative.
        let n_inter = src[0].input.agents.len() + tgt[0].input.agents.len();
        let objective = |ctx: &mut Ctx<f64>| {
            let w = FrameWeights { det: 0.9, afa: 0.1, n_inter, n_ego: 2, lambda: None };
            let a = frame_objective(ctx, &model, &src[0], DomainLabel::Sim, &w)?.total;
            let b = frame_objective(ctx, &model, &tgt[0], DomainLabel::Real, &FrameWeights { det: 0.0, ..w })?.total;
            ctx.g.add(a, b)
        };
        let report = check_param_grads(&model.params, objective, DEFAULT_EPS, Some(3)).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
        let mut ctx = Ctx::new(&model.params);
        let v = objective(&mut ctx).unwrap();
        assert!((ctx.value(v).item() - metrics.total).abs() < 1e-9);
        // With lambda = 0 the backbone only sees the detection term; discriminator grads agree.
        let ref_grads = ctx.param_grads(v);
        for (name, g) in &grads {
            let r = &ref_grads[name];
            let scale = r.max_abs().max(1e-9);
            let err = g.zip_map(r, |a, b| a - b).max_abs();
            if name.starts_with("disc") || name.starts_with("head") {
                assert!(err / scale < 1e-9, "{name}");
            }
        }
    }

    #[test]
    fn overfit_fixed_batch() {
        let cfg = micro_config();
        let mut model = Model32::new(cfg.clone(), 11).unwrap();
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let src = frames(&cfg, 21, 4, true);
        let hp = StepParams { w1: 1.0, w2: 0.0, lr: 3e-3, lambda: 0.0 };
        let trace: Vec<f64> = (0..50).map(|_| train_step(&mut model, &mut opt, &src, &[], &hp).unwrap().l_det).collect();
        assert!(trace[49] <= 0.5 * trace[0], "{} -> {}", trace[0], trace[49]);
    }

    #[test]
    fn fit_is_deterministic_across_threads() {
        let mut c = micro_train(0.1);
        c.epochs = 2;
        c.batch_size = 2;
        c.target_batch_size = 2;
        let mcfg = c.model_config();
        let src = frames(&mcfg, 31, 4, true);
        let tgt = frames(&mcfg, 32, 3, false);
        let run = |threads| {
            let c = TrainConfig { threads, ..c.clone() };
            fit_with(&c, src.len(), |_, i| Ok(src[i].clone()), &tgt, None).unwrap()
        };
        let a = run(1);
        let b = run(1);
        let p = run(2);
        assert_eq!(a.log.len(), 4);
        assert_eq!(log_tsv(&a.log), log_tsv(&b.log));
        assert_eq!(log_tsv(&a.log), log_tsv(&p.log));
        assert_eq!(a.model.to_bytes(), p.model.to_bytes());
        assert!(a.log.iter().all(|r| r.metrics.l_afa.is_some()));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut c = micro_train(0.0);
        c.epochs = 0;
        c.seed = 4;
        let out = fit_with(&c, 0, |_, _| unreachable!(), &[], None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model, Model32::new(c.model_config(), 4).unwrap());
        let c = TrainConfig { w1: 0.9, w2: 0.1, ..c };
        assert!(matches!(fit_with(&c, 0, |_, _| unreachable!(), &[], None), Err(Error::Config(_))));
    }

    #[test]
    fn log_format() {
        let m = StepMetrics { l_det: 1.5, l_afa: None, total: 1.5, lr: 1e-3, lambda: 0.0 };
        let rows = [LogRow { step: 0, epoch: 0, metrics: m }, LogRow { step: 1, epoch: 0, metrics: StepMetrics { l_afa: Some(0.5), ..m } }];
        let s = log_tsv(&rows);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "step\tepoch\tl_det\tl_afa\tlr\tlambda");
        assert_eq!(lines[1].split('\t').nth(3), Some("NA"));
        assert_eq!(lines[2].split('\t').count(), 6);
        assert_eq!(lines[2].split('\t').nth(4), Some("1e-3"));
    }

    /// With reversal, one descent step on the discriminators lowers the domain
    /// loss while the same step on the backbone raises it.
    #[test]
    fn adversarial_signs() {
        let cfg = micro_config();
        let mut model = S2rModel::<f64>::new(cfg.clone(), 9).unwrap();
        let src = frames(&cfg, 41, 2, true);
        let tgt = frames(&cfg, 42, 2, false);
        let hp = StepParams { w1: 0.0, w2: 1.0, lr: 0.0, lambda: 1.0 };
        let domain_loss = |m: &S2rModel<f64>| batch_gradients(m, &src, &tgt, &hp).unwrap().1.l_afa.unwrap();
        let lr = 1e-3;
        let sgd = |m: &S2rModel<f64>, grads: &ParamGrads<f64>, disc: bool| {
            let mut out = m.clone();
            for (name, g) in grads {
                if name.starts_with("disc") == disc {
                    let p = out.params.get_mut(name).unwrap();
                    *p = p.zip_map(g, |p, g| p - lr * g);
                }
            }
            out
        };
        for step in 0..11 {
            let (grads, m) = batch_gradients(&model, &src, &tgt, &hp).unwrap();
            let d_disc = domain_loss(&sgd(&model, &grads, true)) - m.l_afa.unwrap();
            let d_back = domain_loss(&sgd(&model, &grads, false)) - m.l_afa.unwrap();
            assert!(d_disc < 0.0, "step {step}: discriminator step changed loss by {d_disc}");
            if step > 0 {
                assert!(d_back > 0.0, "step {step}: backbone step changed loss by {d_back}");
            }
            model = sgd(&sgd(&model, &grads, true), &grads, false);
        }
    }
}
