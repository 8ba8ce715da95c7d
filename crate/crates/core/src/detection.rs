//! Anchor-free single-class BEV head: targets, losses, decoding and rotated NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evalkit::bev_iou;
use crate::geometry::normalize_angle;
use crate::graph::{sigmoid, Var};
use crate::params::{Ctx, Init, ParamStore};
use crate::pillars::FeatureGrid;
use crate::{Scalar, Tensor};

/// Regression channels: dx, dy, z, log l, log w, log h, sin yaw, cos yaw.
pub const REG_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D<T = f64> {
    pub center: [T; 3],
    /// Length, width, height.
    pub size: [T; 3],
    pub yaw: T,
}

impl<T: Scalar> Box3D<T> {
    /// Builds a box with yaw wrapped into (-pi, pi].
    pub fn new(center: [T; 3], size: [T; 3], yaw: T) -> Self {
        Self { center, size, yaw: T::lit(normalize_angle(yaw.as_f64())) }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(&self.size).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite {
            return invalid("box has non-finite fields");
        }
        if self.size.iter().any(|&s| s <= T::zero()) {
            return invalid(format!("box sizes must be positive, got {:?}", self.size));
        }
        Ok(())
    }

    /// Footprint corners, counter-clockwise, starting front-left.
    pub fn corners_bev(&self) -> [[T; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] * T::lit(0.5), self.size[1] * T::lit(0.5));
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(u, v)| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    pub fn contains_bev(&self, x: T, y: T) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.size[0] * T::lit(0.5) && v.abs() <= self.size[1] * T::lit(0.5)
    }

    pub fn area_bev(&self) -> T {
        self.size[0] * self.size[1]
    }

    pub fn cast<U: Scalar>(&self) -> Box3D<U> {
        Box3D {
            center: self.center.map(|v| U::lit(v.as_f64())),
            size: self.size.map(|v| U::lit(v.as_f64())),
            yaw: U::lit(self.yaw.as_f64()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D<f64>,
    pub score: f64,
}

/// Registers the two 1x1 branches. The class bias starts at a 1% prior.
pub fn init_head<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) {
    store.init(format!("{prefix}.cls.w"), &[channels, 1], Init::FanIn(0.1), rng);
    store.init(format!("{prefix}.cls.b"), &[1], Init::Const(-(99f64.ln())), rng);
    store.init(format!("{prefix}.reg.w"), &[channels, REG_CHANNELS], Init::FanIn(0.1), rng);
    store.init(format!("{prefix}.reg.b"), &[REG_CHANNELS], Init::Zeros, rng);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[H, W, 1]` logits.
    pub cls: Var,
    /// `[H, W, 8]` regressions.
    pub reg: Var,
}

pub fn head_forward<T: Scalar>(ctx: &mut Ctx<T>, fused: Var, prefix: &str) -> Result<HeadOutput> {
    let (cw, cb) = (ctx.param(&format!("{prefix}.cls.w"))?, ctx.param(&format!("{prefix}.cls.b"))?);
    let (rw, rb) = (ctx.param(&format!("{prefix}.reg.w"))?, ctx.param(&format!("{prefix}.reg.b"))?);
    let cls = ctx.g.linear(fused, cw, Some(cb))?;
    let reg = ctx.g.linear(fused, rw, Some(rb))?;
    Ok(HeadOutput { cls, reg })
}

/// Dense per-cell training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub h: usize,
    pub w: usize,
    pub cls: Vec<bool>,
    /// `[H, W, 8]`, zero on negative cells.
    pub reg: Tensor<f64>,
    /// Index of the box owning each positive cell.
    pub owner: Vec<Option<usize>>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.cls.iter().filter(|&&p| p).count()
    }
}

fn encode_box(b: &Box3D<f64>, grid: &FeatureGrid, i: usize, j: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = grid.cell_center(i, j);
    [
        (b.center[0] - cx) / grid.cell,
        (b.center[1] - cy) / grid.cell,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

fn decode_cell(r: [f64; REG_CHANNELS], grid: &FeatureGrid, i: usize, j: usize) -> Box3D<f64> {
    let (cx, cy) = grid.cell_center(i, j);
    Box3D::new(
        [cx + r[0] * grid.cell, cy + r[1] * grid.cell, r[2]],
        [r[3].exp(), r[4].exp(), r[5].exp()],
        r[6].atan2(r[7]),
    )
}

/// The cell holding each box center becomes positive. When centers share a
/// cell the larger footprint wins, the earlier box on ties. Boxes outside
/// the grid are ignored.
pub fn assign_targets(gt: &[Box3D<f64>], grid: &FeatureGrid) -> Targets {
    let n = grid.h * grid.w;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (bi, b) in gt.iter().enumerate() {
        let Some((i, j)) = grid.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        let cell = i * grid.w + j;
        match owner[cell] {
            Some(prev) if gt[prev].area_bev() >= b.area_bev() => {}
            _ => owner[cell] = Some(bi),
        }
    }
    let mut reg = Tensor::zeros(&[grid.h, grid.w, REG_CHANNELS]);
    for (cell, o) in owner.iter().enumerate() {
        if let Some(bi) = o {
            let t = encode_box(&gt[*bi], grid, cell / grid.w, cell % grid.w);
            reg.data_mut()[cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS].copy_from_slice(&t);
        }
    }
    Targets { h: grid.h, w: grid.w, cls: owner.iter().map(Option::is_some).collect(), reg, owner }
}

/// Mean focal loss over cells on probabilities clamped to `[1e-6, 1 - 1e-6]`.
pub fn focal_loss(p: &[f64], y: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    if p.len() != y.len() {
        return invalid("focal_loss: length mismatch");
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            let (pt, at) = if y { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / p.len() as f64)
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    crate::graph::smooth_l1(x, beta)
}

/// Smooth L1 summed over positive cells' channels, divided by the positive count.
pub fn regression_loss(pred: &Tensor<f64>, targets: &Targets, beta: f64) -> Result<f64> {
    if pred.shape() != targets.reg.shape() {
        return invalid("regression_loss: shape mismatch");
    }
    let mut total = 0.0;
    for (cell, &pos) in targets.cls.iter().enumerate() {
        if pos {
            let r = cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS;
            total += pred.data()[r.clone()]
                .iter()
                .zip(&targets.reg.data()[r])
                .map(|(&a, &b)| smooth_l1(a - b, beta))
                .sum::<f64>();
        }
    }
    Ok(total / targets.num_positive().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Weight of the regression term.
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0, beta: 1.0, reg_weight: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetLoss {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

/// Focal classification and smooth L1 regression, both divided by the
/// number of positive cells (at least one).
pub fn detection_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    head: HeadOutput,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<DetLoss> {
    let norm = T::lit(1.0 / targets.num_positive().max(1) as f64);
    let focal = ctx.g.focal_with_logits(head.cls, &targets.cls, T::lit(cfg.alpha), T::lit(cfg.gamma))?;
    let cls = ctx.g.scale(focal, norm);
    let weight: Vec<T> = targets
        .cls
        .iter()
        .flat_map(|&p| std::iter::repeat(if p { T::one() } else { T::zero() }).take(REG_CHANNELS))
        .collect();
    let weight = Tensor::from_vec(targets.reg.shape(), weight)?;
    let sl1 = ctx.g.smooth_l1(head.reg, targets.reg.cast(), weight, T::lit(cfg.beta))?;
    let reg = ctx.g.scale(sl1, norm);
    let reg_w = ctx.g.scale(reg, T::lit(cfg.reg_weight));
    let total = ctx.g.add(cls, reg_w)?;
    Ok(DetLoss { cls, reg, total })
}

/// Emits one box per cell whose score exceeds `score_thresh`, in cell order.
pub fn decode<T: Scalar>(
    cls: &Tensor<T>,
    reg: &Tensor<T>,
    grid: &FeatureGrid,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    let n = grid.h * grid.w;
    if cls.len() != n || reg.len() != n * REG_CHANNELS {
        return invalid(format!(
            "decode: expected {}x{} cells, got cls {:?} reg {:?}",
            grid.h,
            grid.w,
            cls.shape(),
            reg.shape()
        ));
    }
    let mut out = Vec::new();
    for cell in 0..n {
        let score = sigmoid(cls.data()[cell].as_f64());
        if score > score_thresh {
            let mut r = [0.0; REG_CHANNELS];
            for (k, v) in r.iter_mut().enumerate() {
                *v = reg.data()[cell * REG_CHANNELS + k].as_f64();
            }
            let bbox = decode_cell(r, grid, cell / grid.w, cell % grid.w);
            if bbox.validate().is_ok() {
                out.push(Detection { bbox, score });
            }
        }
    }
    Ok(out)
}

/// Greedy rotated NMS by descending score; equal scores keep input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| bev_iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}
