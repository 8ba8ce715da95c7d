//! Uncertainty-gated fusion transformer over stacked agent feature maps.
//!
//! A block normalizes the stack, runs local and global windowed attention on
//! two channel halves followed by full self-attention, gates the ego block with
//! an uncertainty map predicted from the other agents, and finishes with an MLP.
//! Both sub-layers are residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamStore};
use crate::pillars::StackedFeatureMap;
use crate::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSpec {
    /// Total heads across both window branches.
    pub heads: usize,
    /// Window-type groups; must be 2 (local and global).
    pub groups: usize,
    pub win_local: usize,
    pub win_global: usize,
    pub blocks: usize,
    /// Uncertainty gating of the ego block; off for ablations.
    pub uam: bool,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self { heads: 8, groups: 2, win_local: 4, win_global: 8, blocks: 2, uam: true }
    }
}

impl AttentionSpec {
    /// Checks the spec against a stacked channel count `d = k * C`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.groups != 2 {
            return config(format!("window-type groups must be 2 (local, global), got {}", self.groups));
        }
        if self.heads == 0 || self.heads % self.groups != 0 {
            return config(format!("{} heads not divisible by {} groups", self.heads, self.groups));
        }
        if self.win_local == 0 || self.win_local >= self.win_global {
            return config(format!(
                "local window {} must be positive and smaller than global window {}",
                self.win_local, self.win_global
            ));
        }
        if d == 0 || d % self.heads != 0 || d % self.groups != 0 {
            return config(format!("{d} channels not divisible by {} heads", self.heads));
        }
        if (d / self.groups) % (self.heads / self.groups) != 0 {
            return config(format!(
                "branch width {} not divisible by {} branch heads",
                d / self.groups,
                self.heads / self.groups
            ));
        }
        Ok(())
    }
}

/// Windows of a `[H, W, D]` grid zero-padded to multiples of the window size.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows<T> {
    pub h: usize,
    pub w: usize,
    pub ws: usize,
    /// `[num_windows, ws * ws, D]`, windows row-major over the padded grid.
    pub data: Tensor<T>,
}

impl<T: Scalar> Windows<T> {
    pub fn count(&self) -> usize {
        self.data.shape()[0]
    }
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, ws: usize) -> Result<Windows<T>> {
    if ws == 0 {
        return invalid("window size must be at least 1");
    }
    let &[h, w, d] = x.shape() else {
        return invalid(format!("window_partition expects [H, W, D], got {:?}", x.shape()));
    };
    let (nh, nw) = (h.div_ceil(ws), w.div_ceil(ws));
    let mut out = vec![T::zero(); nh * nw * ws * ws * d];
    for i in 0..h {
        for j in 0..w {
            let win = (i / ws) * nw + j / ws;
            let pos = (i % ws) * ws + j % ws;
            let dst = (win * ws * ws + pos) * d;
            let src = (i * w + j) * d;
            out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
        }
    }
    Ok(Windows { h, w, ws, data: Tensor::from_vec(&[nh * nw, ws * ws, d], out)? })
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_merge<T: Scalar>(win: &Windows<T>) -> Result<Tensor<T>> {
    let (h, w, ws) = (win.h, win.w, win.ws);
    let nw = w.div_ceil(ws);
    let d = win.data.last_dim();
    if win.data.shape() != [h.div_ceil(ws) * nw, ws * ws, d] {
        return invalid("window_merge: window tensor does not match recorded grid");
    }
    let mut out = vec![T::zero(); h * w * d];
    for i in 0..h {
        for j in 0..w {
            let src = (((i / ws) * nw + j / ws) * ws * ws + (i % ws) * ws + j % ws) * d;
            let dst = (i * w + j) * d;
            out[dst..dst + d].copy_from_slice(&win.data.data()[src..src + d]);
        }
    }
    Tensor::from_vec(&[h, w, d], out)
}

/// Row-major token indices of each `ws x ws` window over an `h x w` grid.
/// Padding cells are left out, which masks them from attention.
pub fn window_groups(h: usize, w: usize, ws: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    for wi in 0..h.div_ceil(ws) {
        for wj in 0..w.div_ceil(ws) {
            let mut g = Vec::with_capacity(ws * ws);
            for i in wi * ws..((wi + 1) * ws).min(h) {
                for j in wj * ws..((wj + 1) * ws).min(w) {
                    g.push(i * w + j);
                }
            }
            groups.push(g);
        }
    }
    groups
}

fn init_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
    store.init(format!("{name}.w"), &[din, dout], Init::FanIn(1.0), rng);
    store.init(format!("{name}.b"), &[dout], Init::Zeros, rng);
}

fn linear<T: Scalar>(ctx: &mut Ctx<T>, x: Var, name: &str) -> Result<Var> {
    let w = ctx.param(&format!("{name}.w"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    ctx.g.linear(x, w, Some(b))
}

/// Self-attention of `x [H, W, d]` with a fused qkv projection named `name`.
fn grouped_attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: Var,
    name: &str,
    groups: Vec<Vec<usize>>,
    heads: usize,
) -> Result<Var> {
    let d = ctx.g.shape(x).last().copied().unwrap_or(0);
    let qkv = linear(ctx, x, &format!("{name}.qkv"))?;
    let q = ctx.g.slice_last(qkv, 0, d)?;
    let k = ctx.g.slice_last(qkv, d, 2 * d)?;
    let v = ctx.g.slice_last(qkv, 2 * d, 3 * d)?;
    ctx.g.attention(q, k, v, groups, heads)
}

pub fn init_lg_msa<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) {
    let half = d / 2;
    init_linear(store, &format!("{prefix}.msa_l.qkv"), half, 3 * half, rng);
    init_linear(store, &format!("{prefix}.msa_g.qkv"), half, 3 * half, rng);
    init_linear(store, &format!("{prefix}.sa.qkv"), d, 3 * d, rng);
    init_linear(store, &format!("{prefix}.sa.proj"), d, d, rng);
}

/// Local-window heads on the first channel half, global-window heads on the
/// second, concatenated and passed through full self-attention.
pub fn lg_msa<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: &StackedFeatureMap,
    spec: &AttentionSpec,
    prefix: &str,
) -> Result<StackedFeatureMap> {
    let d = x.channels();
    spec.validate(d)?;
    let (h, w) = (x.h, x.w);
    let half = d / spec.groups;
    let branch_heads = spec.heads / spec.groups;
    let xl = ctx.g.slice_last(x.var, 0, half)?;
    let xg = ctx.g.slice_last(x.var, half, d)?;
    let yl = grouped_attention(ctx, xl, &format!("{prefix}.msa_l"), window_groups(h, w, spec.win_local), branch_heads)?;
    let yg = grouped_attention(ctx, xg, &format!("{prefix}.msa_g"), window_groups(h, w, spec.win_global), branch_heads)?;
    let y = ctx.g.concat_last(&[yl, yg])?;
    let all = vec![(0..h * w).collect::<Vec<_>>()];
    let s = grouped_attention(ctx, y, &format!("{prefix}.sa"), all, spec.heads)?;
    let out = linear(ctx, s, &format!("{prefix}.sa.proj"))?;
    Ok(x.with_var(out))
}

/// Registers the uncertainty network for `k` agents of `c` channels each.
pub fn init_upn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, k: usize, rng: &mut impl Rng) {
    let din = (k - 1) * c;
    let he = Init::FanIn(2f64.sqrt());
    store.init(format!("{prefix}.e1.w"), &[3, 3, din, c], he, rng);
    store.init(format!("{prefix}.e1.b"), &[c], Init::Zeros, rng);
    store.init(format!("{prefix}.e2.w"), &[3, 3, c, 2 * c], he, rng);
    store.init(format!("{prefix}.e2.b"), &[2 * c], Init::Zeros, rng);
    store.init(format!("{prefix}.d1.w"), &[3, 3, 2 * c, c], he, rng);
    store.init(format!("{prefix}.d1.b"), &[c], Init::Zeros, rng);
    store.init(format!("{prefix}.d2.w"), &[3, 3, c, din], Init::FanIn(0.5), rng);
    store.init(format!("{prefix}.d2.b"), &[din], Init::Zeros, rng);
}

/// Two stride-2 encoder stages, a mirrored nearest-upsampling decoder with a
/// skip connection, and a sigmoid. Output has the input's shape.
pub fn upn<T: Scalar>(ctx: &mut Ctx<T>, others: Var, prefix: &str) -> Result<Var> {
    let shape = ctx.g.shape(others).to_vec();
    let &[h, w, _] = shape.as_slice() else {
        return invalid(format!("upn expects [H, W, D], got {shape:?}"));
    };
    let conv = |ctx: &mut Ctx<T>, x: Var, name: &str, stride: usize| -> Result<Var> {
        let wt = ctx.param(&format!("{prefix}.{name}.w"))?;
        let b = ctx.param(&format!("{prefix}.{name}.b"))?;
        ctx.g.conv2d(x, wt, b, stride, 1)
    };
    let e1 = conv(ctx, others, "e1", 2)?;
    let e1 = ctx.g.relu(e1);
    let e2 = conv(ctx, e1, "e2", 2)?;
    let e2 = ctx.g.relu(e2);
    let (h1, w1) = (ctx.g.shape(e1)[0], ctx.g.shape(e1)[1]);
    let u1 = ctx.g.upsample_nearest(e2, h1, w1)?;
    let d1 = conv(ctx, u1, "d1", 1)?;
    let d1 = ctx.g.relu(d1);
    let d1 = ctx.g.add(d1, e1)?;
    let u2 = ctx.g.upsample_nearest(d1, h, w)?;
    let d2 = conv(ctx, u2, "d2", 1)?;
    Ok(ctx.g.sigmoid(d2))
}

/// Entries at or above the median become exactly 1; the rest pass through.
pub fn median_threshold<T: Scalar>(ctx: &mut Ctx<T>, m: Var) -> Var {
    ctx.g.median_gate(m)
}

/// Intermediate tensors of the uncertainty-aware module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UamOutput {
    pub out: StackedFeatureMap,
    /// Raw uncertainty, `None` for a single agent.
    pub m: Option<Var>,
    pub m_t: Option<Var>,
}

/// Gates the ego block with the thresholded uncertainty of the other agents.
/// With more than one other agent the per-agent gate blocks are multiplied.
pub fn uam<T: Scalar>(ctx: &mut Ctx<T>, x: &StackedFeatureMap, prefix: &str) -> Result<UamOutput> {
    if x.k == 1 {
        return Ok(UamOutput { out: *x, m: None, m_t: None });
    }
    let (c, d) = (x.c, x.channels());
    let ego = ctx.g.slice_last(x.var, 0, c)?;
    let others = ctx.g.slice_last(x.var, c, d)?;
    let m = upn(ctx, others, &format!("{prefix}.upn"))?;
    let m_t = median_threshold(ctx, m);
    let mut gate = ctx.g.slice_last(m_t, 0, c)?;
    for a in 1..x.k - 1 {
        let block = ctx.g.slice_last(m_t, a * c, (a + 1) * c)?;
        gate = ctx.g.mul(gate, block)?;
    }
    let enhanced = ctx.g.mul(gate, ego)?;
    let out = ctx.g.concat_last(&[enhanced, others])?;
    Ok(UamOutput { out: x.with_var(out), m: Some(m), m_t: Some(m_t) })
}

pub fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &AttentionSpec,
    c: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let d = c * k;
    for ln in ["ln1", "ln2"] {
        store.init(format!("{prefix}.{ln}.g"), &[d], Init::Ones, rng);
        store.init(format!("{prefix}.{ln}.b"), &[d], Init::Zeros, rng);
    }
    init_lg_msa(store, prefix, d, rng);
    if k > 1 && spec.uam {
        init_upn(store, &format!("{prefix}.upn"), c, k, rng);
    }
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, 2 * d, rng);
    store.init(format!("{prefix}.mlp.fc2.w"), &[2 * d, d], Init::FanIn(0.5), rng);
    store.init(format!("{prefix}.mlp.fc2.b"), &[d], Init::Zeros, rng);
}

fn layer_norm<T: Scalar>(ctx: &mut Ctx<T>, x: Var, name: &str) -> Result<Var> {
    let g = ctx.param(&format!("{name}.g"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    ctx.g.layer_norm(x, g, b, T::lit(LN_EPS))
}

/// One pre-norm residual block: attention with uncertainty gating, then MLP.
pub fn s2r_block<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: &StackedFeatureMap,
    spec: &AttentionSpec,
    prefix: &str,
) -> Result<StackedFeatureMap> {
    let n1 = layer_norm(ctx, x.var, &format!("{prefix}.ln1"))?;
    let p = lg_msa(ctx, &x.with_var(n1), spec, prefix)?;
    let gated = if spec.uam { uam(ctx, &p, prefix)?.out } else { p };
    let fh = ctx.g.add(gated.var, x.var)?;
    let n2 = layer_norm(ctx, fh, &format!("{prefix}.ln2"))?;
    let hdn = linear(ctx, n2, &format!("{prefix}.mlp.fc1"))?;
    let hdn = ctx.g.gelu(hdn);
    let mlp = linear(ctx, hdn, &format!("{prefix}.mlp.fc2"))?;
    let out = ctx.g.add(mlp, fh)?;
    Ok(x.with_var(out))
}

/// Applies `spec.blocks` blocks named `{prefix}.block{i}`.
pub fn s2r_uvit<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: &StackedFeatureMap,
    spec: &AttentionSpec,
    prefix: &str,
) -> Result<StackedFeatureMap> {
    let mut cur = *x;
    for b in 0..spec.blocks {
        cur = s2r_block(ctx, &cur, spec, &format!("{prefix}.block{b}"))?;
    }
    Ok(cur)
}

/// Projection `kC -> C`, initialized to pass the ego block through.
pub fn init_fuse<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, k: usize, rng: &mut impl Rng) {
    store.init(format!("{prefix}.w"), &[k * c, c], Init::Identity, rng);
    store.init(format!("{prefix}.b"), &[c], Init::Zeros, rng);
}

pub fn fuse<T: Scalar>(ctx: &mut Ctx<T>, x: &StackedFeatureMap, prefix: &str) -> Result<Var> {
    linear(ctx, x.var, prefix)
}
