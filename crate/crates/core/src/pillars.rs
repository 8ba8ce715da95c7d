//! Point cloud to bird's-eye-view features: per-pillar statistics, a per-cell
//! linear embedding scattered onto the grid, and strided downsampling convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamStore};
use crate::Scalar;

/// Inputs per nonempty pillar fed to the embedding layer.
pub const PILLAR_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    /// Half extent along x: the grid covers `[-range_x, range_x)`.
    pub range_x: f64,
    /// Half extent along y.
    pub range_y: f64,
    /// Pillar edge length, meters.
    pub cell: f64,
    /// Feature channels per agent.
    pub channels: usize,
    /// Spatial reduction from pillars to feature cells; a power of two.
    pub downsample: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { range_x: 40.0, range_y: 20.0, cell: 0.5, channels: 64, downsample: 4 }
    }
}

/// Feature-cell geometry after downsampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGrid {
    pub range: [f64; 2],
    /// Feature cell edge, meters.
    pub cell: f64,
    pub h: usize,
    pub w: usize,
}

impl FeatureGrid {
    /// Cell `(i, j)` containing ego-frame `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x + self.range[0]) / self.cell).floor();
        let fj = ((y + self.range[1]) / self.cell).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.h as f64 || fj >= self.w as f64 {
            return None;
        }
        if x >= self.range[0] || y >= self.range[1] {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            -self.range[0] + (i as f64 + 0.5) * self.cell,
            -self.range[1] + (j as f64 + 0.5) * self.cell,
        )
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_x > 0.0 && self.range_y > 0.0 && self.cell > 0.0) {
            return invalid("grid ranges and cell size must be positive");
        }
        if self.channels == 0 {
            return invalid("grid needs at least one channel");
        }
        if !self.downsample.is_power_of_two() {
            return invalid(format!("downsample {} is not a power of two", self.downsample));
        }
        Ok(())
    }

    /// Pillar grid size `(H0, W0)`.
    pub fn pillar_dims(&self) -> (usize, usize) {
        (
            (2.0 * self.range_x / self.cell).round() as usize,
            (2.0 * self.range_y / self.cell).round() as usize,
        )
    }

    /// Feature map size `(H, W)` after downsampling.
    pub fn feature_dims(&self) -> (usize, usize) {
        let (h0, w0) = self.pillar_dims();
        (h0.div_ceil(self.downsample), w0.div_ceil(self.downsample))
    }

    pub fn feature_grid(&self) -> FeatureGrid {
        let (h, w) = self.feature_dims();
        FeatureGrid {
            range: [self.range_x, self.range_y],
            cell: self.cell * self.downsample as f64,
            h,
            w,
        }
    }

    fn down_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Statistics of one nonempty pillar.
#[derive(Clone, Debug, PartialEq)]
pub struct Pillar {
    /// Row-major pillar index `i * W0 + j`.
    pub index: usize,
    pub count: usize,
    /// Mean `[x, y, z, intensity]`.
    pub mean: [f64; 4],
    pub max_z: f64,
    /// Mean offset of the points from the pillar center.
    pub offset: [f64; 2],
}

/// Sparse pillar statistics; absent pillars are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarStats {
    pub h: usize,
    pub w: usize,
    /// Nonempty pillars in increasing index order.
    pub pillars: Vec<Pillar>,
}

impl PillarStats {
    /// Dense `[H0, W0, 8]` view: count, mean x/y/z/i, max z, offsets.
    pub fn dense(&self) -> Vec<[f64; 8]> {
        let mut out = vec![[0.0; 8]; self.h * self.w];
        for p in &self.pillars {
            out[p.index] = [
                p.count as f64,
                p.mean[0],
                p.mean[1],
                p.mean[2],
                p.mean[3],
                p.max_z,
                p.offset[0],
                p.offset[1],
            ];
        }
        out
    }
}

/// Groups ego-frame points into pillars. Points outside the grid are dropped.
/// Points are ordered within each pillar before accumulation, which makes the
/// result exactly independent of input order.
pub fn pillarize<T: Scalar>(points: &[[T; 4]], grid: &BevGridSpec) -> PillarStats {
    let (h, w) = grid.pillar_dims();
    let mut binned: Vec<(usize, [f64; 4])> = Vec::with_capacity(points.len());
    for p in points {
        let q = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), p[3].as_f64()];
        if !q.iter().all(|v| v.is_finite()) {
            continue;
        }
        if q[0] < -grid.range_x || q[0] >= grid.range_x || q[1] < -grid.range_y || q[1] >= grid.range_y {
            continue;
        }
        let i = (((q[0] + grid.range_x) / grid.cell).floor() as usize).min(h - 1);
        let j = (((q[1] + grid.range_y) / grid.cell).floor() as usize).min(w - 1);
        binned.push((i * w + j, q));
    }
    binned.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let ka = a.1.map(f64::to_bits);
            let kb = b.1.map(f64::to_bits);
            ka.cmp(&kb)
        })
    });

    let mut pillars = Vec::new();
    let mut start = 0;
    while start < binned.len() {
        let idx = binned[start].0;
        let mut end = start;
        let mut sum = [0.0; 4];
        let mut max_z = f64::NEG_INFINITY;
        while end < binned.len() && binned[end].0 == idx {
            let q = binned[end].1;
            for k in 0..4 {
                sum[k] += q[k];
            }
            max_z = max_z.max(q[2]);
            end += 1;
        }
        let n = (end - start) as f64;
        let mean = sum.map(|s| s / n);
        let (i, j) = (idx / w, idx % w);
        let cx = -grid.range_x + (i as f64 + 0.5) * grid.cell;
        let cy = -grid.range_y + (j as f64 + 0.5) * grid.cell;
        pillars.push(Pillar {
            index: idx,
            count: end - start,
            mean,
            max_z,
            offset: [mean[0] - cx, mean[1] - cy],
        });
        start = end;
    }
    PillarStats { h, w, pillars }
}

/// Per-pillar encoder input. Zero statistics map to a zero vector.
fn pillar_features(p: &Pillar, grid: &BevGridSpec) -> [f64; PILLAR_FEATURES] {
    [
        (p.count as f64).ln_1p(),
        p.mean[0] / grid.range_x,
        p.mean[1] / grid.range_y,
        p.mean[2],
        p.mean[3],
        p.max_z,
        p.offset[0] / grid.cell,
        p.offset[1] / grid.cell,
    ]
}

/// Registers encoder parameters under `prefix`.
pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, grid: &BevGridSpec, rng: &mut impl Rng) {
    let c = grid.channels;
    store.init(format!("{prefix}.pfn.w"), &[PILLAR_FEATURES, c], Init::FanIn(2f64.sqrt()), rng);
    store.init(format!("{prefix}.pfn.b"), &[c], Init::Zeros, rng);
    for s in 0..grid.down_stages() {
        store.init(format!("{prefix}.down{s}.w"), &[3, 3, c, c], Init::FanIn(2f64.sqrt()), rng);
        store.init(format!("{prefix}.down{s}.b"), &[c], Init::Zeros, rng);
    }
}

/// One agent's `[H, W, C]` feature map in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// All agents' maps concatenated along channels, ego block first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackedFeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
}

impl StackedFeatureMap {
    pub fn channels(&self) -> usize {
        self.c * self.k
    }

    pub fn with_var(&self, var: Var) -> Self {
        Self { var, ..*self }
    }
}

/// Embeds nonempty pillars, scatters them to the pillar grid and downsamples.
pub fn encode<T: Scalar>(
    ctx: &mut Ctx<T>,
    stats: &PillarStats,
    grid: &BevGridSpec,
    prefix: &str,
) -> Result<FeatureMap> {
    let (h0, w0) = grid.pillar_dims();
    if stats.h != h0 || stats.w != w0 {
        return invalid(format!(
            "pillar stats {}x{} do not match grid {h0}x{w0}",
            stats.h, stats.w
        ));
    }
    let c = grid.channels;
    let n = stats.pillars.len();
    let mut feats = Vec::with_capacity(n * PILLAR_FEATURES);
    for p in &stats.pillars {
        feats.extend(pillar_features(p, grid).iter().map(|&v| T::lit(v)));
    }
    let x = ctx.input(crate::Tensor::from_vec(&[n, PILLAR_FEATURES], feats)?);
    let (w, b) = (ctx.param(&format!("{prefix}.pfn.w"))?, ctx.param(&format!("{prefix}.pfn.b"))?);
    let emb = ctx.g.linear(x, w, Some(b))?;
    let emb = ctx.g.relu(emb);
    let cells = stats.pillars.iter().map(|p| p.index).collect();
    let mut map = ctx.g.scatter_cells(emb, cells, h0, w0)?;
    for s in 0..grid.down_stages() {
        let w = ctx.param(&format!("{prefix}.down{s}.w"))?;
        let b = ctx.param(&format!("{prefix}.down{s}.b"))?;
        let y = ctx.g.conv2d(map, w, b, 2, 1)?;
        map = ctx.g.relu(y);
    }
    let (h, wd) = grid.feature_dims();
    debug_assert_eq!(ctx.value(map).shape(), &[h, wd, c]);
    Ok(FeatureMap { var: map, h, w: wd, c })
}

/// Concatenates agent maps along channels in the given order (ego first).
pub fn stack_agents<T: Scalar>(ctx: &mut Ctx<T>, maps: &[FeatureMap]) -> Result<StackedFeatureMap> {
    let Some(first) = maps.first() else {
        return invalid("stack_agents needs at least the ego map");
    };
    if maps.iter().any(|m| (m.h, m.w, m.c) != (first.h, first.w, first.c)) {
        return invalid("agent feature maps differ in shape");
    }
    let var = if maps.len() == 1 {
        first.var
    } else {
        let vars: Vec<Var> = maps.iter().map(|m| m.var).collect();
        ctx.g.concat_last(&vars)?
    };
    Ok(StackedFeatureMap { var, h: first.h, w: first.w, c: first.c, k: maps.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, DEFAULT_EPS};
    use crate::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid8() -> BevGridSpec {
        // 32x32 pillars, downsample 4 -> 8x8 features
        BevGridSpec { range_x: 8.0, range_y: 8.0, cell: 0.5, channels: 8, downsample: 4 }
    }

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-9.0..9.0),
                    rng.gen_range(-9.0..9.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn empty_cloud_gives_zero_stats() {
        let s = pillarize::<f64>(&[], &grid8());
        assert!(s.pillars.is_empty());
        assert!(s.dense().iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_point_single_pillar() {
        let p = [1.3, -2.2, 0.7, 0.4];
        let s = pillarize(&[p], &grid8());
        assert_eq!(s.pillars.len(), 1);
        assert_eq!(s.pillars[0].count, 1);
        assert_eq!(s.pillars[0].mean, p);
        assert_eq!(s.pillars[0].max_z, 0.7);
    }

    #[test]
    fn two_points_mean_and_max() {
        let s = pillarize(&[[0.1, 0.1, 1.0, 0.0], [0.2, 0.3, 3.0, 0.0]], &grid8());
        assert_eq!(s.pillars.len(), 1);
        assert_eq!(s.pillars[0].mean[2], 2.0);
        assert_eq!(s.pillars[0].max_z, 3.0);
        assert!((s.pillars[0].offset[0] - (0.15 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_points_dropped() {
        let s = pillarize(&[[8.0, 0.0, 0.0, 0.0], [-8.01, 0.0, 0.0, 0.0], [7.99, 7.99, 0.0, 0.0]], &grid8());
        assert_eq!(s.pillars.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pillarize_is_permutation_invariant(seed in 0u64..1000, swaps in proptest::collection::vec((0usize..200, 0usize..200), 0..100)) {
            let pts = cloud(200, seed);
            let mut shuffled = pts.clone();
            for (a, b) in swaps {
                shuffled.swap(a, b);
            }
            prop_assert_eq!(pillarize(&pts, &grid8()), pillarize(&shuffled, &grid8()));
        }
    }

    #[test]
    fn encode_zero_stats_zero_bias_is_zero() {
        let g = grid8();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &g, &mut ChaCha8Rng::seed_from_u64(1));
        let mut ctx = Ctx::new(&store);
        let fm = encode(&mut ctx, &pillarize::<f64>(&[], &g), &g, "enc").unwrap();
        assert!(ctx.value(fm.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_output_dims() {
        let g = BevGridSpec { range_x: 40.0, range_y: 20.0, cell: 0.5, channels: 4, downsample: 4 };
        let mut store = ParamStore::<f32>::new();
        init_encoder(&mut store, "enc", &g, &mut ChaCha8Rng::seed_from_u64(1));
        let mut ctx = Ctx::new(&store);
        let pts: Vec<[f32; 4]> = cloud(300, 2).iter().map(|p| p.map(|v| v as f32)).collect();
        let fm = encode(&mut ctx, &pillarize(&pts, &g), &g, "enc").unwrap();
        assert_eq!((fm.h, fm.w, fm.c), (40, 20, 4));
        assert_eq!(ctx.value(fm.var).shape(), &[40, 20, 4]);
    }

    #[test]
    fn encode_rejects_mismatched_stats() {
        let g = grid8();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &g, &mut ChaCha8Rng::seed_from_u64(1));
        let other = BevGridSpec { range_x: 4.0, ..g.clone() };
        let mut ctx = Ctx::new(&store);
        assert!(encode(&mut ctx, &pillarize::<f64>(&[], &other), &g, "enc").is_err());
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let g = grid8();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_encoder(&mut store, "enc", &g, &mut rng);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let stats = pillarize(&cloud(400, 9), &g);
        let weights: Vec<f64> = (0..8 * 8 * 8).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let r = check_param_grads(
            &store,
            |ctx| {
                let fm = encode(ctx, &stats, &g, "enc")?;
                ctx.g.weighted_sum(fm.var, Tensor::from_vec(&[8, 8, 8], weights.clone())?)
            },
            DEFAULT_EPS,
            Some(40),
        )
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn stacking_orders_channel_blocks() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store);
        let mk = |ctx: &mut Ctx<f64>, v: f64| FeatureMap {
            var: ctx.input(Tensor::full(&[2, 2, 4], v)),
            h: 2,
            w: 2,
            c: 4,
        };
        let (a, b, c) = (mk(&mut ctx, 1.0), mk(&mut ctx, 2.0), mk(&mut ctx, 3.0));
        let one = stack_agents(&mut ctx, &[a]).unwrap();
        assert_eq!((one.k, one.var), (1, a.var));
        let two = stack_agents(&mut ctx, &[a, b]).unwrap();
        assert_eq!(ctx.value(two.var).shape(), &[2, 2, 8]);
        assert_eq!(&ctx.value(two.var).data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let abc = stack_agents(&mut ctx, &[a, b, c]).unwrap();
        let acb = stack_agents(&mut ctx, &[a, c, b]).unwrap();
        let (x, y) = (ctx.value(abc.var).data(), ctx.value(acb.var).data());
        for px in 0..4 {
            let (rx, ry) = (&x[px * 12..px * 12 + 12], &y[px * 12..px * 12 + 12]);
            assert_eq!(rx[..4], ry[..4]);
            assert_eq!(rx[4..8], ry[8..12]);
            assert_eq!(rx[8..12], ry[4..8]);
        }
        let bad = FeatureMap { var: ctx.input(Tensor::zeros(&[2, 3, 4])), h: 2, w: 3, c: 4 };
        assert!(stack_agents(&mut ctx, &[a, bad]).is_err());
    }
}
