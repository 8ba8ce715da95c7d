//! Rotated BEV overlap, average precision and noise sweeps.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::detection::{Box3D, Detection};
use crate::error::{invalid, Error, Result};
use crate::geometry::NoiseSpec;
use crate::model::{FusionInput, S2rModel};
use crate::seed::rng_from;
use crate::Scalar;

type P2 = [f64; 2];

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips `subject` by every edge of the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        .abs()
}

/// Area of the footprint intersection.
pub fn bev_intersection_area(a: &Box3D<f64>, b: &Box3D<f64>) -> f64 {
    let (ca, cb) = (a.corners_bev(), b.corners_bev());
    // cheap rejection on circumscribed circles
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_polygon(&ca, &cb))
}

/// IoU without input validation; degenerate boxes give 0.
pub fn bev_iou(a: &Box3D<f64>, b: &Box3D<f64>) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.area_bev() + b.area_bev() - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated bird's-eye-view IoU in `[0, 1]`.
pub fn rotated_iou(a: &Box3D<f64>, b: &Box3D<f64>) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    // order the operands so the result is bit-symmetric
    let swap = (a.center, a.size, a.yaw).partial_cmp(&(b.center, b.size, b.yaw)) == Some(std::cmp::Ordering::Greater);
    Ok(if swap { bev_iou(b, a) } else { bev_iou(a, b) })
}

/// All-point average precision with greedy matching in global score order.
/// A detection matches the unmatched ground truth of its frame with the
/// highest IoU (lowest index on ties) when that IoU reaches `iou_thresh`.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<Box3D<f64>>], iou_thresh: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return invalid(format!("{} detection frames vs {} ground-truth frames", dets.len(), gts.len()));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, d)| (0..d.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|&(fa, ia), &(fb, ib)| {
        dets[fb][ib].score.total_cmp(&dets[fa][ia].score).then(fa.cmp(&fb)).then(ia.cmp(&ib))
    });
    if n_gt == 0 || order.is_empty() {
        return Ok(0.0);
    }
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(f, i) in &order {
        let d = &dets[f][i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[f].iter().enumerate() {
            if matched[f][gi] {
                continue;
            }
            let iou = bev_iou(d, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let tp = match best {
            Some((gi, iou)) if iou >= iou_thresh => {
                matched[f][gi] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(tp);
    }

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for &t in &tp_flags {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// One row of a sensitivity sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub sigma_pos: f64,
    pub sigma_head: f64,
    pub latency: f64,
    pub ap50: f64,
    pub ap70: f64,
}

/// Tab-separated table with a header line.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma_pos\tsigma_head\tlatency\tap50\tap70\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{:.6}", r.sigma_pos, r.sigma_head, r.latency, r.ap50, r.ap70);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap70: f64,
    pub frames: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

fn in_range(b: &Box3D<f64>, range: [f64; 2]) -> bool {
    b.center[0].abs() < range[0] && b.center[1].abs() < range[1]
}

/// AP@0.5 and AP@0.7 over a dataset. Frame `i` is perturbed with an RNG
/// derived from `(seed, i)`; boxes centered outside `range` (default: the
/// dataset's range) are dropped on both sides.
pub fn evaluate<T: Scalar>(
    model: &S2rModel<T>,
    dataset: &Dataset,
    noise: &NoiseSpec,
    seed: u64,
    range: Option<[f64; 2]>,
) -> Result<EvalResult> {
    noise.validate()?;
    let range = range.unwrap_or(dataset.manifest.range);
    if !(range[0] > 0.0 && range[1] > 0.0) {
        return invalid("evaluation range must be positive");
    }
    let cfg = &model.config;
    let per_frame = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let rec = if noise.is_zero() {
                dataset.record(i)?
            } else {
                dataset.noisy_record(i, noise, &mut rng_from(seed, i as u64))?
            };
            let input = FusionInput::from_record(&rec, &cfg.grid, cfg.max_agents)?;
            let dets: Vec<Detection> = model.predict(&input)?.into_iter().filter(|d| in_range(&d.bbox, range)).collect();
            let gts: Vec<Box3D<f64>> = rec.boxes.into_iter().filter(|b| in_range(b, range)).collect();
            Ok((dets, gts))
        })
        .collect::<Result<Vec<_>>>()?;
    let (dets, gts): (Vec<_>, Vec<_>) = per_frame.into_iter().unzip();
    Ok(EvalResult {
        ap50: average_precision(&dets, &gts, 0.5)?,
        ap70: average_precision(&dets, &gts, 0.7)?,
        frames: dets.len(),
        detections: dets.iter().map(Vec::len).sum(),
        ground_truth: gts.iter().map(Vec::len).sum(),
    })
}

/// Noise levels to sweep; every combination is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    pub sigma_pos: Vec<f64>,
    pub sigma_head: Vec<f64>,
    pub latency: Vec<f64>,
}

impl NoiseGrid {
    pub fn points(&self) -> Result<Vec<NoiseSpec>> {
        if self.sigma_pos.is_empty() || self.sigma_head.is_empty() || self.latency.is_empty() {
            return invalid("noise grid needs at least one value per axis");
        }
        let mut out = Vec::new();
        for &p in &self.sigma_pos {
            for &h in &self.sigma_head {
                for &l in &self.latency {
                    out.push(NoiseSpec::new(p, h, l)?);
                }
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for NoiseGrid {
    type Err = Error;

    /// Parses `pos=0,0.2;head=0,0.2;lat=0,0.1`. Missing axes default to `0`.
    fn from_str(s: &str) -> Result<Self> {
        let mut g = NoiseGrid { sigma_pos: vec![0.0], sigma_head: vec![0.0], latency: vec![0.0] };
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let Some((key, vals)) = part.split_once('=') else {
                return invalid(format!("grid axis `{part}` is not key=values"));
            };
            let vals = vals
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad grid value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            let slot = match key.trim() {
                "pos" | "sigma_pos" => &mut g.sigma_pos,
                "head" | "sigma_head" => &mut g.sigma_head,
                "lat" | "latency" => &mut g.latency,
                k => return invalid(format!("unknown grid axis `{k}`")),
            };
            *slot = vals;
        }
        g.points()?;
        Ok(g)
    }
}

/// One evaluation per grid point, in position-major, latency-minor order.
pub fn sweep<T: Scalar>(
    model: &S2rModel<T>,
    dataset: &Dataset,
    grid: &NoiseGrid,
    seed: u64,
    range: Option<[f64; 2]>,
) -> Result<Vec<SweepRow>> {
    grid.points()?
        .iter()
        .map(|n| {
            let r = evaluate(model, dataset, n, seed, range)?;
            Ok(SweepRow { sigma_pos: n.sigma_pos, sigma_head: n.sigma_head, latency: n.latency, ap50: r.ap50, ap70: r.ap70 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn sq(x: f64, y: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [1.0, 1.0, 1.0], yaw)
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn iou_examples() {
        let a = Box3D::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.7);
        assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rotated_iou(&a, &Box3D::new([30.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.7)).unwrap(), 0.0);
        let s = 2f64.sqrt();
        let expect = 2.0 * (s - 1.0) / (2.0 - 2.0 * (s - 1.0));
        let iou = rotated_iou(&sq(0.0, 0.0, 0.0), &sq(0.0, 0.0, FRAC_PI_4)).unwrap();
        assert!((iou - expect).abs() < 1e-12);
        assert!((iou - 0.7071).abs() < 1e-4);
        assert!(rotated_iou(&a, &Box3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0)).is_err());
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let a = sq(0.0, 0.0, 0.0);
        let b = sq(0.0, 0.0, FRAC_PI_4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..n {
            let (x, y) = (rng.gen_range(-0.75..0.75), rng.gen_range(-0.75..0.75));
            let (ia, ib) = (a.contains_bev(x, y), b.contains_bev(x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        let mc = inter as f64 / union as f64;
        assert!((mc - rotated_iou(&a, &b).unwrap()).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn iou_symmetric(x in -3.0..3.0f64, y in -3.0..3.0f64, y1 in -3.2..3.2f64, y2 in -3.2..3.2f64, l in 0.5..5.0f64, w in 0.5..3.0f64) {
            let a = Box3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.0], y1);
            let b = Box3D::new([x, y, 0.0], [l, w, 1.0], y2);
            let ab = rotated_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, rotated_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_monotone_in_translation(yaw in -3.2..3.2f64, dir in 0usize..2) {
            let a = Box3D::new([0.0; 3], [4.0, 2.0, 1.0], yaw);
            let mut prev = 1.0 + 1e-12;
            for k in 0..=80 {
                let mut c = [0.0; 3];
                c[dir] = k as f64 * 0.1;
                let v = rotated_iou(&a, &Box3D::new(c, [4.0, 2.0, 1.0], yaw)).unwrap();
                prop_assert!(v <= prev + 1e-12);
                prev = v;
            }
            prop_assert_eq!(prev, 0.0);
        }
    }

    #[test]
    fn ap_examples() {
        let g = sq(0.0, 0.0, 0.0);
        assert_eq!(average_precision(&[vec![det(g, 0.9)]], &[vec![g]], 0.5).unwrap(), 1.0);
        let fp = det(sq(10.0, 0.0, 0.0), 0.9);
        let ap = average_precision(&[vec![fp, det(g, 0.8)]], &[vec![g]], 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&[vec![]], &[vec![g]], 0.5).unwrap(), 0.0);
        assert!(average_precision(&[vec![]], &[], 0.5).is_err());
    }

    /// Independent enumeration: rerun matching on every score prefix and take
    /// the envelope over all resulting PR points.
    fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<Box3D>], thr: f64) -> f64 {
        let mut flat: Vec<(f64, usize, usize)> = Vec::new();
        for (f, ds) in dets.iter().enumerate() {
            for (i, d) in ds.iter().enumerate() {
                flat.push((d.score, f, i));
            }
        }
        flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let n_gt: usize = gts.iter().map(|g| g.len()).sum();
        if n_gt == 0 || flat.is_empty() {
            return 0.0;
        }
        let mut points = Vec::new();
        for k in 1..=flat.len() {
            let mut used: std::collections::HashSet<(usize, usize)> = Default::default();
            let mut tp = 0;
            for &(_, f, i) in &flat[..k] {
                let cand = (0..gts[f].len())
                    .filter(|gi| !used.contains(&(f, *gi)))
                    .map(|gi| (gi, rotated_iou(&dets[f][i].bbox, &gts[f][gi]).unwrap()))
                    .fold(None::<(usize, f64)>, |acc, (gi, v)| match acc {
                        Some((_, best)) if best >= v => acc,
                        _ => Some((gi, v)),
                    });
                if let Some((gi, v)) = cand {
                    if v >= thr {
                        used.insert((f, gi));
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    fn random_instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Box3D>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..frames {
            let g: Vec<Box3D> = (0..rng.gen_range(0..5))
                .map(|_| Box3D::new([rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0], [4.0, 2.0, 1.5], rng.gen_range(-3.0..3.0)))
                .collect();
            let mut d = Vec::new();
            for b in &g {
                if rng.gen_bool(0.7) {
                    let mut c = b.center;
                    c[0] += rng.gen_range(-1.0..1.0);
                    c[1] += rng.gen_range(-0.6..0.6);
                    d.push(det(Box3D::new(c, b.size, b.yaw + rng.gen_range(-0.3..0.3)), rng.gen_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.gen_range(0..3) {
                d.push(det(Box3D::new([rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0], [4.0, 2.0, 1.5], 0.0), rng.gen_range(0.0..1.0)));
            }
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]
        #[test]
        fn ap_matches_oracle(seed in 0u64..100_000, thr in prop::sample::select(vec![0.3, 0.5, 0.7])) {
            let (d, g) = random_instance(seed);
            let ap = average_precision(&d, &g, thr).unwrap();
            prop_assert!((ap - oracle_ap(&d, &g, thr)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_frame_order_invariant(seed in 0u64..100_000, rot in 0usize..3) {
            let (mut d, mut g) = random_instance(seed);
            let before = average_precision(&d, &g, 0.5).unwrap();
            let r = rot % d.len();
            d.rotate_left(r);
            g.rotate_left(r);
            prop_assert!((average_precision(&d, &g, 0.5).unwrap() - before).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_table_format() {
        let rows = vec![SweepRow { sigma_pos: 0.2, sigma_head: 0.2, latency: 0.1, ap50: 0.5, ap70: 0.25 }];
        let t = sweep_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "sigma_pos\tsigma_head\tlatency\tap50\tap70");
        assert_eq!(lines[1], "0.2\t0.2\t0.1\t0.500000\t0.250000");
    }

    fn eval_fixture(dir: &std::path::Path) -> (crate::Model32, Dataset) {
        use crate::dataset::{generate_dataset, GenConfig, Split};
        use crate::scenario::SceneConfig;
        let cfg = crate::model::tests::tiny_config();
        let gen = GenConfig {
            scene: SceneConfig { vehicles: 8, agents: 2, frames: 3, ..SceneConfig::default() },
            seed: 17,
            frames: 4,
            split: Split::Test,
            range: [16.0, 8.0],
        };
        generate_dataset(dir, &gen).unwrap();
        let model = crate::Model32::new(crate::ModelConfig { score_thresh: 0.005, ..cfg }, 3).unwrap();
        (model, Dataset::open(dir).unwrap())
    }

    #[test]
    fn sweep_rows_and_zero_row() {
        let dir = tempfile::tempdir().unwrap();
        let (model, ds) = eval_fixture(dir.path());
        let grid: NoiseGrid = "pos=0,0.2;head=0.0;lat=0,0.1".parse().unwrap();
        let rows = sweep(&model, &ds, &grid, 9, None).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[3].sigma_pos, rows[3].sigma_head, rows[3].latency), (0.2, 0.0, 0.1));
        let plain = evaluate(&model, &ds, &NoiseSpec::PERFECT, 9, None).unwrap();
        assert!(plain.detections > 0 && plain.ground_truth > 0);
        assert_eq!(rows[0].ap50.to_bits(), plain.ap50.to_bits());
        assert_eq!(rows[0].ap70.to_bits(), plain.ap70.to_bits());
        let again = evaluate(&model, &ds, &NoiseSpec::NOISY, 9, None).unwrap();
        assert_eq!(again, evaluate(&model, &ds, &NoiseSpec::NOISY, 9, None).unwrap());
        assert_eq!(sweep_table(&rows).lines().count(), 5);
    }

    #[test]
    fn evaluate_clamps_range() {
        let dir = tempfile::tempdir().unwrap();
        let (model, ds) = eval_fixture(dir.path());
        let full = evaluate(&model, &ds, &NoiseSpec::PERFECT, 0, None).unwrap();
        let near = evaluate(&model, &ds, &NoiseSpec::PERFECT, 0, Some([4.0, 4.0])).unwrap();
        assert!(near.ground_truth <= full.ground_truth);
        assert!(near.detections <= full.detections);
        assert!(evaluate(&model, &ds, &NoiseSpec::PERFECT, 0, Some([0.0, 4.0])).is_err());
    }

    #[test]
    fn noise_grid_parsing() {
        let g: NoiseGrid = "pos=0,0.1,0.2; lat=0.05".parse().unwrap();
        assert_eq!(g.sigma_pos, vec![0.0, 0.1, 0.2]);
        assert_eq!(g.sigma_head, vec![0.0]);
        assert_eq!(g.points().unwrap().len(), 3);
        for bad in ["pos=", "speed=1", "pos=-1", "pos=a", "lat"] {
            assert!(bad.parse::<NoiseGrid>().is_err(), "{bad}");
        }
    }
}
