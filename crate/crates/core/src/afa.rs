//! Adversarial domain alignment of agent and fused ego features.
//!
//! Features reach the discriminators through a gradient reversal layer, so
//! one backward pass trains the discriminators to separate the domains and the
//! backbone to confuse them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{softplus, Var};
use crate::params::{Ctx, Init, ParamStore};
use crate::Scalar;

pub const DISC_INTER: &str = "disc_inter";
pub const DISC_EGO: &str = "disc_ego";

const LEAK: f64 = 0.2;
const STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    /// Simulated, labeled source data.
    Sim,
    /// Real, unlabeled target data.
    Real,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Sim => 0.0,
            DomainLabel::Real => 1.0,
        }
    }
}

/// Identity forward; backward scales the incoming gradient by `-lambda`.
pub fn grl<T: Scalar>(ctx: &mut Ctx<T>, x: Var, lambda: f64) -> Result<Var> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return invalid(format!("gradient reversal strength must be >= 0, got {lambda}"));
    }
    Ok(ctx.g.grl(x, T::lit(lambda)))
}

/// Registers a discriminator on `c`-channel maps.
pub fn init_discriminator<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut impl Rng) {
    for s in 0..STAGES {
        store.init(format!("{prefix}.conv{s}.w"), &[3, 3, c, c], Init::FanIn(2f64.sqrt()), rng);
        store.init(format!("{prefix}.conv{s}.b"), &[c], Init::Zeros, rng);
    }
    store.init(format!("{prefix}.out.w"), &[c, 1], Init::Zeros, rng);
    store.init(format!("{prefix}.out.b"), &[1], Init::Zeros, rng);
}

/// Strided convolutions, global average pooling and a linear layer: one logit of shape `[1]`.
pub fn discriminate<T: Scalar>(ctx: &mut Ctx<T>, x: Var, prefix: &str) -> Result<Var> {
    let mut h = x;
    for s in 0..STAGES {
        let w = ctx.param(&format!("{prefix}.conv{s}.w"))?;
        let b = ctx.param(&format!("{prefix}.conv{s}.b"))?;
        let y = ctx.g.conv2d(h, w, b, 2, 1)?;
        h = ctx.g.leaky_relu(y, T::lit(LEAK));
    }
    let pooled = ctx.g.global_avg_pool(h)?;
    let w = ctx.param(&format!("{prefix}.out.w"))?;
    let b = ctx.param(&format!("{prefix}.out.b"))?;
    ctx.g.linear(pooled, w, Some(b))
}

/// Inter-agent discriminator on one agent's pre-fusion map.
pub fn discriminate_inter<T: Scalar>(ctx: &mut Ctx<T>, map: Var) -> Result<Var> {
    discriminate(ctx, map, DISC_INTER)
}

/// Ego discriminator on the fused ego map.
pub fn discriminate_ego<T: Scalar>(ctx: &mut Ctx<T>, fused: Var) -> Result<Var> {
    discriminate(ctx, fused, DISC_EGO)
}

/// Mean binary cross-entropy of domain logits.
pub fn bce_loss(logits: &[f64], labels: &[DomainLabel]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return invalid("domain loss needs equally many logits and labels, at least one");
    }
    let total: f64 = logits.iter().zip(labels).map(|(&z, l)| softplus(z) - l.value() * z).sum();
    Ok(total / logits.len() as f64)
}

/// Adaptation loss on the graph: mean BCE of the inter-agent terms plus mean
/// BCE of the ego terms. The two scales multiply the means, which lets a batch be
/// split into per-sample graphs whose gradients add up to the batch loss.
pub fn afa_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    inter: &[(Var, DomainLabel)],
    ego: &[(Var, DomainLabel)],
    inter_scale: f64,
    ego_scale: f64,
) -> Result<Var> {
    if inter.is_empty() && ego.is_empty() {
        return invalid("adaptation loss needs at least one discriminator logit");
    }
    let mut total: Option<Var> = None;
    for (terms, scale) in [(inter, inter_scale), (ego, ego_scale)] {
        if terms.is_empty() {
            continue;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let logits = if vars.len() == 1 { vars[0] } else { ctx.g.concat_last(&vars)? };
        let labels: Vec<T> = terms.iter().map(|t| T::lit(t.1.value())).collect();
        let mean = ctx.g.bce_with_logits(logits, &labels)?;
        let part = ctx.g.scale(mean, T::lit(scale));
        total = Some(match total {
            Some(t) => ctx.g.add(t, part)?,
            None => part,
        });
    }
    Ok(total.expect("at least one term"))
}

/// Domain loss evaluated without a graph, for logging.
pub fn afa_loss_value(inter: &[(f64, DomainLabel)], ego: &[(f64, DomainLabel)]) -> Result<f64> {
    let mut total = 0.0;
    for terms in [inter, ego] {
        if !terms.is_empty() {
            let (z, l): (Vec<f64>, Vec<DomainLabel>) = terms.iter().copied().unzip();
            total += bce_loss(&z, &l)?;
        }
    }
    if inter.is_empty() && ego.is_empty() {
        return invalid("adaptation loss needs at least one discriminator logit");
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, DEFAULT_EPS};
    use crate::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grl_examples() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store);
        let x = ctx.input(rand_tensor(&[3], 1));
        for (lambda, want) in [(0.1, -0.1), (0.0, 0.0)] {
            let y = grl(&mut ctx, x, lambda).unwrap();
            assert_eq!(ctx.value(y), ctx.value(x));
            let s = ctx.g.sum(y);
            let g = ctx.g.backward(s);
            assert!(g.get(x).unwrap().data().iter().all(|&v| (v - want).abs() < 1e-15));
        }
        assert!(grl(&mut ctx, x, -1.0).is_err());
    }

    fn disc_store(seed: u64, randomize_out: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_discriminator(&mut s, DISC_INTER, 8, &mut rng);
        init_discriminator(&mut s, DISC_EGO, 8, &mut rng);
        if randomize_out {
            for (name, t) in s.iter_mut() {
                if name.contains(".out.") || name.ends_with(".b") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                }
            }
        }
        s
    }

    #[test]
    fn zero_init_and_scalar_output() {
        let store = disc_store(1, false);
        let mut ctx = Ctx::new(&store);
        let x = ctx.input(rand_tensor(&[8, 8, 8], 2));
        for f in [discriminate_inter::<f64>, discriminate_ego::<f64>] {
            let z = f(&mut ctx, x).unwrap();
            assert_eq!(ctx.value(z).shape(), &[1]);
            assert_eq!(ctx.value(z).data(), &[0.0]);
        }
        let odd = ctx.input(rand_tensor(&[5, 3, 8], 3));
        let z = discriminate_ego(&mut ctx, odd).unwrap();
        assert_eq!(ctx.value(z).shape(), &[1]);
    }

    #[test]
    fn discriminator_gradients() {
        for prefix in [DISC_INTER, DISC_EGO] {
            let mut store = disc_store(3, true);
            store.insert("x", rand_tensor(&[8, 8, 8], 4));
            let r = check_param_grads(
                &store,
                |ctx| {
                    let x = ctx.param("x")?;
                    let z = discriminate(ctx, x, prefix)?;
                    ctx.g.bce_with_logits(z, &[1.0])
                },
                DEFAULT_EPS,
                Some(16),
            )
            .unwrap();
            assert!(r.passes(1e-3), "{prefix}: {r:?}");
        }
    }

    #[test]
    fn bce_examples() {
        for l in [DomainLabel::Sim, DomainLabel::Real] {
            assert!((bce_loss(&[0.0], &[l]).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
        assert!(bce_loss(&[20.0], &[DomainLabel::Real]).unwrap() < 1e-8);
        assert!(bce_loss(&[], &[]).is_err());
        assert!(bce_loss(&[0.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn bce_order_invariant_and_non_negative(z in proptest::collection::vec(-30.0..30.0f64, 1..12), seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l: Vec<DomainLabel> = z.iter().map(|_| if rng.gen_bool(0.5) { DomainLabel::Real } else { DomainLabel::Sim }).collect();
            let a = bce_loss(&z, &l).unwrap();
            prop_assert!(a >= 0.0);
            let (mut zr, mut lr) = (z.clone(), l.clone());
            zr.reverse();
            lr.reverse();
            prop_assert!((bce_loss(&zr, &lr).unwrap() - a).abs() < 1e-12);
        }
    }

    /// A one-layer backbone feeding the discriminator through the reversal.
    fn adversarial(ctx: &mut Ctx<f64>, with_grl: bool) -> Result<Var> {
        let x = ctx.input(rand_tensor(&[8, 8, 8], 7));
        let w = ctx.param("bb.w")?;
        let f = ctx.g.linear(x, w, None)?;
        let f = if with_grl { grl(ctx, f, 1.0)? } else { f };
        let z1 = discriminate_inter(ctx, f)?;
        let z2 = discriminate_ego(ctx, f)?;
        afa_loss(ctx, &[(z1, DomainLabel::Real)], &[(z2, DomainLabel::Sim)], 1.0, 1.0)
    }

    #[test]
    fn reversal_flips_backbone_gradient_only() {
        let mut store = disc_store(5, true);
        store.insert("bb.w", rand_tensor(&[8, 8], 6));
        let grads = |with_grl| {
            let mut ctx = Ctx::new(&store);
            let loss = adversarial(&mut ctx, with_grl).unwrap();
            ctx.param_grads(loss)
        };
        let (plain, rev) = (grads(false), grads(true));
        for (name, g) in &plain {
            let r = &rev[name];
            for (a, b) in g.data().iter().zip(r.data()) {
                if name.starts_with("bb.") {
                    assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0), "{name}");
                } else {
                    assert_eq!(a, b, "{name}");
                }
            }
        }
        assert!(plain["bb.w"].max_abs() > 0.0);
    }

    #[test]
    fn afa_loss_combines_means() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store);
        let zs = [0.3, -1.2, 2.0];
        let v: Vec<Var> = zs.iter().map(|&z| ctx.input(Tensor::from_vec(&[1], vec![z]).unwrap())).collect();
        let inter = [(v[0], DomainLabel::Sim), (v[1], DomainLabel::Real)];
        let ego = [(v[2], DomainLabel::Real)];
        let loss = afa_loss(&mut ctx, &inter, &ego, 1.0, 1.0).unwrap();
        let want = afa_loss_value(&[(0.3, DomainLabel::Sim), (-1.2, DomainLabel::Real)], &[(2.0, DomainLabel::Real)]).unwrap();
        assert!((ctx.value(loss).item() - want).abs() < 1e-12);
        assert!(afa_loss(&mut ctx, &[], &[], 1.0, 1.0).is_err());
    }
}
