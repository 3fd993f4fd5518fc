//! Named finite-difference cases covering every differentiable op and the
//! composite blocks, all in `f64` at small shapes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use super::graph::{Graph, Var};
use crate::attention::{
    channel_attention, cbam_forward, eam_forward, icbam_forward, spatial_attention, AttentionIds, AttentionVariant,
    EamConfig, EamParams,
};
use crate::error::{Error, Result};
use crate::layers::{ConvIds, LinearIds};
use crate::multiscale::{aspp_forward, backbone_forward, AsppParams, BackboneConfig, BackboneParams, Model, ModelConfig, Strategy};
use crate::ops::ConvGeometry;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor4};

pub type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Send + Sync>;
type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(ParamStore<f64>, LossFn)> + Send + Sync>;

pub struct GradCase {
    pub name: &'static str,
    build: Builder,
}

impl GradCase {
    fn new(
        name: &'static str,
        build: impl Fn(&mut ChaCha8Rng) -> Result<(ParamStore<f64>, LossFn)> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name,
            build: Box::new(build),
        }
    }

    pub fn run(&self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xca5e);
        let (mut store, loss) = (self.build)(&mut rng)?;
        finite_diff_check(self.name, loss, &mut store, cfg)
    }
}

fn normal(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor4::from_fn(shape, |_, _, _, _| d.sample(rng))
}

/// Normal values pushed at least 0.1 away from the ReLU kink.
fn off_kink(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    normal(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Pairwise distinct values in `[-2, 2)` spaced by `4 / len`, so no max has
/// a near tie.
fn separated(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let len = Shape::from(shape).len();
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    let step = 4.0 / len as f64;
    Tensor4::new(shape, ranks.into_iter().map(|r| r as f64 * step - 2.0).collect()).expect("shape matches")
}

/// `sum(R ⊙ y)` with `R` fixed by the shape of `y`.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let s = g.shape(y);
    let seed = s.dims().iter().fold(17u64, |acc, &d| acc.wrapping_mul(31).wrapping_add(d as u64));
    let r = normal(s.dims(), &mut ChaCha8Rng::seed_from_u64(seed));
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

fn input(store: &mut ParamStore<f64>, value: Tensor4<f64>) -> Result<ParamId> {
    store.insert("input", value)
}

fn unary(
    name: &'static str,
    shape: [usize; 4],
    init: fn([usize; 4], &mut ChaCha8Rng) -> Tensor4<f64>,
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut store = ParamStore::new();
        let x = input(&mut store, init(shape, rng))?;
        let loss: LossFn = Box::new(move |g, s| {
            let v = g.param(s, x);
            let y = op(g, v)?;
            weighted_sum(g, y)
        });
        Ok((store, loss))
    })
}

fn binary(name: &'static str, a: [usize; 4], b: [usize; 4], add: bool) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut store = ParamStore::new();
        let xa = store.insert("a", normal(a, rng))?;
        let xb = store.insert("b", normal(b, rng))?;
        let loss: LossFn = Box::new(move |g, s| {
            let (va, vb) = (g.param(s, xa), g.param(s, xb));
            let y = if add { g.add(va, vb)? } else { g.mul(va, vb)? };
            weighted_sum(g, y)
        });
        Ok((store, loss))
    })
}

fn conv_case(name: &'static str, x: [usize; 4], cout: usize, k: usize, geometry: ConvGeometry) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut store = ParamStore::new();
        let xi = input(&mut store, normal(x, rng))?;
        let conv = ConvIds::register(&mut store, "conv", x[1], cout, k, geometry, 1.0, rng)?;
        store.set_value(conv.bias, normal([1, cout, 1, 1], rng))?;
        let loss: LossFn = Box::new(move |g, s| {
            let v = g.param(s, xi);
            let y = conv.apply(g, s, v)?;
            weighted_sum(g, y)
        });
        Ok((store, loss))
    })
}

fn small_eam(c_prime: usize, variant: AttentionVariant, conv_features: bool, shared: bool) -> EamConfig {
    EamConfig {
        variant,
        include_conv_features: conv_features,
        share_attention: shared,
        ..EamConfig::new(c_prime)
    }
}

/// Random (non-zero) values for every bias so all paths carry gradient.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).ends_with(".b")).collect();
    for id in ids {
        let shape = store.shape(id).dims();
        store.set_value(id, normal(shape, rng).scale(0.1))?;
    }
    Ok(())
}

fn attention_case(name: &'static str, which: u8) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut store = ParamStore::new();
        let cfg = small_eam(8, AttentionVariant::Icbam, true, true);
        let xi = input(&mut store, separated([2, 8, 8, 8], rng))?;
        let attn = AttentionIds::register(&mut store, "attn", &cfg, rng)?;
        randomize_biases(&mut store, rng)?;
        let loss: LossFn = Box::new(move |g, s| {
            let v = g.param(s, xi);
            let y = match which {
                0 => channel_attention(g, s, &attn, v)?,
                1 => spatial_attention(g, s, &attn, v)?,
                _ => cbam_forward(g, s, &attn, v)?,
            };
            weighted_sum(g, y)
        });
        Ok((store, loss))
    })
}

fn eam_case(name: &'static str, cfg: EamConfig, icbam_only: bool) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut store = ParamStore::new();
        let xi = input(&mut store, separated([2, 6, 8, 8], rng))?;
        let p = EamParams::register(&mut store, "eam", 6, &cfg, rng)?;
        randomize_biases(&mut store, rng)?;
        let loss: LossFn = Box::new(move |g, s| {
            let v = g.param(s, xi);
            let y = if icbam_only {
                let r = crate::attention::reduce_dim(g, s, &p, v)?;
                icbam_forward(g, s, &p, r)?
            } else {
                eam_forward(g, s, &p, &cfg, v)?
            };
            weighted_sum(g, y)
        });
        Ok((store, loss))
    })
}

fn model_case(name: &'static str, strategy: Strategy, variant: AttentionVariant, conv_features: bool) -> GradCase {
    GradCase::new(name, move |rng| {
        let mut cfg = ModelConfig::with_widths(3, 32, 2, 4);
        cfg.strategy = strategy;
        cfg.eam.variant = variant;
        cfg.eam.include_conv_features = conv_features;
        cfg.aspp_branch_width = 4;
        cfg.aspp_out = 6;
        let mut store = ParamStore::new();
        let xi = input(&mut store, separated([1, 3, 32, 32], rng))?;
        let model = Model::new(cfg, &mut store, rng)?;
        randomize_biases(&mut store, rng)?;
        store.set_value(model.head.weight, normal(store.shape(model.head.weight).dims(), rng).scale(0.5))?;
        let loss: LossFn = Box::new(move |g, s| {
            let v = g.param(s, xi);
            let out = model.forward(g, s, v)?;
            g.cross_entropy(out.logits, &[2])
        });
        Ok((store, loss))
    })
}

/// Every registered case, in report order.
pub fn gradcheck_cases() -> Vec<GradCase> {
    use AttentionVariant::{Cbam, Icbam};
    vec![
        conv_case("conv2d", [2, 3, 6, 6], 4, 3, ConvGeometry::new(1, 1, 1)),
        conv_case("conv2d_1x1", [2, 5, 5, 5], 3, 1, ConvGeometry::new(1, 0, 1)),
        conv_case("conv2d_stride2", [2, 3, 7, 7], 4, 3, ConvGeometry::new(2, 1, 1)),
        conv_case("conv2d_dilated", [1, 2, 9, 9], 3, 3, ConvGeometry::new(1, 3, 3)),
        conv_case("conv2d_7x7", [2, 2, 8, 8], 1, 7, ConvGeometry::same(7, 1)),
        GradCase::new("linear", |rng| {
            let mut store = ParamStore::new();
            let xi = input(&mut store, normal([3, 5, 1, 1], rng))?;
            let lin = LinearIds::register(&mut store, "fc", 5, 4, 1.0, rng)?;
            store.set_value(lin.bias, normal([1, 4, 1, 1], rng))?;
            let loss: LossFn = Box::new(move |g, s| {
                let v = g.param(s, xi);
                let y = lin.apply(g, s, v)?;
                weighted_sum(g, y)
            });
            Ok((store, loss))
        }),
        unary("relu", [2, 3, 4, 4], off_kink, |g, x| Ok(g.relu(x))),
        unary("sigmoid", [2, 3, 4, 4], normal, |g, x| Ok(g.sigmoid(x))),
        unary("max_pool2", [2, 3, 6, 6], separated, |g, x| g.max_pool2(x)),
        unary("channel_pool_avg", [2, 4, 5, 5], normal, |g, x| Ok(g.channel_pool_avg(x))),
        unary("channel_pool_max", [2, 4, 5, 5], separated, |g, x| Ok(g.channel_pool_max(x))),
        unary("spatial_pool", [2, 4, 5, 5], separated, |g, x| Ok(g.spatial_pool(x))),
        unary("scale", [2, 2, 3, 3], normal, |g, x| Ok(g.scale(x, -1.7))),
        unary("sum", [2, 2, 3, 3], normal, |g, x| Ok(g.sum(x))),
        unary("concat_channels", [2, 3, 4, 4], normal, |g, x| {
            let sq = g.mul(x, x)?;
            g.concat_channels(&[x, sq, x])
        }),
        binary("mul", [2, 3, 4, 4], [2, 3, 4, 4], false),
        binary("mul_channel_broadcast", [2, 3, 4, 4], [2, 3, 1, 1], false),
        binary("mul_spatial_broadcast", [2, 3, 4, 4], [2, 1, 4, 4], false),
        binary("add", [2, 3, 4, 4], [2, 3, 4, 4], true),
        binary("add_broadcast", [2, 3, 4, 4], [1, 3, 1, 4], true),
        unary("cross_entropy", [3, 5, 1, 1], normal, |g, x| g.cross_entropy(x, &[0, 4, 2])),
        unary("pick_class", [3, 5, 1, 1], normal, |g, x| g.pick_class(x, 3)),
        attention_case("channel_attention", 0),
        attention_case("spatial_attention", 1),
        attention_case("cbam", 2),
        eam_case("icbam", small_eam(8, Icbam, true, true), true),
        eam_case("eam", small_eam(8, Icbam, true, true), false),
        eam_case("eam_cbam", small_eam(8, Cbam, true, true), false),
        eam_case("eam_no_conv_features", small_eam(8, Icbam, false, true), false),
        eam_case("eam_unshared", small_eam(8, Icbam, true, false), false),
        GradCase::new("aspp", |rng| {
            let mut store = ParamStore::new();
            let xi = input(&mut store, separated([2, 4, 8, 8], rng))?;
            let p = AsppParams::register(&mut store, "aspp", 4, 3, 5, 8, rng)?;
            randomize_biases(&mut store, rng)?;
            let loss: LossFn = Box::new(move |g, s| {
                let v = g.param(s, xi);
                let y = aspp_forward(g, s, &p, v)?;
                weighted_sum(g, y)
            });
            Ok((store, loss))
        }),
        GradCase::new("backbone", |rng| {
            let mut store = ParamStore::new();
            let xi = input(&mut store, separated([1, 3, 32, 32], rng))?;
            let cfg = BackboneConfig::doubling(2);
            let p = BackboneParams::register(&mut store, &cfg, rng)?;
            randomize_biases(&mut store, rng)?;
            let loss: LossFn = Box::new(move |g, s| {
                let v = g.param(s, xi);
                let taps = backbone_forward(g, s, &p, v)?;
                let parts: Vec<Var> = taps
                    .iter()
                    .map(|&t| weighted_sum(g, t))
                    .collect::<Result<_>>()?;
                let mut total = parts[0];
                for &p in &parts[1..] {
                    total = g.add(total, p)?;
                }
                Ok(total)
            });
            Ok((store, loss))
        }),
        model_case("model_gap", Strategy::Gap, Icbam, true),
        model_case("model_aspp_gap", Strategy::AsppGap, Icbam, true),
        model_case("model_eam_gap", Strategy::EamGap, Icbam, true),
        model_case("model_eam_aspp_gap", Strategy::EamAsppGap, Icbam, true),
        model_case("model_eam_aspp_gap_cbam", Strategy::EamAsppGap, Cbam, false),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    gradcheck_cases().iter().map(|c| c.name).collect()
}

/// Runs all cases, or only the one named `only`.
pub fn run_gradcheck_suite(only: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let cases: Vec<GradCase> = gradcheck_cases()
        .into_iter()
        .filter(|c| only.is_none_or(|o| o == c.name))
        .collect();
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "unknown gradient-check op `{}`; known ops: {}",
            only.unwrap_or_default(),
            case_names().join(", ")
        )));
    }
    cases.iter().map(|c| c.run(cfg)).collect()
}
