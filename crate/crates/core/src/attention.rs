//! Channel and spatial attention, the sequential CBAM block, the
//! sequential-plus-parallel ICBAM block, and the full enhanced attention
//! module: 1x1 dimension reduction, ICBAM, and concatenation of the reduced
//! convolutional features with the attention features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvIds, MlpIds};
use crate::ops::ConvGeometry;
use crate::params::ParamStore;
use crate::tensor::{Axis, Element};
use crate::TensorError;

/// Kernel size of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Sequential channel then spatial attention.
    Cbam,
    /// CBAM plus the parallel channel x spatial branch.
    Icbam,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Cbam => "cbam",
            AttentionVariant::Icbam => "icbam",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbam" => Ok(AttentionVariant::Cbam),
            "icbam" => Ok(AttentionVariant::Icbam),
            other => Err(Error::Config(format!("unknown attention variant `{other}` (expected icbam or cbam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EamConfig {
    /// Channel count after dimension reduction.
    pub c_prime: usize,
    /// Hidden width of the channel MLP is `c_prime / mlp_reduction_r`.
    pub mlp_reduction_r: usize,
    pub variant: AttentionVariant,
    /// Concatenate the reduced features with the attention output.
    pub include_conv_features: bool,
    /// Use one channel MLP and one spatial conv for both the sequential and
    /// the parallel branch.
    pub share_attention: bool,
}

impl EamConfig {
    /// ICBAM with convolutional features and the default reduction ratio.
    pub fn new(c_prime: usize) -> Self {
        EamConfig {
            c_prime,
            mlp_reduction_r: default_reduction(c_prime),
            variant: AttentionVariant::Icbam,
            include_conv_features: true,
            share_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.mlp_reduction_r;
        if self.c_prime == 0 || r == 0 || self.c_prime < r || self.c_prime % r != 0 {
            return Err(Error::Config(format!(
                "c_prime ({}) must be a positive multiple of the MLP reduction ratio ({r})",
                self.c_prime
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        self.c_prime / self.mlp_reduction_r
    }

    /// Channels produced by [`eam_forward`].
    pub fn output_channels(&self) -> usize {
        if self.include_conv_features {
            2 * self.c_prime
        } else {
            self.c_prime
        }
    }
}

/// Largest ratio `r <= 16` dividing `c_prime` that keeps at least four hidden
/// units (or 1 when `c_prime < 4`).
pub fn default_reduction(c_prime: usize) -> usize {
    (1..=16)
        .rev()
        .find(|&r| c_prime % r == 0 && c_prime / r >= 4)
        .unwrap_or(1)
}

/// Parameters of one channel-attention MLP and one spatial-attention conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIds {
    pub channel_mlp: MlpIds,
    pub spatial_conv: ConvIds,
}

impl AttentionIds {
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionIds {
            channel_mlp: MlpIds::register(store, &format!("{prefix}.mlp"), cfg.c_prime, cfg.hidden_width(), rng)?,
            spatial_conv: ConvIds::register(
                store,
                &format!("{prefix}.spatial"),
                2,
                1,
                SPATIAL_KERNEL,
                ConvGeometry::same(SPATIAL_KERNEL, 1),
                1.0,
                rng,
            )?,
        })
    }
}

/// Parameters of one enhanced attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EamParams {
    pub reduce: ConvIds,
    /// Attention used by the sequential (upper) block.
    pub upper: AttentionIds,
    /// Attention used by the parallel (middle) block; equal to `upper` when
    /// parameters are shared.
    pub middle: AttentionIds,
}

impl EamParams {
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        cfg: &EamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let reduce = ConvIds::register(
            store,
            &format!("{prefix}.reduce"),
            in_channels,
            cfg.c_prime,
            1,
            ConvGeometry::new(1, 0, 1),
            1.0,
            rng,
        )?;
        let upper = AttentionIds::register(store, &format!("{prefix}.attn"), cfg, rng)?;
        let middle = if cfg.share_attention {
            upper
        } else {
            AttentionIds::register(store, &format!("{prefix}.attn_mid"), cfg, rng)?
        };
        Ok(EamParams { reduce, upper, middle })
    }

    pub fn in_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.shape(self.reduce.weight).c
    }
}

/// 1x1 convolution from `C` to `C'` channels, no activation.
pub fn reduce_dim<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, p: &EamParams, x: Var) -> Result<Var> {
    let expected = p.in_channels(store);
    let found = g.shape(x).c;
    if expected != found {
        return Err(TensorError::Dim {
            op: "reduce_dim",
            axis: Axis::Channel,
            expected,
            found,
        }
        .into());
    }
    p.reduce.apply(g, store, x)
}

/// `sigmoid(MLP(avg) + MLP(max))` over spatial pools, shape `(n, C', 1, 1)`.
pub fn channel_attention<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, a: &AttentionIds, x: Var) -> Result<Var> {
    let avg = g.channel_pool_avg(x);
    let max = g.channel_pool_max(x);
    let from_avg = a.channel_mlp.apply(g, store, avg)?;
    let from_max = a.channel_mlp.apply(g, store, max)?;
    let sum = g.add(from_avg, from_max)?;
    Ok(g.sigmoid(sum))
}

/// `sigmoid(conv7x7([avg; max]))` over channel pools, shape `(n, 1, h, w)`.
pub fn spatial_attention<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, a: &AttentionIds, x: Var) -> Result<Var> {
    let pooled = g.spatial_pool(x);
    let logits = a.spatial_conv.apply(g, store, pooled)?;
    Ok(g.sigmoid(logits))
}

/// Intermediate nodes of one ICBAM evaluation.
#[derive(Debug, Clone, Copy)]
pub struct IcbamNodes {
    pub channel_map: Var,
    /// Channel-refined features, `channel_map * I'`.
    pub f_prime: Var,
    /// Sequential output, `spatial(F') * F'`.
    pub f_double_prime: Var,
    /// Parallel channel branch.
    pub lambda: Var,
    /// Parallel spatial branch, `spatial(I') * I'`.
    pub beta: Var,
    pub delta: Var,
    /// `F'' + delta`.
    pub x: Var,
}

/// Sequential channel then spatial attention; returns `(F', F'')`.
fn sequential<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    a: &AttentionIds,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let ch = channel_attention(g, store, a, x)?;
    let f1 = g.mul(x, ch)?;
    let sp = spatial_attention(g, store, a, f1)?;
    let f2 = g.mul(f1, sp)?;
    Ok((ch, f1, f2))
}

fn check_c_prime<T: Element>(g: &Graph<T>, store: &ParamStore<T>, a: &AttentionIds, x: Var) -> Result<()> {
    let expected = store.shape(a.channel_mlp.hidden.weight).h;
    let found = g.shape(x).c;
    if expected != found {
        return Err(TensorError::Dim {
            op: "attention",
            axis: Axis::Channel,
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Upper block: `F' = Channel(I') * I'`, `F'' = Spatial(F') * F'`.
pub fn cbam_forward<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, a: &AttentionIds, x: Var) -> Result<Var> {
    check_c_prime(g, store, a, x)?;
    Ok(sequential(g, store, a, x)?.2)
}

/// Upper plus middle block. With shared parameters the channel branch of the
/// middle block is the same expression as `F'` and is reused.
pub fn icbam_nodes<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, p: &EamParams, x: Var) -> Result<IcbamNodes> {
    check_c_prime(g, store, &p.upper, x)?;
    let (channel_map, f_prime, f_double_prime) = sequential(g, store, &p.upper, x)?;
    let lambda = if p.middle == p.upper {
        f_prime
    } else {
        let ch = channel_attention(g, store, &p.middle, x)?;
        g.mul(x, ch)?
    };
    let sp = spatial_attention(g, store, &p.middle, x)?;
    let beta = g.mul(x, sp)?;
    let delta = g.mul(lambda, beta)?;
    let out = g.add(f_double_prime, delta)?;
    Ok(IcbamNodes {
        channel_map,
        f_prime,
        f_double_prime,
        lambda,
        beta,
        delta,
        x: out,
    })
}

pub fn icbam_forward<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, p: &EamParams, x: Var) -> Result<Var> {
    Ok(icbam_nodes(g, store, p, x)?.x)
}

/// Full module: reduce, attend, then optionally concatenate `[I'; X]`.
pub fn eam_forward<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &EamParams,
    cfg: &EamConfig,
    s: Var,
) -> Result<Var> {
    let reduced = reduce_dim(g, store, p, s)?;
    let attended = match cfg.variant {
        AttentionVariant::Icbam => icbam_forward(g, store, p, reduced)?,
        AttentionVariant::Cbam => cbam_forward(g, store, &p.upper, reduced)?,
    };
    if cfg.include_conv_features {
        g.concat_channels(&[reduced, attended])
    } else {
        Ok(attended)
    }
}
