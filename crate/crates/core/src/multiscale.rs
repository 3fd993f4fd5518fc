//! Backbone stage taps, atrous spatial pyramid pooling, global average
//! pooling and four-level concatenation fusion feeding a linear classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{eam_forward, AttentionVariant, EamConfig, EamParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvIds, LinearIds};
use crate::ops::{self, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor4};

/// Number of tapped backbone levels (stages 2 through 5).
pub const LEVELS: usize = 4;

/// `(kernel, dilation)` of the four ASPP branches.
pub const ASPP_BRANCHES: [(usize, usize); 4] = [(1, 1), (3, 6), (3, 12), (3, 18)];

/// Which components sit between each tap and global average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Gap,
    AsppGap,
    EamGap,
    EamAsppGap,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Gap, Strategy::AsppGap, Strategy::EamGap, Strategy::EamAsppGap];

    pub fn uses_eam(self) -> bool {
        matches!(self, Strategy::EamGap | Strategy::EamAsppGap)
    }

    pub fn uses_aspp(self) -> bool {
        matches!(self, Strategy::AsppGap | Strategy::EamAsppGap)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Gap => "gap",
            Strategy::AsppGap => "aspp+gap",
            Strategy::EamGap => "eam+gap",
            Strategy::EamAsppGap => "eam+aspp+gap",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected gap, aspp+gap, eam+gap or eam+aspp+gap)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Channels of stages 2..=5; each doubles the previous.
    pub stage_channels: [usize; LEVELS],
}

impl BackboneConfig {
    /// Stage widths `[c2, 2c2, 4c2, 8c2]` with a stem of `c2 / 2`.
    pub fn doubling(c2: usize) -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: (c2 / 2).max(1),
            stage_channels: [c2, 2 * c2, 4 * c2, 8 * c2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if self.in_channels == 0 || self.stem_channels == 0 || c[0] == 0 {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if c.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("stage channels {c:?} must double from stage to stage")));
        }
        Ok(())
    }
}

/// Stem (3x3 conv + ReLU + 2x2 max pool) followed by four stages of two 3x3
/// convs, the first with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneParams {
    pub stem: ConvIds,
    pub stages: [[ConvIds; 2]; LEVELS],
}

impl BackboneParams {
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvIds::register(
            store,
            "backbone.stem",
            cfg.in_channels,
            cfg.stem_channels,
            3,
            ConvGeometry::new(1, 1, 1),
            2.0,
            rng,
        )?;
        let mut prev = cfg.stem_channels;
        let mut stages = Vec::with_capacity(LEVELS);
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 2);
            let a = ConvIds::register(store, &format!("{name}.conv1"), prev, c, 3, ConvGeometry::new(2, 1, 1), 2.0, rng)?;
            let b = ConvIds::register(store, &format!("{name}.conv2"), c, c, 3, ConvGeometry::new(1, 1, 1), 2.0, rng)?;
            stages.push([a, b]);
            prev = c;
        }
        Ok(BackboneParams {
            stem,
            stages: stages.try_into().expect("four stages"),
        })
    }
}

/// Checks the `/32` divisibility that the tap geometry needs.
pub fn check_extent(h: usize, w: usize) -> Result<()> {
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("input extent {h}x{w} must be a positive multiple of 32")));
    }
    Ok(())
}

/// Returns the taps `[S2, S3, S4, S5]` at `/4, /8, /16, /32` resolution.
pub fn backbone_forward<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BackboneParams,
    image: Var,
) -> Result<[Var; LEVELS]> {
    let s = g.shape(image);
    check_extent(s.h, s.w)?;
    let x = p.stem.apply(g, store, image)?;
    let x = g.relu(x);
    let mut x = g.max_pool2(x)?;
    let mut taps = Vec::with_capacity(LEVELS);
    for [a, b] in &p.stages {
        let y = a.apply(g, store, x)?;
        let y = g.relu(y);
        let y = b.apply(g, store, y)?;
        x = g.relu(y);
        taps.push(x);
    }
    Ok(taps.try_into().expect("four taps"))
}

/// Dilation actually used at a given feature-map extent: when the dilated
/// 3x3 kernel (`2d + 1`) is wider than the map, it is clamped to
/// `floor((extent - 1) / 2)`, but never below 1.
pub fn effective_dilation(dilation: usize, extent: usize) -> usize {
    if 2 * dilation + 1 > extent {
        (extent.saturating_sub(1) / 2).max(1)
    } else {
        dilation
    }
}

/// Four parallel branches concatenated and projected by a 1x1 conv + ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsppParams {
    pub branches: [ConvIds; 4],
    pub projection: ConvIds,
}

impl AsppParams {
    /// `extent` is the smaller spatial side of the feature map the block will
    /// see; it decides dilation clamping.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        branch_width: usize,
        out_channels: usize,
        extent: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(4);
        for (i, &(k, d)) in ASPP_BRANCHES.iter().enumerate() {
            let eff = if k == 1 { 1 } else { effective_dilation(d, extent) };
            if eff != d {
                log::info!("{prefix}: branch {i} dilation {d} clamped to {eff} at extent {extent}");
            }
            branches.push(ConvIds::register(
                store,
                &format!("{prefix}.branch{i}"),
                in_channels,
                branch_width,
                k,
                ConvGeometry::same(k, eff),
                1.0,
                rng,
            )?);
        }
        let projection = ConvIds::register(
            store,
            &format!("{prefix}.proj"),
            4 * branch_width,
            out_channels,
            1,
            ConvGeometry::new(1, 0, 1),
            2.0,
            rng,
        )?;
        Ok(AsppParams {
            branches: branches.try_into().expect("four branches"),
            projection,
        })
    }

    pub fn dilations(&self) -> [usize; 4] {
        self.branches.map(|b| b.geometry.dilation)
    }
}

pub fn aspp_forward<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, p: &AsppParams, x: Var) -> Result<Var> {
    let mut outs = Vec::with_capacity(4);
    for b in &p.branches {
        outs.push(b.apply(g, store, x)?);
    }
    let cat = g.concat_channels(&outs)?;
    let proj = p.projection.apply(g, store, cat)?;
    Ok(g.relu(proj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input side; a multiple of 32.
    pub image_extent: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub eam: EamConfig,
    pub strategy: Strategy,
    pub aspp_branch_width: usize,
    pub aspp_out: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: stages `[16, 32, 64, 128]`, `C' = 64`, ASPP
    /// width `2C'`, full EAM+ASPP+GAP pipeline.
    pub fn desk(num_classes: usize, image_extent: usize) -> Self {
        Self::with_widths(num_classes, image_extent, 16, 64)
    }

    pub fn with_widths(num_classes: usize, image_extent: usize, c2: usize, c_prime: usize) -> Self {
        ModelConfig {
            image_extent,
            num_classes,
            backbone: BackboneConfig::doubling(c2),
            eam: EamConfig::new(c_prime),
            strategy: Strategy::EamAsppGap,
            aspp_branch_width: 2 * c_prime,
            aspp_out: 2 * c_prime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_extent(self.image_extent, self.image_extent)?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.aspp_branch_width == 0 || self.aspp_out == 0 {
            return Err(Error::Config("ASPP widths must be positive".into()));
        }
        self.backbone.validate()?;
        self.eam.validate()
    }

    /// Spatial side of tap `level` (0 for S2 .. 3 for S5).
    pub fn level_extent(&self, level: usize) -> usize {
        self.image_extent >> (level + 2)
    }

    /// Channels entering GAP at each level.
    pub fn level_widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| {
            if self.strategy.uses_aspp() {
                self.aspp_out
            } else if self.strategy.uses_eam() {
                self.eam.output_channels()
            } else {
                self.backbone.stage_channels[i]
            }
        })
    }

    /// Length of the fused vector `[G2; G3; G4; G5]`.
    pub fn fused_width(&self) -> usize {
        self.level_widths().iter().sum()
    }

    /// Serializes as `key=value` lines.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let e = &self.eam;
        let c = b.stage_channels;
        format!(
            "image_extent={}\nnum_classes={}\nin_channels={}\nstem_channels={}\nstage_channels={},{},{},{}\n\
             c_prime={}\nmlp_reduction_r={}\nvariant={}\ninclude_conv_features={}\nshare_attention={}\n\
             strategy={}\naspp_branch_width={}\naspp_out={}\n",
            self.image_extent,
            self.num_classes,
            b.in_channels,
            b.stem_channels,
            c[0],
            c[1],
            c[2],
            c[3],
            e.c_prime,
            e.mlp_reduction_r,
            e.variant,
            e.include_conv_features,
            e.share_attention,
            self.strategy,
            self.aspp_branch_width,
            self.aspp_out
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line `{line}`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Config(format!("missing config key `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("bad value for `{k}`"))) };
        let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| Error::Config(format!("bad value for `{k}`"))) };
        let stages: Vec<usize> = get("stage_channels")?
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("bad value for `stage_channels`".into()))?;
        let stage_channels: [usize; LEVELS] = stages
            .try_into()
            .map_err(|_| Error::Config("`stage_channels` needs four values".into()))?;
        let cfg = ModelConfig {
            image_extent: num("image_extent")?,
            num_classes: num("num_classes")?,
            backbone: BackboneConfig {
                in_channels: num("in_channels")?,
                stem_channels: num("stem_channels")?,
                stage_channels,
            },
            eam: EamConfig {
                c_prime: num("c_prime")?,
                mlp_reduction_r: num("mlp_reduction_r")?,
                variant: get("variant")?.parse::<AttentionVariant>()?,
                include_conv_features: flag("include_conv_features")?,
                share_attention: flag("share_attention")?,
            },
            strategy: get("strategy")?.parse()?,
            aspp_branch_width: num("aspp_branch_width")?,
            aspp_out: num("aspp_out")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelParams {
    pub eam: Option<EamParams>,
    pub aspp: Option<AsppParams>,
}

/// Parameter handles of the whole classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub levels: [LevelParams; LEVELS],
    pub head: LinearIds,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    /// Backbone taps `S2..S5`.
    pub taps: [Var; LEVELS],
    /// Per-level features entering ASPP (the EAM output when EAM is used,
    /// otherwise the tap). Grad-CAM targets these.
    pub enriched: [Var; LEVELS],
    /// Per-level GAP vectors `G2..G5`, shape `(n, width, 1, 1)`.
    pub pooled: [Var; LEVELS],
    pub fused: Var,
}

impl Model {
    /// Registers all parameters in a fixed order. The classifier starts at
    /// zero so the initial prediction is uniform.
    pub fn new<T: Element, R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::register(store, &config.backbone, rng)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let prefix = format!("level{}", i + 2);
            let tap_channels = config.backbone.stage_channels[i];
            let eam = if config.strategy.uses_eam() {
                Some(EamParams::register(store, &format!("{prefix}.eam"), tap_channels, &config.eam, rng)?)
            } else {
                None
            };
            let aspp = if config.strategy.uses_aspp() {
                let cin = if eam.is_some() { config.eam.output_channels() } else { tap_channels };
                Some(AsppParams::register(
                    store,
                    &format!("{prefix}.aspp"),
                    cin,
                    config.aspp_branch_width,
                    config.aspp_out,
                    config.level_extent(i),
                    rng,
                )?)
            } else {
                None
            };
            levels.push(LevelParams { eam, aspp });
        }
        let head = LinearIds::register(store, "head", config.fused_width(), config.num_classes, 0.0, rng)?;
        Ok(Model {
            config,
            backbone,
            levels: levels.try_into().expect("four levels"),
            head,
        })
    }

    /// Per level `G_i = GAP(ASPP(EAM(S_i)))` with components per strategy,
    /// `F = [G2; G3; G4; G5]`, then the linear classifier.
    pub fn fuse_and_classify<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        taps: [Var; LEVELS],
    ) -> Result<([Var; LEVELS], [Var; LEVELS], Var, Var)> {
        let mut enriched = taps;
        let mut pooled = taps;
        for (i, level) in self.levels.iter().enumerate() {
            let mut x = taps[i];
            if let Some(eam) = &level.eam {
                x = eam_forward(g, store, eam, &self.config.eam, x)?;
            }
            enriched[i] = x;
            if let Some(aspp) = &level.aspp {
                x = aspp_forward(g, store, aspp, x)?;
            }
            pooled[i] = g.channel_pool_avg(x);
        }
        let fused = g.concat_channels(&pooled)?;
        let width = g.shape(fused).c;
        let expected = store.shape(self.head.weight).h;
        if width != expected {
            return Err(Error::Config(format!(
                "fused width {width} does not match classifier input width {expected}"
            )));
        }
        let logits = self.head.apply(g, store, fused)?;
        Ok((enriched, pooled, fused, logits))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<ModelOutput> {
        let taps = backbone_forward(g, store, &self.backbone, image)?;
        let (enriched, pooled, fused, logits) = self.fuse_and_classify(g, store, taps)?;
        Ok(ModelOutput {
            logits,
            taps,
            enriched,
            pooled,
            fused,
        })
    }

    /// Inference on a batch: logits as `(n, K, 1, 1)`.
    pub fn logits<T: Element>(&self, store: &ParamStore<T>, images: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, store, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Class probabilities for a batch.
    pub fn predict_proba<T: Element>(&self, store: &ParamStore<T>, images: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(ops::softmax_rows(&self.logits(store, images)?)?)
    }

    pub fn predict<T: Element>(&self, store: &ParamStore<T>, images: &Tensor4<T>) -> Result<Vec<usize>> {
        Ok(ops::argmax_rows(&self.logits(store, images)?))
    }
}
