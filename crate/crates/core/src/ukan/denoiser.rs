use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{parse_arch, ArchString, BlockKind};
use super::encoder::ImageEncoder;
use super::geometry::{TumorGeometry, GEOMETRY_FEATURES};
use crate::error::{Error, Result};
use crate::kan::{KanBlock, SplineConfig};
use crate::numerics::{
    count_parameters, BatchNorm2d, Conv2d, Ctx, Linear, Module, ParamBuilder, ParamId, ParamStore, Tensor, Var,
};

/// Network hyperparameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UkanConfig {
    pub arch: ArchString,
    /// Width of the first stage; doubles at every stage.
    pub base_channels: usize,
    /// Dimension of the timestep / condition embedding.
    pub embed_dim: usize,
    pub spline: SplineConfig,
    /// Number of KAN layers composed inside each K block.
    pub kan_depth: usize,
    pub attention_heads: usize,
    pub encoder_channels: usize,
    pub encoder_levels: usize,
}

impl Default for UkanConfig {
    fn default() -> Self {
        UkanConfig {
            arch: parse_arch("CCKKK").expect("default architecture parses"),
            base_channels: 16,
            embed_dim: 128,
            spline: SplineConfig::default(),
            kan_depth: 1,
            attention_heads: 1,
            encoder_channels: 16,
            encoder_levels: 2,
        }
    }
}

impl UkanConfig {
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.arch.stages()).map(|i| self.base_channels << i).collect()
    }

    /// H and W must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.arch.stages().max(self.encoder_levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim must be positive and even, got {}", self.embed_dim)));
        }
        if self.kan_depth == 0 {
            return Err(Error::Config("kan_depth must be at least 1".into()));
        }
        if self.arch.stages() > 12 {
            return Err(Error::Config("at most 12 stages are supported".into()));
        }
        self.spline.grid()?;
        Ok(())
    }
}

/// Two `conv3x3 -> batch norm -> ReLU` layers.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub norm1: BatchNorm2d,
    pub conv2: Conv2d,
    pub norm2: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, channels: usize) -> Result<Self> {
        Ok(ConvBlock {
            conv1: Conv2d::new(&mut pb.sub("conv1"), in_channels, channels, 3, 1, true)?,
            norm1: BatchNorm2d::new(&mut pb.sub("norm1"), channels)?,
            conv2: Conv2d::new(&mut pb.sub("conv2"), channels, channels, 3, 1, true)?,
            norm2: BatchNorm2d::new(&mut pb.sub("norm2"), channels)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu()?;
        self.norm2.forward(ctx, self.conv2.forward(ctx, h)?)?.relu()
    }
}

impl Module for ConvBlock {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
    }
}

#[derive(Clone, Debug)]
pub enum StageBlock {
    Conv(ConvBlock),
    Kan(KanBlock),
}

impl StageBlock {
    fn new(pb: &mut ParamBuilder<'_>, kind: BlockKind, cin: usize, c: usize, cfg: &UkanConfig) -> Result<Self> {
        Ok(match kind {
            BlockKind::Conv => StageBlock::Conv(ConvBlock::new(pb, cin, c)?),
            BlockKind::Kan => StageBlock::Kan(KanBlock::new(
                pb,
                cin,
                c,
                &cfg.spline.grid()?,
                cfg.kan_depth,
                cfg.attention_heads,
            )?),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            StageBlock::Conv(b) => b.forward(ctx, x),
            StageBlock::Kan(b) => b.forward(ctx, x),
        }
    }
}

impl Module for StageBlock {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        match self {
            StageBlock::Conv(b) => b.visit_params(f),
            StageBlock::Kan(b) => b.visit_params(f),
        }
    }
}

/// Conditioning signal on a tape: the encoded masked scan plus per-sample
/// mask geometry.
#[derive(Clone, Debug)]
pub struct Condition<'t> {
    pub image_latent: Var<'t>,
    pub tumor: Vec<TumorGeometry>,
}

impl<'t> Condition<'t> {
    pub fn detach(&self) -> ConditionValue {
        ConditionValue {
            image_latent: (*self.image_latent.value()).clone(),
            tumor: self.tumor.clone(),
        }
    }
}

/// A [`Condition`] detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionValue {
    pub image_latent: Tensor,
    pub tumor: Vec<TumorGeometry>,
}

impl ConditionValue {
    pub fn attach<'t>(&self, ctx: &Ctx<'t>) -> Condition<'t> {
        Condition {
            image_latent: ctx.constant(self.image_latent.clone()),
            tumor: self.tumor.clone(),
        }
    }
}

/// The learned reverse-process predictor `f(x_t, masked_scan, t, c)`.
pub trait Denoiser {
    fn store(&self) -> &ParamStore;

    /// Largest valid timestep.
    fn timesteps(&self) -> usize;

    fn condition<'t>(&self, ctx: &Ctx<'t>, masked_scan: Var<'t>, tumor: &[TumorGeometry]) -> Result<Condition<'t>>;

    /// Prediction of the regression target, `[N,1,H,W]`.
    fn predict<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_t: Var<'t>,
        masked_scan: Var<'t>,
        t: &[usize],
        cond: &Condition<'t>,
    ) -> Result<Var<'t>>;
}

/// Sinusoidal features `[sin(t·f_i) .., cos(t·f_i) ..]` with
/// `f_i = 10000^(-i/(dim/2))`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (n, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            data[n * dim + i] = arg.sin();
            data[n * dim + half + i] = arg.cos();
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
pub struct UkanDenoiser {
    pub config: UkanConfig,
    timesteps: usize,
    store: ParamStore,
    pub time_in: Linear,
    pub time_out: Linear,
    pub tumor_embed: Linear,
    pub latent_proj: Linear,
    pub encoder: ImageEncoder,
    pub down: Vec<StageBlock>,
    pub down_inject: Vec<Linear>,
    pub up: Vec<StageBlock>,
    pub up_inject: Vec<Linear>,
    pub head: Conv2d,
}

impl UkanDenoiser {
    pub fn new(config: UkanConfig, timesteps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = config.embed_dim;
        let widths = config.stage_widths();

        let time_in = Linear::new(&mut pb.sub("time.in"), d, d, true)?;
        let time_out = Linear::new(&mut pb.sub("time.out"), d, d, true)?;
        let tumor_embed = Linear::new(&mut pb.sub("tumor_embed"), GEOMETRY_FEATURES, d, true)?;
        let latent_proj = Linear::new(&mut pb.sub("latent_proj"), d, d, true)?;
        let encoder = ImageEncoder::new(&mut pb.sub("encoder"), config.encoder_channels, config.encoder_levels, d)?;

        let mut down = Vec::new();
        let mut down_inject = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, (&kind, &w)) in config.arch.blocks().iter().zip(&widths).enumerate() {
            down.push(StageBlock::new(&mut pb.sub(format!("down{i}")), kind, cin, w, &config)?);
            down_inject.push(Linear::new(&mut pb.sub(format!("down{i}.inject")), d, w, true)?);
            cin = w;
        }
        let mut up = Vec::new();
        let mut up_inject = Vec::new();
        for (i, (&kind, &w)) in config.arch.blocks().iter().zip(&widths).enumerate() {
            let below = widths.get(i + 1).copied().unwrap_or(w);
            up.push(StageBlock::new(&mut pb.sub(format!("up{i}")), kind, below + w, w, &config)?);
            up_inject.push(Linear::new(&mut pb.sub(format!("up{i}.inject")), d, w, true)?);
        }
        let head = Conv2d::new(&mut pb.sub("head"), widths[0], 1, 1, 0, true)?;

        Ok(UkanDenoiser {
            config,
            timesteps,
            store,
            time_in,
            time_out,
            tumor_embed,
            latent_proj,
            encoder,
            down,
            down_inject,
            up,
            up_inject,
            head,
        })
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.store, self)
    }

    fn check_spatial(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        if shape[2] == 0 || shape[3] == 0 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Config(format!(
                "H and W must be positive multiples of {m} for arch {}, got {}x{}",
                self.config.arch, shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Per-sample embedding `time + tumor + projected image latent`, `[N,D]`.
    pub fn embedding<'t>(&self, ctx: &Ctx<'t>, t: &[usize], cond: &Condition<'t>) -> Result<Var<'t>> {
        let n = t.len();
        let d = self.config.embed_dim;
        let time = self.time_out.forward(
            ctx,
            self.time_in
                .forward(ctx, ctx.constant(timestep_embedding(t, d)))?
                .silu()?,
        )?;
        let features: Vec<f64> = cond.tumor.iter().flat_map(|g| g.features()).collect();
        let geometry = ctx.constant(Tensor::new(vec![n, GEOMETRY_FEATURES], features)?);
        let tumor = self.tumor_embed.forward(ctx, geometry)?;
        let latent = self.latent_proj.forward(ctx, cond.image_latent)?;
        time.add(tumor)?.add(latent)
    }
}

/// Channels fed to the first stage: `x_t`, the masked scan and the region map.
pub const INPUT_CHANNELS: usize = 3;

/// `[N,1,H,W]` indicator of each sample's geometry bounding box; all zeros
/// for the empty sentinel.
pub fn region_map(tumor: &[TumorGeometry], h: usize, w: usize) -> Tensor {
    let (sx, sy) = ((w.max(2) - 1) as f64, (h.max(2) - 1) as f64);
    let plane = h * w;
    Tensor::from_fn(vec![tumor.len(), 1, h, w], |i| {
        let g = &tumor[i / plane];
        let (y, x) = ((i % plane) / w, i % w);
        let [x0, y0, x1, y1] = g.bbox;
        let (fx, fy) = (x as f64 / sx, y as f64 / sy);
        let inside = !g.is_empty() && fx >= x0 - 1e-9 && fx <= x1 + 1e-9 && fy >= y0 - 1e-9 && fy <= y1 + 1e-9;
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

impl Denoiser for UkanDenoiser {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn condition<'t>(&self, ctx: &Ctx<'t>, masked_scan: Var<'t>, tumor: &[TumorGeometry]) -> Result<Condition<'t>> {
        let shape = masked_scan.shape();
        if shape.len() != 4 || shape[0] != tumor.len() {
            return Err(Error::dim(
                "condition",
                "axis 0",
                format!("masked scan {shape:?} with {} geometries", tumor.len()),
            ));
        }
        Ok(Condition {
            image_latent: self.encoder.forward(ctx, masked_scan)?,
            tumor: tumor.to_vec(),
        })
    }

    fn predict<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_t: Var<'t>,
        masked_scan: Var<'t>,
        t: &[usize],
        cond: &Condition<'t>,
    ) -> Result<Var<'t>> {
        let shape = x_t.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim("denoise", "axis 1", format!("expected [N,1,H,W], got {shape:?}")));
        }
        if masked_scan.shape() != shape {
            return Err(Error::dim(
                "denoise",
                "all",
                format!("x_t {shape:?} vs masked scan {:?}", masked_scan.shape()),
            ));
        }
        let n = shape[0];
        if t.len() != n || cond.tumor.len() != n || cond.image_latent.shape() != [n, self.config.embed_dim] {
            return Err(Error::dim("denoise", "axis 0", "batch sizes of x_t, t and condition differ"));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.timesteps) {
            return Err(Error::contract(
                "denoise",
                format!("timestep {bad} outside [1, {}]", self.timesteps),
            ));
        }
        self.check_spatial(&shape)?;

        let act = self.embedding(ctx, t, cond)?.silu()?;
        let region = ctx.constant(region_map(&cond.tumor, shape[2], shape[3]));
        let mut h = ctx.tape().concat(&[x_t, masked_scan, region], 1)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, inject) in self.down.iter().zip(&self.down_inject) {
            h = block.forward(ctx, h)?.add_channel(inject.forward(ctx, act)?)?;
            skips.push(h);
            h = h.max_pool2()?;
        }
        for i in (0..self.up.len()).rev() {
            h = ctx.tape().concat(&[h.upsample2()?, skips[i]], 1)?;
            h = self.up[i].forward(ctx, h)?.add_channel(self.up_inject[i].forward(ctx, act)?)?;
        }
        self.head.forward(ctx, h)
    }
}

impl Module for UkanDenoiser {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.time_in.visit_params(f);
        self.time_out.visit_params(f);
        self.tumor_embed.visit_params(f);
        self.latent_proj.visit_params(f);
        self.encoder.visit_params(f);
        for (b, l) in self.down.iter().zip(&self.down_inject) {
            b.visit_params(f);
            l.visit_params(f);
        }
        for (b, l) in self.up.iter().zip(&self.up_inject) {
            b.visit_params(f);
            l.visit_params(f);
        }
        self.head.visit_params(f);
    }
}
