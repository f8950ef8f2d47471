use crate::error::{Error, Result};
use crate::numerics::{Conv2d, Ctx, Linear, Module, ParamBuilder, ParamId, SampleNorm, Var};

/// `relu(norm(conv3x3(x))) + skip(x)`, with a 1x1 conv on the skip path when
/// the widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv: Conv2d,
    pub norm: SampleNorm,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, channels: usize) -> Result<Self> {
        Ok(ResBlock {
            conv: Conv2d::new(&mut pb.sub("conv"), in_channels, channels, 3, 1, true)?,
            norm: SampleNorm::new(&mut pb.sub("norm"), channels)?,
            skip: if in_channels != channels {
                Some(Conv2d::new(&mut pb.sub("skip"), in_channels, channels, 1, 0, true)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm.forward(ctx, self.conv.forward(ctx, x)?)?.relu()?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        h.add(skip)
    }
}

impl Module for ResBlock {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
        if let Some(s) = &self.skip {
            s.visit_params(f);
        }
    }
}

/// Residual conv encoder for the masked scan: stem, residual blocks each
/// followed by 2x2 max pooling, global average pooling, linear projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub projection: Linear,
    pub latent_dim: usize,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, levels: usize, latent_dim: usize) -> Result<Self> {
        if channels == 0 || latent_dim == 0 {
            return Err(Error::Config("image encoder widths must be positive".into()));
        }
        let stem = Conv2d::new(&mut pb.sub("stem"), 1, channels, 3, 1, true)?;
        let mut blocks = Vec::with_capacity(levels);
        let mut width = channels;
        for l in 0..levels {
            let out = channels << l;
            blocks.push(ResBlock::new(&mut pb.sub(format!("res{l}")), width, out)?);
            width = out;
        }
        let projection = Linear::new(&mut pb.sub("projection"), width, latent_dim, true)?;
        Ok(ImageEncoder {
            stem,
            blocks,
            projection,
            latent_dim,
        })
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    /// `[N,1,H,W] -> [N,D]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, img: Var<'t>) -> Result<Var<'t>> {
        let shape = img.shape();
        let factor = 1usize << self.levels();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim("encode_image", "axis 1", format!("expected [N,1,H,W], got {shape:?}")));
        }
        if shape[2] % factor != 0 || shape[3] % factor != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::dim(
                "encode_image",
                "axes 2,3",
                format!("H and W must be positive multiples of {factor}, got {}x{}", shape[2], shape[3]),
            ));
        }
        let mut h = self.stem.forward(ctx, img)?;
        for block in &self.blocks {
            h = block.forward(ctx, h)?.max_pool2()?;
        }
        let s = h.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let pooled = h.reshape(&[n, c, hw])?.sum_last()?.scale(1.0 / hw as f64)?;
        self.projection.forward(ctx, pooled)
    }
}

impl Module for ImageEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.stem.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.projection.visit_params(f);
    }
}
