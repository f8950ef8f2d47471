use super::layer::KanLayer;
use super::spline::SplineGrid;
use crate::error::{Error, Result};
use crate::numerics::{Attention2d, Conv2d, Ctx, Module, ParamBuilder, ParamId, Var};

/// Padded 3x3 conv, tokenwise KAN layers, ReLU, then spatial self-attention.
#[derive(Clone, Debug)]
pub struct KanBlock {
    pub in_channels: usize,
    pub channels: usize,
    pub conv: Conv2d,
    pub kan: Vec<KanLayer>,
    pub attention: Attention2d,
}

impl KanBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        channels: usize,
        grid: &SplineGrid,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("KAN depth must be at least 1".into()));
        }
        let conv = Conv2d::new(&mut pb.sub("conv"), in_channels, channels, 3, 1, true)?;
        let kan = (0..depth)
            .map(|d| KanLayer::new(&mut pb.sub(format!("kan{d}")), channels, channels, grid.clone()))
            .collect::<Result<_>>()?;
        let attention = Attention2d::new(&mut pb.sub("attention"), channels, heads)?;
        Ok(KanBlock {
            in_channels,
            channels,
            conv,
            kan,
            attention,
        })
    }

    /// Output of the conv, KAN and ReLU stages, before attention.
    pub fn pre_attention<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::dim(
                "kan_block",
                "axis 1",
                format!("expected [N,{},H,W], got {shape:?}", self.in_channels),
            ));
        }
        let (n, h, w, c) = (shape[0], shape[2], shape[3], self.channels);
        let mut tokens = self
            .conv
            .forward(ctx, x)?
            .permute(&[0, 2, 3, 1])?
            .reshape(&[n * h * w, c])?;
        for layer in &self.kan {
            tokens = layer.forward(ctx, tokens)?;
        }
        tokens.relu()?.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let features = self.pre_attention(ctx, x)?;
        self.attention.forward(ctx, features)
    }
}

impl Module for KanBlock {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.conv.visit_params(f);
        for layer in &self.kan {
            layer.visit_params(f);
        }
        self.attention.visit_params(f);
    }
}
