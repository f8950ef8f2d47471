use super::nn::{Ctx, Linear, Module, ParamBuilder, ParamId};
use super::tape::Var;
use crate::error::{Error, Result};

/// Multi-head self-attention over the spatial positions of `[N,C,H,W]`,
/// with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention2d {
    pub heads: usize,
    pub channels: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(Attention2d {
            heads,
            channels,
            query: Linear::new(&mut pb.sub("query"), channels, channels, true)?,
            key: Linear::new(&mut pb.sub("key"), channels, channels, true)?,
            value: Linear::new(&mut pb.sub("value"), channels, channels, true)?,
            output: Linear::new(&mut pb.sub("output"), channels, channels, true)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(
                "attention2d",
                "axis 1",
                format!("expected [N,{},H,W], got {shape:?}", self.channels),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (tokens, heads) = (h * w, self.heads);
        let d = c / heads;

        let seq = x.permute(&[0, 2, 3, 1])?.reshape(&[n * tokens, c])?;
        let split = |v: Var<'t>| -> Result<Var<'t>> {
            v.reshape(&[n, tokens, heads, d])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n * heads, tokens, d])
        };
        let q = split(self.query.forward(ctx, seq)?)?;
        let k = split(self.key.forward(ctx, seq)?)?;
        let v = split(self.value.forward(ctx, seq)?)?;

        let scores = q.bmm(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
        let attn = scores.softmax()?;
        let mixed = attn
            .bmm(v)?
            .reshape(&[n, heads, tokens, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * tokens, c])?;
        let projected = self
            .output
            .forward(ctx, mixed)?
            .reshape(&[n, h, w, c])?
            .permute(&[0, 3, 1, 2])?;
        x.add(projected)
    }
}

impl Module for Attention2d {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }
}
