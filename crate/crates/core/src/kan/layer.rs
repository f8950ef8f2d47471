use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spline::{bspline_basis_var, SplineGrid};
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Module, ParamBuilder, ParamId, Tensor, Var};

/// Spline hyperparameters shared by every KAN layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    pub grid_size: usize,
    pub order: usize,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            grid_size: 5,
            order: 3,
            range_min: -1.0,
            range_max: 1.0,
        }
    }
}

impl SplineConfig {
    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(self.range_min, self.range_max, self.grid_size, self.order)
    }
}

/// One layer of learnable edge activations:
/// `out[b,o] = Σ_i base[o,i]·silu(x[b,i]) + scale[o,i]·Σ_j coeffs[o,i,j]·B_j(x[b,i])`.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub grid: SplineGrid,
    pub spline_coeffs: ParamId,
    pub base_weight: ParamId,
    pub spline_scale: ParamId,
}

impl KanLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, in_features: usize, out_features: usize, grid: SplineGrid) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config("KAN layer needs at least one input and output".into()));
        }
        let nb = grid.num_basis();
        let fan = (in_features as f64).sqrt();
        let std = 0.1 / (nb as f64).sqrt().sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let coeffs = {
            let rng = pb.rng();
            Tensor::from_fn(vec![out_features, in_features, nb], |_| normal.sample(rng))
        };
        let spline_coeffs = pb.param("spline_coeffs", coeffs)?;
        let base_weight = pb.uniform("base_weight", vec![out_features, in_features], 1.0 / fan)?;
        let spline_scale = pb.param("spline_scale", Tensor::full(vec![out_features, in_features], 1.0 / fan))?;
        Ok(KanLayer {
            in_features,
            out_features,
            grid,
            spline_coeffs,
            base_weight,
            spline_scale,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::dim(
                "kan_layer",
                "axis 1",
                format!("expected [B,{}], got {shape:?}", self.in_features),
            ));
        }
        let (b, i, o, nb) = (shape[0], self.in_features, self.out_features, self.grid.num_basis());

        let base_w = ctx.param(self.base_weight).transpose()?;
        let base = x.silu()?.matmul(base_w)?;

        let basis = bspline_basis_var(x, &self.grid)?.reshape(&[b, i * nb])?;
        let scale = ctx.param(self.spline_scale).reshape(&[o * i])?;
        let weights = ctx
            .param(self.spline_coeffs)
            .reshape(&[1, o * i, nb])?
            .mul_channel(scale)?
            .reshape(&[o, i * nb])?
            .transpose()?;
        let spline = basis.matmul(weights)?;
        base.add(spline)
    }
}

impl Module for KanLayer {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.spline_coeffs);
        f(self.base_weight);
        f(self.spline_scale);
    }
}
