use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, Tensor, Var};

/// Uniform B-spline grid over `[range_min, range_max]` with `order` padding
/// knots on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    range_min: f64,
    range_max: f64,
    num_intervals: usize,
    order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(range_min: f64, range_max: f64, num_intervals: usize, order: usize) -> Result<Self> {
        if !(range_min.is_finite() && range_max.is_finite() && range_min < range_max) {
            return Err(Error::Config(format!(
                "spline range must satisfy min < max, got [{range_min}, {range_max}]"
            )));
        }
        if num_intervals == 0 {
            return Err(Error::Config("spline grid size must be at least 1".into()));
        }
        if order == 0 {
            return Err(Error::Config("spline order must be at least 1".into()));
        }
        let h = (range_max - range_min) / num_intervals as f64;
        let knots = (0..num_intervals + 2 * order + 1)
            .map(|i| range_min + (i as f64 - order as f64) * h)
            .collect();
        Ok(SplineGrid {
            range_min,
            range_max,
            num_intervals,
            order,
            knots,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_min, self.range_max)
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot spacing.
    pub fn step(&self) -> f64 {
        (self.range_max - self.range_min) / self.num_intervals as f64
    }

    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.num_intervals + self.order
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.range_min, self.range_max)
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`, limited to the spans inside
    /// the range so `x = range_max` uses the last interior interval.
    fn span(&self, x: f64) -> usize {
        let k = self.order;
        let rel = ((x - self.range_min) / self.step()).floor();
        let idx = if rel.is_nan() || rel < 0.0 { 0 } else { rel as usize };
        idx.min(self.num_intervals - 1) + k
    }

    /// Nonzero basis values at `x` (after clamping). Writes the `k + 1`
    /// values `B_{s-k..=s}` into `out` and the degree `k - 1` values
    /// `B_{s-k+1..=s}` into `lower`, returning `s - k`.
    fn local(&self, x: f64, out: &mut [f64], lower: &mut [f64]) -> usize {
        let k = self.order;
        let t = &self.knots;
        let x = self.clamp(x);
        let s = self.span(x);
        let mut left = vec![0.0; k + 1];
        let mut right = vec![0.0; k + 1];
        out[0] = 1.0;
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&out[..k]);
            }
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        s - k
    }

    /// All `G + k` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut full = vec![0.0; self.num_basis()];
        self.basis_into(x, &mut full, None);
        full
    }

    /// Fill `values` (length `G + k`) with the basis at `x`, and optionally
    /// `deriv` with `dB_j/dx`. The derivative is zero outside the range,
    /// where the input is clamped.
    pub fn basis_into(&self, x: f64, values: &mut [f64], deriv: Option<&mut [f64]>) {
        let k = self.order;
        let mut local = vec![0.0; k + 1];
        let mut lower = vec![0.0; k];
        let first = self.local(x, &mut local, &mut lower);
        values.iter_mut().for_each(|v| *v = 0.0);
        values[first..first + k + 1].copy_from_slice(&local);
        if let Some(deriv) = deriv {
            deriv.iter_mut().for_each(|v| *v = 0.0);
            if x < self.range_min || x > self.range_max {
                return;
            }
            // B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h on a uniform grid;
            // the lower-degree values live at indices first+1 ..= first+k.
            let h = self.step();
            let lower_at = |i: usize| {
                if i > first && i <= first + k {
                    lower[i - first - 1]
                } else {
                    0.0
                }
            };
            for i in first..=first + k {
                deriv[i] = (lower_at(i) - lower_at(i + 1)) / h;
            }
        }
    }
}

struct BasisBackward {
    grid: SplineGrid,
}

impl CustomBackward for BasisBackward {
    fn name(&self) -> &'static str {
        "bspline_basis"
    }

    fn vjp(&self, input: &Tensor, _output: &Tensor, grad_output: &[f64], grad_input: &mut [f64]) {
        let nb = self.grid.num_basis();
        let mut values = vec![0.0; nb];
        let mut deriv = vec![0.0; nb];
        for (i, &x) in input.data().iter().enumerate() {
            self.grid.basis_into(x, &mut values, Some(&mut deriv));
            let g = &grad_output[i * nb..(i + 1) * nb];
            grad_input[i] += g.iter().zip(&deriv).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Basis values for every element of `x`: shape `[..., G + k]`.
pub fn bspline_basis(x: &Tensor, grid: &SplineGrid) -> Tensor {
    let nb = grid.num_basis();
    let mut data = vec![0.0; x.numel() * nb];
    for (i, &v) in x.data().iter().enumerate() {
        grid.basis_into(v, &mut data[i * nb..(i + 1) * nb], None);
    }
    let mut shape = x.shape().to_vec();
    shape.push(nb);
    Tensor::new(shape, data).expect("basis shape is consistent by construction")
}

/// Differentiable [`bspline_basis`] recorded on `x`'s tape.
pub fn bspline_basis_var<'t>(x: Var<'t>, grid: &SplineGrid) -> Result<Var<'t>> {
    let out = bspline_basis(&x.value(), grid);
    x.custom_unary(out, Box::new(BasisBackward { grid: grid.clone() }))
}
