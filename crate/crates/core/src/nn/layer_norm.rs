use ndarray::{Array2, ArrayView2, Axis};

use super::params::join;
use super::{ParamInit, Params, Real};

const EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(init: &mut ParamInit, d: usize) -> Self {
        Self {
            gamma: init.ones(1, d),
            beta: init.zeros(1, d),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::from_f64_lossy(EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        grad.gamma += &(&dy * &cache.normalized)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));

        let d = T::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.gamma;
        for ((mut row, xhat), &inv) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.normalized.axis_iter(Axis(0)))
            .zip(&cache.inv_std)
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xhat) / d;
            row.zip_mut_with(&xhat, |g, &xh| *g = inv * (*g - mean_g - xh * mean_gx));
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
