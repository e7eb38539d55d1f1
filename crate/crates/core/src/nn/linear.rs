use ndarray::{Array2, ArrayView2, Axis};

use super::params::join;
use super::{ParamInit, Params, Real};
use crate::error::{Error, Result};

/// Affine map applied row-wise: `y = x W^T + b`, with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(init: &mut ParamInit, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.xavier(d_out, d_in),
            bias: init.zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates weight and bias gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer followed by ReLU.
#[derive(Debug, Clone)]
pub struct FcRelu<T> {
    pub linear: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FcReluCache<T> {
    pub pre_activation: Array2<T>,
}

impl<T: Real> FcRelu<T> {
    pub fn new(init: &mut ParamInit, d_in: usize, d_out: usize) -> Self {
        Self {
            linear: Linear::new(init, d_in, d_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, FcReluCache<T>)> {
        if x.ncols() != self.linear.d_in() {
            return Err(Error::Shape(format!(
                "fc_relu expects {} input features, got {}",
                self.linear.d_in(),
                x.ncols()
            )));
        }
        let pre = self.linear.forward(x);
        let out = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
        Ok((
            out,
            FcReluCache {
                pre_activation: pre,
            },
        ))
    }

    pub fn backward(
        &self,
        x: ArrayView2<T>,
        cache: &FcReluCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let mut d_pre = dy.to_owned();
        d_pre.zip_mut_with(&cache.pre_activation, |g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        self.linear.backward(x, d_pre.view(), &mut grad.linear)
    }
}

impl<T: Real> Params<T> for FcRelu<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.linear.visit_mut(prefix, f);
    }
}
