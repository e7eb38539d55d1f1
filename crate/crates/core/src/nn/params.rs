use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

/// Named traversal over the trainable tensors of a layer or model.
///
/// Traversal order is fixed and defines the flat parameter layout used by the
/// optimizer and by checkpoints. A gradient container is simply a second
/// instance of the same type.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<T: Real, M: Params<T> + ?Sized>(m: &M) -> Vec<(String, &Array2<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn num_params<T: Real, M: Params<T> + ?Sized>(m: &M) -> usize {
    named_params(m).iter().map(|(_, t)| t.len()).sum()
}

pub fn zeros_like<T: Real, M: Params<T> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, t| t.fill(T::zero()));
    z
}

/// `dst += src`, tensor by tensor. Both must share a structure.
pub fn add_assign_params<T: Real, M: Params<T>>(dst: &mut M, src: &M) {
    let src = named_params(src);
    let mut i = 0;
    dst.visit_mut("", &mut |_, t| {
        *t += src[i].1;
        i += 1;
    });
}

/// Copies values between two identically structured models of possibly
/// different precision.
pub trait CastParams<T: Real>: Params<T> {
    fn copy_from<U: Real, M: Params<U>>(&mut self, src: &M) {
        let src = named_params(src);
        let mut i = 0;
        self.visit_mut("", &mut |name, t| {
            let (src_name, s) = &src[i];
            assert_eq!(&name, src_name, "parameter layout mismatch");
            assert_eq!(t.dim(), s.dim(), "parameter shape mismatch for {name}");
            t.zip_mut_with(s, |a, &b| *a = T::from_f64_lossy(b.to_f64_lossy()));
            i += 1;
        });
    }
}

impl<T: Real, M: Params<T>> CastParams<T> for M {}

/// Seeded parameter initializer. Values are drawn in 64-bit and rounded, so a
/// 32-bit and a 64-bit model built from the same seed agree to f32 precision.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `rows x cols` matrix.
    pub fn xavier<T: Real>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || {
            T::from_f64_lossy(self.rng.random_range(-limit..limit))
        })
    }

    pub fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Array2::from_shape_simple_fn((rows, cols), || {
            T::from_f64_lossy(dist.sample(&mut self.rng))
        })
    }

    pub fn zeros<T: Real>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::zeros((rows, cols))
    }

    pub fn ones<T: Real>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::ones((rows, cols))
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}
