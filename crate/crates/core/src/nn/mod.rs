//! Dense primitives with hand-written backward passes.
//!
//! Every layer exposes `forward`, returning its output together with the
//! cache needed by `backward`, and `backward`, which accumulates parameter
//! gradients into a same-shaped gradient container and returns the input
//! gradient. All layers are generic over [`Real`] so the 64-bit path can be
//! checked against finite differences while training runs in 32-bit.

mod attention;
mod gradcheck;
mod layer_norm;
mod linear;
pub(crate) mod ops;
pub(crate) mod params;
mod transformer;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use attention::{MultiHeadAttention, MultiHeadAttentionCache};
pub use gradcheck::{fd_resolution, grad_check, grad_check_params, relative_error};
pub use layer_norm::{LayerNorm, LayerNormCache};
pub use linear::{FcRelu, FcReluCache, Linear};
pub use ops::{
    attention_pool, attention_pool_backward, axpy, cosine, cosine_backward, dot, norm, softmax,
    softmax_backward, zero_norm_events, AttentionPoolCache,
};
pub use params::{
    add_assign_params, named_params, num_params, zeros_like, CastParams, ParamInit, Params,
};
pub use transformer::{
    FeedForward, FeedForwardCache, SeqEncoder, SeqEncoderCache, TransformerLayer,
    TransformerLayerCache, TransformerLayerConfig,
};

/// Floating-point element type for every tensor in the model.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 always converts to a float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float always converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
