//! Feature enhancement: learned per-pixel affine gating.
//!
//! A refine block produces `f'`, a plain 3x3 conv doubles the channels, the
//! result splits into a multiplicative map `w` (first half) and an additive
//! map `b` (second half), and the output is `relu(w * f' + b)`. Fixes the
//! "holes" left by fusing features from many depths.

use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::nn::{Conv2d, ConvBnRelu, ParamStore, Session};
use crate::tape::Var;

pub struct FeModule {
    pub width: usize,
    refine: ConvBnRelu,
    split: Conv2d,
}

impl FeModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        bn_momentum: f64,
        bn_eps: f64,
        bypass_norm: bool,
    ) -> Result<Self> {
        if width == 0 {
            return Err(config_err("fe width must be positive"));
        }
        let refine = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.refine"),
            width,
            width,
            1,
            bn_momentum,
            bn_eps,
            bypass_norm,
        );
        // plain conv: the splitting layer carries no norm or activation
        let split = Conv2d::new(store, rng, &format!("{name}.split"), width, 2 * width, 3, 1);
        Ok(FeModule {
            width,
            refine,
            split,
        })
    }

    /// Parameter ids of the splitting conv, for tests that force the gate.
    pub fn split_params(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.split.weight, self.split.bias)
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape[1] != self.width {
            return Err(crate::error::shape_err(format!(
                "fe expects {} channels, got {}",
                self.width, shape[1]
            )));
        }
        let refined = self.refine.forward(s, x)?;
        let wb = self.split.forward(s, refined)?;
        let gain = s.tape.slice_c(wb, 0, self.width)?;
        let shift = s.tape.slice_c(wb, self.width, 2 * self.width)?;
        let gated = s.tape.add(s.tape.mul(gain, refined)?, shift)?;
        Ok(s.tape.relu(gated))
    }
}
