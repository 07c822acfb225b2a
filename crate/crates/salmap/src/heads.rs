//! Prediction heads: 3x3 conv to one channel, bilinear upsample to the
//! input size, sigmoid. The level-2 head is the model's final output; the
//! deeper heads exist for deep supervision.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ParamStore, Session};
use crate::tape::Var;

pub struct Head {
    conv: Conv2d,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
    ) -> Self {
        Head {
            conv: Conv2d::new(store, rng, name, in_c, 1, 3, 1),
        }
    }

    /// Logits -> upsample -> sigmoid, in that order.
    pub fn forward(&self, s: &Session, x: Var, out_size: (usize, usize)) -> Result<Var> {
        let logits = self.conv.forward(s, x)?;
        let up = s.tape.upsample_bilinear(logits, out_size.0, out_size.1)?;
        Ok(s.tape.sigmoid(up))
    }
}
