//! Five-level convolutional encoder with a fixed stride contract.
//!
//! For any input whose sides divide by 32 the pyramid strides are
//! 4, 8, 16, 32, 32: the fifth level is an extra stride-32 stage on top of
//! the fourth, so the two deepest maps share their spatial size. Anything
//! honoring [`PyramidBackbone`] can replace the built-in encoder without
//! touching the fusion stages.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{ConvBnRelu, ParamStore, Session};
use crate::tape::Var;

/// Validated network input: `[N, 3, H, W]` with values in `[0,1]` and both
/// sides divisible by 32.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    data: Array4<f64>,
}

impl ImageTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(shape_err(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err(format!(
                "image sides must be positive multiples of 32, got {h}x{w}"
            )));
        }
        let data = data.mapv(|v| v.clamp(0.0, 1.0));
        Ok(ImageTensor { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }
}

/// The encoder's five feature maps plus their shape metadata.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Array4<f64>; 5],
    pub channels: [usize; 5],
    pub input_size: (usize, usize),
}

pub const LEVEL_STRIDES: [usize; 5] = [4, 8, 16, 32, 32];

impl FeaturePyramid {
    /// The four deeper levels; the first level never reaches the decoder.
    pub fn levels_for_decoder(&self) -> (&Array4<f64>, &Array4<f64>, &Array4<f64>, &Array4<f64>) {
        (
            &self.levels[1],
            &self.levels[2],
            &self.levels[3],
            &self.levels[4],
        )
    }

    pub fn spatial(&self, level: usize) -> (usize, usize) {
        let d = self.levels[level].dim();
        (d.2, d.3)
    }
}

/// Anything that produces the five-level pyramid with the stride contract.
pub trait PyramidBackbone {
    fn channels(&self) -> [usize; 5];
    /// Tape-level forward; `image` must already be a validated input leaf.
    fn forward(&self, s: &Session, image: Var) -> Result<[Var; 5]>;
}

/// Small strided convolutional encoder. Each of the first four stages halves
/// resolution (the stem twice); the fifth stage keeps stride 32.
pub struct ConvBackbone {
    channels: [usize; 5],
    stem_a: ConvBnRelu,
    stem_b: ConvBnRelu,
    stages: Vec<(ConvBnRelu, ConvBnRelu)>, // stage 2..4: downsample + refine
    top_a: ConvBnRelu,
    top_b: ConvBnRelu,
}

impl ConvBackbone {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ch = cfg.backbone_channels;
        let bn = (cfg.bn_momentum, cfg.bn_eps, cfg.bypass_norm);
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ic, oc, stride| {
            ConvBnRelu::new(store, rng, name, ic, oc, stride, bn.0, bn.1, bn.2)
        };

        let stem_a = block(store, rng, "backbone.stem.a", 3, ch[0], 2);
        let stem_b = block(store, rng, "backbone.stem.b", ch[0], ch[0], 2);
        let mut stages = Vec::new();
        for i in 1..4 {
            let down = block(
                store,
                rng,
                &format!("backbone.stage{}.down", i + 1),
                ch[i - 1],
                ch[i],
                2,
            );
            let refine = block(
                store,
                rng,
                &format!("backbone.stage{}.refine", i + 1),
                ch[i],
                ch[i],
                1,
            );
            stages.push((down, refine));
        }
        let top_a = block(store, rng, "backbone.stage5.a", ch[3], ch[4], 1);
        let top_b = block(store, rng, "backbone.stage5.b", ch[4], ch[4], 1);

        ConvBackbone {
            channels: ch,
            stem_a,
            stem_b,
            stages,
            top_a,
            top_b,
        }
    }

    /// Run the encoder on a validated image and materialize the pyramid.
    pub fn encode(&self, store: &ParamStore, image: &ImageTensor) -> Result<FeaturePyramid> {
        let s = Session::new(store, false);
        let input = s.input(image.data().clone());
        let vars = self.forward(&s, input)?;
        let levels = [
            (*s.tape.value(vars[0])).clone(),
            (*s.tape.value(vars[1])).clone(),
            (*s.tape.value(vars[2])).clone(),
            (*s.tape.value(vars[3])).clone(),
            (*s.tape.value(vars[4])).clone(),
        ];
        let (_, _, h, w) = image.data().dim();
        Ok(FeaturePyramid {
            levels,
            channels: self.channels,
            input_size: (h, w),
        })
    }
}

impl PyramidBackbone for ConvBackbone {
    fn channels(&self) -> [usize; 5] {
        self.channels
    }

    fn forward(&self, s: &Session, image: Var) -> Result<[Var; 5]> {
        let shape = s.tape.shape(image);
        if shape[1] != 3 {
            return Err(shape_err(format!(
                "backbone expects 3 input channels, got {}",
                shape[1]
            )));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(shape_err(format!(
                "backbone input sides must be positive multiples of 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let bf1 = self.stem_b.forward(s, self.stem_a.forward(s, image)?)?;
        let mut cur = bf1;
        let mut deeper = Vec::with_capacity(3);
        for (down, refine) in &self.stages {
            cur = refine.forward(s, down.forward(s, cur)?)?;
            deeper.push(cur);
        }
        let bf5 = self.top_b.forward(s, self.top_a.forward(s, deeper[2])?)?;
        Ok([bf1, deeper[0], deeper[1], deeper[2], bf5])
    }
}
