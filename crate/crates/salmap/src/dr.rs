//! Diverse reception: multi-kernel max-pool context enrichment.
//!
//! Each pyramid level is pooled with several kernel sizes (stride 1, zero
//! padding, so spatial size is preserved), the pooled maps are concatenated
//! with the raw input, and a 3x3 conv + norm + relu compresses the stack to
//! the shared working width.

use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::nn::{ConvBnRelu, ParamStore, Session};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct DrConfig {
    pub kernel_sizes: Vec<usize>,
    pub out_channels: usize,
}

impl Default for DrConfig {
    fn default() -> Self {
        DrConfig {
            kernel_sizes: vec![3, 7, 11],
            out_channels: 64,
        }
    }
}

impl DrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(config_err("dr out_channels must be positive"));
        }
        if self.kernel_sizes.is_empty() {
            return Err(config_err("dr kernel list must not be empty"));
        }
        for &k in &self.kernel_sizes {
            if k < 3 || k % 2 == 0 {
                return Err(config_err(format!(
                    "dr kernels must be odd and >= 3, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Pool with every kernel and concatenate `[pool_k1, pool_k2, ..., raw]`
/// along channels. Exposed separately so the pre-compression stack can be
/// tested against sliding-window oracles.
pub fn pooled_concat(tape: &Tape, x: Var, kernels: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(kernels.len() + 1);
    for &k in kernels {
        if k % 2 == 0 || k < 3 {
            return Err(config_err(format!("pool kernel must be odd >= 3, got {k}")));
        }
        parts.push(tape.maxpool_same(x, k)?);
    }
    parts.push(x);
    tape.concat_c(&parts)
}

/// One diverse-reception block: pooled concat followed by compression to the
/// working width.
pub struct DrModule {
    pub cfg: DrConfig,
    compress: ConvBnRelu,
}

impl DrModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        cfg: DrConfig,
        bn_momentum: f64,
        bn_eps: f64,
        bypass_norm: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let stacked = in_c * (cfg.kernel_sizes.len() + 1);
        let compress = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.compress"),
            stacked,
            cfg.out_channels,
            1,
            bn_momentum,
            bn_eps,
            bypass_norm,
        );
        Ok(DrModule { cfg, compress })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let stacked = pooled_concat(&s.tape, x, &self.cfg.kernel_sizes)?;
        self.compress.forward(s, stacked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn output_shape_is_working_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dr = DrModule::new(
            &mut store,
            &mut rng,
            "dr5",
            256,
            DrConfig::default(),
            0.1,
            1e-5,
            false,
        )
        .unwrap();
        let s = Session::new(&store, false);
        let x = s.input(Array4::from_elem((1, 256, 12, 12), 0.3));
        let y = dr.forward(&s, x).unwrap();
        assert_eq!(s.tape.shape(y), [1, 64, 12, 12]);
    }

    #[test]
    fn constant_input_gives_identical_channel_groups() {
        let t = Tape::new();
        let c = 5;
        let x = t.leaf(Array4::from_elem((1, c, 6, 6), 0.42));
        let stacked = pooled_concat(&t, x, &[3, 7, 11]).unwrap();
        let v = t.value(stacked);
        assert_eq!(t.shape(stacked), [1, 4 * c, 6, 6]);
        for group in 0..4 {
            for ci in 0..c {
                for i in 0..6 {
                    for j in 0..6 {
                        assert_eq!(v[[0, group * c + ci, i, j]], 0.42);
                    }
                }
            }
        }
    }

    #[test]
    fn hot_pixel_pool_matches_sliding_window_oracle() {
        let mut x = Array4::zeros((1, 8, 5, 5));
        for ci in 0..8 {
            x[[0, ci, 2, 2]] = 1.0 + ci as f64;
        }
        let t = Tape::new();
        let v = t.leaf(x.clone());
        let stacked = pooled_concat(&t, v, &[3]).unwrap();
        let out = t.value(stacked);
        // brute-force sliding-window max over the 5x5 grid
        for ci in 0..8 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut expect = f64::NEG_INFINITY;
                    let mut any = false;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (ii, jj) = (i as i64 + di, j as i64 + dj);
                            if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                expect = expect.max(x[[0, ci, ii as usize, jj as usize]]);
                                any = true;
                            } else {
                                expect = expect.max(0.0);
                            }
                        }
                    }
                    assert!(any);
                    assert_eq!(out[[0, ci, i, j]], expect, "channel {ci} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn even_kernel_is_config_error() {
        let cfg = DrConfig {
            kernel_sizes: vec![3, 4],
            out_channels: 8,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_spatial_is_shape_error() {
        let t = Tape::new();
        let x = t.leaf(Array4::zeros((1, 2, 0, 3)));
        assert!(pooled_concat(&t, x, &[3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Pooling preserves spatial size and, for nonnegative inputs, each
        /// pooled value dominates the raw value; larger kernels dominate
        /// smaller ones.
        #[test]
        fn pool_branch_ordering(
            h in 1usize..7,
            w in 1usize..7,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Array4::zeros((1, 2, h, w));
            for v in x.iter_mut() {
                *v = rand::Rng::gen_range(&mut rng, 0.0..1.0);
            }
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let stacked = pooled_concat(&t, xv, &[3, 7, 11]).unwrap();
            prop_assert_eq!(t.shape(stacked), [1, 8, h, w]);
            let out = t.value(stacked);
            for ci in 0..2 {
                for i in 0..h {
                    for j in 0..w {
                        let p3 = out[[0, ci, i, j]];
                        let p7 = out[[0, 2 + ci, i, j]];
                        let p11 = out[[0, 4 + ci, i, j]];
                        let raw = out[[0, 6 + ci, i, j]];
                        prop_assert_eq!(raw, x[[0, ci, i, j]]);
                        prop_assert!(p3 >= raw);
                        prop_assert!(p7 >= p3);
                        prop_assert!(p11 >= p7);
                    }
                }
            }
        }
    }
}
