//! Multiscale interaction: composite feature integration (CFI) followed by a
//! top-down feature decoder (FD).
//!
//! CFI fuses a level with its upsampled neighbor and the enhanced top level
//! through pixel-wise multiplication, which suppresses background responses;
//! FD then fuses the CFI outputs top-down with pixel-wise addition. All
//! upsampling is bilinear with half-pixel alignment.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::fe::FeModule;
use crate::nn::{ConvBnRelu, ParamStore, Session};
use crate::tape::{Tape, Var};

/// Bilinear upsampling to an explicit target; identity when the target
/// equals the current size, error when it is smaller.
pub fn upsample(tape: &Tape, x: Var, target: (usize, usize)) -> Result<Var> {
    tape.upsample_bilinear(x, target.0, target.1)
}

/// Array-level convenience wrapper around [`upsample`].
pub fn upsample_array(x: &Array4<f64>, target: (usize, usize)) -> Result<Array4<f64>> {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = upsample(&tape, v, target)?;
    Ok((*tape.value(y)).clone())
}

/// Intermediates of one CFI application, kept for shape and algebra tests.
#[derive(Clone, Copy, Debug)]
pub struct CfiTrace {
    pub f_arc: Var,
    pub f_h: Var,
    pub f_m: Var,
    pub f_l: Var,
    pub pre_fe: Var,
}

/// Composite feature integration at one level. Every conv site carries its
/// own parameters; the trailing enhancement is optional so the module
/// ablation can strip it.
pub struct CfiModule {
    conv_arc: ConvBnRelu,
    conv_h: ConvBnRelu,
    conv_m: ConvBnRelu,
    conv_l_next: ConvBnRelu,
    conv_l_top: ConvBnRelu,
    conv_merge: ConvBnRelu,
    fe: Option<FeSite>,
}

/// Either an owned enhancement block or an index into a shared one.
pub enum FeSite {
    Owned(Box<FeModule>),
    Shared,
}

impl CfiModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        use_fe: bool,
        fe_share_params: bool,
        bn_momentum: f64,
        bn_eps: f64,
        bypass_norm: bool,
    ) -> Result<Self> {
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str, ic: usize| {
            ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.{suffix}"),
                ic,
                width,
                1,
                bn_momentum,
                bn_eps,
                bypass_norm,
            )
        };
        let conv_arc = block(store, rng, "arc", width);
        let conv_h = block(store, rng, "high", width);
        let conv_m = block(store, rng, "mid", width);
        let conv_l_next = block(store, rng, "low_next", width);
        let conv_l_top = block(store, rng, "low_top", width);
        let conv_merge = block(store, rng, "merge", 4 * width);
        let fe = if use_fe {
            if fe_share_params {
                Some(FeSite::Shared)
            } else {
                Some(FeSite::Owned(Box::new(FeModule::new(
                    store,
                    rng,
                    &format!("{name}.fe"),
                    width,
                    bn_momentum,
                    bn_eps,
                    bypass_norm,
                )?)))
            }
        } else {
            None
        };
        Ok(CfiModule {
            conv_arc,
            conv_h,
            conv_m,
            conv_l_next,
            conv_l_top,
            conv_merge,
            fe,
        })
    }

    /// `level` is the feature at this level, `next` the one level deeper,
    /// `top_enh` the enhanced deepest feature. `shared_fe` backs the
    /// parameter-sharing mode.
    pub fn forward(
        &self,
        s: &Session,
        level: Var,
        next: Var,
        top_enh: Var,
        shared_fe: Option<&FeModule>,
    ) -> Result<(Var, CfiTrace)> {
        let t = &s.tape;
        let target = {
            let sh = t.shape(level);
            (sh[2], sh[3])
        };
        let up_next = upsample(t, next, target)?;
        let up_top = upsample(t, top_enh, target)?;

        let f_arc = self.conv_arc.forward(s, level)?;
        let f_h = t.mul(f_arc, self.conv_h.forward(s, up_next)?)?;
        let f_m = t.mul(f_arc, self.conv_m.forward(s, up_top)?)?;
        let f_l = t.mul(
            self.conv_l_next.forward(s, up_next)?,
            self.conv_l_top.forward(s, up_top)?,
        )?;
        let pre_fe = self
            .conv_merge
            .forward(s, t.concat_c(&[f_arc, f_h, f_m, f_l])?)?;
        let out = match &self.fe {
            Some(FeSite::Owned(fe)) => fe.forward(s, pre_fe)?,
            Some(FeSite::Shared) => shared_fe
                .ok_or_else(|| shape_err("cfi: shared fe requested but none provided"))?
                .forward(s, pre_fe)?,
            None => pre_fe,
        };
        Ok((
            out,
            CfiTrace {
                f_arc,
                f_h,
                f_m,
                f_l,
                pre_fe,
            },
        ))
    }
}

/// Top-down decoder over the three CFI outputs.
pub struct FdModule {
    conv_top: ConvBnRelu,
    conv_mid: ConvBnRelu,
    conv_out: ConvBnRelu,
}

impl FdModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        bn_momentum: f64,
        bn_eps: f64,
        bypass_norm: bool,
    ) -> Self {
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str| {
            ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.{suffix}"),
                width,
                width,
                1,
                bn_momentum,
                bn_eps,
                bypass_norm,
            )
        };
        FdModule {
            conv_top: block(store, rng, "top"),
            conv_mid: block(store, rng, "mid"),
            conv_out: block(store, rng, "out"),
        }
    }

    /// `f_fd3 = Conv(UP(cfi4)) + cfi3`, then
    /// `f_fd2 = Conv(Conv(UP(f_fd3)) + cfi2)`.
    pub fn forward(&self, s: &Session, cfi4: Var, cfi3: Var, cfi2: Var) -> Result<(Var, Var)> {
        let t = &s.tape;
        let size3 = {
            let sh = t.shape(cfi3);
            (sh[2], sh[3])
        };
        let size2 = {
            let sh = t.shape(cfi2);
            (sh[2], sh[3])
        };
        let fd3 = t.add(self.conv_top.forward(s, upsample(t, cfi4, size3)?)?, cfi3)?;
        let inner = self.conv_mid.forward(s, upsample(t, fd3, size2)?)?;
        let fd2 = self.conv_out.forward(s, t.add(inner, cfi2)?)?;
        Ok((fd3, fd2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    fn filled(shape: (usize, usize, usize, usize), phase: f64) -> Array4<f64> {
        let mut x = Array4::zeros(shape);
        for (i, v) in x.iter_mut().enumerate() {
            *v = 0.5 + 0.45 * ((i as f64) * phase).sin();
        }
        x
    }

    fn cfi_fixture(width: usize, bypass_norm: bool) -> (CfiModule, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfi = CfiModule::new(
            &mut store,
            &mut rng,
            "cfi",
            width,
            true,
            false,
            0.1,
            1e-5,
            bypass_norm,
        )
        .unwrap();
        (cfi, store)
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Array4::from_elem((1, 1, 2, 2), 0.7);
        let y = upsample_array(&x, (4, 4)).unwrap();
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_identity_bitwise_and_downscale_error() {
        let x = filled((1, 3, 4, 4), 0.3);
        assert_eq!(upsample_array(&x, (4, 4)).unwrap(), x);
        assert!(upsample_array(&x, (2, 4)).is_err());
    }

    #[test]
    fn cfi_equal_sizes_keeps_size() {
        // deepest level: neighbor and top are the same size as the level
        let (cfi, store) = cfi_fixture(16, false);
        let s = Session::new(&store, false);
        let level = s.input(filled((1, 16, 12, 12), 0.29));
        let next = s.input(filled((1, 16, 12, 12), 0.41));
        let top = s.input(filled((1, 16, 12, 12), 0.53));
        let (out, _) = cfi.forward(&s, level, next, top, None).unwrap();
        assert_eq!(s.tape.shape(out), [1, 16, 12, 12]);
    }

    #[test]
    fn cfi_mixed_scales_upsamples_to_level() {
        let (cfi, store) = cfi_fixture(8, false);
        let s = Session::new(&store, false);
        let level = s.input(filled((1, 8, 48, 48), 0.29));
        let next = s.input(filled((1, 8, 24, 24), 0.41));
        let top = s.input(filled((1, 8, 12, 12), 0.53));
        let (out, trace) = cfi.forward(&s, level, next, top, None).unwrap();
        assert_eq!(s.tape.shape(out), [1, 8, 48, 48]);
        assert_eq!(s.tape.shape(trace.f_l), [1, 8, 48, 48]);
    }

    #[test]
    fn zero_neighbors_zero_interaction_branches() {
        // zero conv biases + bypassed norm: conv(0) = 0, so every branch
        // that multiplies by an upsampled zero map must vanish
        let (cfi, store) = cfi_fixture(4, true);
        for id in store.ids() {
            if store.name(id).ends_with(".bias") {
                store.set(id, Array4::zeros(store.shape(id))).unwrap();
            }
        }
        let s = Session::new(&store, false);
        let level = s.input(filled((1, 4, 8, 8), 0.37));
        let next = s.input(Array4::zeros((1, 4, 4, 4)));
        let top = s.input(Array4::zeros((1, 4, 4, 4)));
        let (_, trace) = cfi.forward(&s, level, next, top, None).unwrap();
        assert!(s.tape.value(trace.f_h).iter().all(|&v| v == 0.0));
        assert!(s.tape.value(trace.f_m).iter().all(|&v| v == 0.0));
        assert!(s.tape.value(trace.f_l).iter().all(|&v| v == 0.0));
        assert!(s.tape.value(trace.f_arc).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn multiplicative_suppression_where_top_is_zero() {
        // identity-like convs: center tap 1, everything else 0, no norm.
        // Where the upsampled top map is zero, f_m and f_l must be zero.
        let (cfi, store) = cfi_fixture(2, true);
        for id in store.ids() {
            let name = store.name(id).to_string();
            if name.ends_with(".bias") {
                store.set(id, Array4::zeros(store.shape(id))).unwrap();
            } else if name.ends_with(".weight") {
                let sh = store.shape(id);
                let mut w = Array4::zeros(sh);
                for c in 0..sh[0].min(sh[1]) {
                    w[[c, c, 1, 1]] = 1.0;
                }
                store.set(id, w).unwrap();
            }
        }
        let s = Session::new(&store, false);
        let level = s.input(filled((1, 2, 8, 8), 0.61));
        let next = s.input(filled((1, 2, 4, 4), 0.43));
        // top: left half zero, right half positive; upsampling 2x keeps the
        // left quarter exactly zero
        let mut top_arr = Array4::zeros((1, 2, 4, 4));
        for c in 0..2 {
            for i in 0..4 {
                for j in 2..4 {
                    top_arr[[0, c, i, j]] = 0.8;
                }
            }
        }
        let top = s.input(top_arr);
        let (_, trace) = cfi.forward(&s, level, next, top, None).unwrap();
        let up_top = s.tape.value(
            upsample(&s.tape, top, (8, 8)).unwrap(),
        );
        let fm = s.tape.value(trace.f_m);
        let fl = s.tape.value(trace.f_l);
        let mut zeros_seen = 0;
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    if up_top[[0, c, i, j]] == 0.0 {
                        assert_eq!(fm[[0, c, i, j]], 0.0);
                        assert_eq!(fl[[0, c, i, j]], 0.0);
                        zeros_seen += 1;
                    }
                }
            }
        }
        assert!(zeros_seen > 0, "test fixture must exercise zero pixels");
    }

    #[test]
    fn fd_output_sizes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fd = FdModule::new(&mut store, &mut rng, "fd", 8, 0.1, 1e-5, false);
        let s = Session::new(&store, false);
        let cfi4 = s.input(filled((1, 8, 12, 12), 0.3));
        let cfi3 = s.input(filled((1, 8, 24, 24), 0.4));
        let cfi2 = s.input(filled((1, 8, 48, 48), 0.5));
        let (fd3, fd2) = fd.forward(&s, cfi4, cfi3, cfi2).unwrap();
        assert_eq!(s.tape.shape(fd3), [1, 8, 24, 24]);
        assert_eq!(s.tape.shape(fd2), [1, 8, 48, 48]);
    }

    #[test]
    fn fd_zero_top_contributes_nothing() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fd = FdModule::new(&mut store, &mut rng, "fd", 4, 0.1, 1e-5, true);
        for id in store.ids() {
            if store.name(id).ends_with(".bias") {
                store.set(id, Array4::zeros(store.shape(id))).unwrap();
            }
        }
        let s = Session::new(&store, false);
        let cfi4 = s.input(Array4::zeros((1, 4, 4, 4)));
        let cfi3 = s.input(filled((1, 4, 8, 8), 0.7));
        let cfi2 = s.input(filled((1, 4, 16, 16), 0.9));
        let (fd3, _) = fd.forward(&s, cfi4, cfi3, cfi2).unwrap();
        // conv(up(0)) = 0, so fd3 equals cfi3 exactly
        assert_eq!(*s.tape.value(fd3), *s.tape.value(cfi3));
    }

    #[test]
    fn fd_shape_mismatch_is_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fd = FdModule::new(&mut store, &mut rng, "fd", 4, 0.1, 1e-5, false);
        let s = Session::new(&store, false);
        let cfi4 = s.input(filled((1, 4, 12, 12), 0.3));
        let cfi3 = s.input(filled((1, 4, 6, 6), 0.4)); // smaller than cfi4
        let cfi2 = s.input(filled((1, 4, 48, 48), 0.5));
        assert!(fd.forward(&s, cfi4, cfi3, cfi2).is_err());
    }

    #[test]
    fn batch_matches_per_sample_runs_in_eval_mode() {
        let (cfi, store) = cfi_fixture(4, false);
        let a = filled((1, 4, 8, 8), 0.21);
        let b = filled((1, 4, 8, 8), 0.77);
        let mut batched = Array4::zeros((2, 4, 8, 8));
        batched.index_axis_mut(ndarray::Axis(0), 0).assign(&a.index_axis(ndarray::Axis(0), 0));
        batched.index_axis_mut(ndarray::Axis(0), 1).assign(&b.index_axis(ndarray::Axis(0), 0));
        let next1 = filled((1, 4, 4, 4), 0.33);
        let top1 = filled((1, 4, 4, 4), 0.47);
        let mut next2 = Array4::zeros((2, 4, 4, 4));
        next2.index_axis_mut(ndarray::Axis(0), 0).assign(&next1.index_axis(ndarray::Axis(0), 0));
        next2.index_axis_mut(ndarray::Axis(0), 1).assign(&next1.index_axis(ndarray::Axis(0), 0));
        let mut top2 = Array4::zeros((2, 4, 4, 4));
        top2.index_axis_mut(ndarray::Axis(0), 0).assign(&top1.index_axis(ndarray::Axis(0), 0));
        top2.index_axis_mut(ndarray::Axis(0), 1).assign(&top1.index_axis(ndarray::Axis(0), 0));

        let run = |level: &Array4<f64>, next: &Array4<f64>, top: &Array4<f64>| {
            let s = Session::new(&store, false);
            let (out, _) = cfi
                .forward(
                    &s,
                    s.input(level.clone()),
                    s.input(next.clone()),
                    s.input(top.clone()),
                    None,
                )
                .unwrap();
            (*s.tape.value(out)).clone()
        };
        let batch_out = run(&batched, &next2, &top2);
        let solo_a = run(&a, &next1, &top1);
        let solo_b = run(&b, &next1, &top1);
        assert_eq!(
            batch_out.index_axis(ndarray::Axis(0), 0),
            solo_a.index_axis(ndarray::Axis(0), 0)
        );
        assert_eq!(
            batch_out.index_axis(ndarray::Axis(0), 1),
            solo_b.index_axis(ndarray::Axis(0), 0)
        );
    }
}
