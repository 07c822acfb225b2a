//! Full model assembly with module toggles for ablations.
//!
//! Wiring with everything enabled, for input side S:
//!
//! ```text
//! image -> encoder -> bf1..bf5           (strides 4, 8, 16, 32, 32; bf1 unused)
//! bf2..bf5 -> reception -> r2..r5        (working width W each)
//! top = enhance(r5)
//! cfi_i = CFI(r_i, r_{i+1}, top)         (i = 4, 3, 2)
//! (fd3, fd2) = FD(cfi4, cfi3, cfi2)
//! m2 <- fd2, m3 <- fd3, m4 <- cfi4, m5 <- top   (each: conv -> upsample -> sigmoid)
//! ```
//!
//! With `msi` off the decoder degenerates to the concat-and-compress
//! baseline producing a single map; with `dr` off reception is a plain conv
//! block; with `fe` off every enhancement site is the identity.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ConvBackbone, ImageTensor, PyramidBackbone};
use crate::config::ModelConfig;
use crate::dr::{DrConfig, DrModule};
use crate::error::{shape_err, Result};
use crate::fe::FeModule;
use crate::heads::Head;
use crate::msi::{upsample, CfiModule, CfiTrace, FdModule};
use crate::nn::{ConvBnRelu, ParamStore, Session};
use crate::tape::Var;

enum Reduce {
    Dr(DrModule),
    Plain(ConvBnRelu),
}

impl Reduce {
    fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        match self {
            Reduce::Dr(m) => m.forward(s, x),
            Reduce::Plain(c) => c.forward(s, x),
        }
    }
}

/// Everything the forward pass produced, with named intermediates so tests
/// can pin the level-wise shape contract.
pub struct ForwardTrace {
    pub pyramid: [Var; 5],
    /// Width-reduced levels 2..5 (indices 0..3).
    pub reduced: [Var; 4],
    pub top_enh: Var,
    pub cfi: Option<[(Var, CfiTrace); 3]>, // levels 2, 3, 4
    pub fd: Option<(Var, Var)>,            // (fd3, fd2)
    /// `(level, saliency map)` pairs at the input size; level 2 first.
    pub maps: Vec<(u8, Var)>,
}

impl ForwardTrace {
    pub fn final_map(&self) -> Var {
        self.maps[0].1
    }
}

pub struct SodModel {
    pub cfg: ModelConfig,
    backbone: ConvBackbone,
    reduce: [Reduce; 4],
    top_fe: Option<FeModule>,
    shared_fe: Option<FeModule>,
    cfi: Option<[CfiModule; 3]>,
    fd: Option<FdModule>,
    heads: Vec<Head>,
    base_fuse: Option<ConvBnRelu>,
    base_fe: Option<FeModule>,
}

impl SodModel {
    /// Build the network and register every parameter, deterministically for
    /// a given seed.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.working_width;
        let bn = (cfg.bn_momentum, cfg.bn_eps, cfg.bypass_norm);

        let backbone = ConvBackbone::new(cfg, store, &mut rng);

        let mut reduce = Vec::with_capacity(4);
        for (slot, level) in (2..=5).enumerate() {
            let in_c = cfg.backbone_channels[level - 1];
            let name = format!("reduce{level}");
            let r = if cfg.toggles.dr {
                Reduce::Dr(DrModule::new(
                    store,
                    &mut rng,
                    &name,
                    in_c,
                    DrConfig {
                        kernel_sizes: cfg.dr_kernels.clone(),
                        out_channels: w,
                    },
                    bn.0,
                    bn.1,
                    bn.2,
                )?)
            } else {
                Reduce::Plain(ConvBnRelu::new(
                    store, &mut rng, &name, in_c, w, 1, bn.0, bn.1, bn.2,
                ))
            };
            debug_assert_eq!(slot + 2, level);
            reduce.push(r);
        }
        let reduce: [Reduce; 4] = reduce
            .try_into()
            .map_err(|_| shape_err("reduce stage count"))?;

        let use_fe = cfg.toggles.fe;
        let shared_fe = (use_fe && cfg.fe_share_params)
            .then(|| FeModule::new(store, &mut rng, "fe_shared", w, bn.0, bn.1, bn.2))
            .transpose()?;
        let top_fe = (use_fe && !cfg.fe_share_params)
            .then(|| FeModule::new(store, &mut rng, "fe_top", w, bn.0, bn.1, bn.2))
            .transpose()?;

        let (cfi, fd, base_fuse, base_fe) = if cfg.toggles.msi {
            let mut cfis = Vec::with_capacity(3);
            for level in [2usize, 3, 4] {
                cfis.push(CfiModule::new(
                    store,
                    &mut rng,
                    &format!("cfi{level}"),
                    w,
                    use_fe,
                    cfg.fe_share_params,
                    bn.0,
                    bn.1,
                    bn.2,
                )?);
            }
            let cfis: [CfiModule; 3] = cfis
                .try_into()
                .map_err(|_| shape_err("cfi stage count"))?;
            let fd = FdModule::new(store, &mut rng, "fd", w, bn.0, bn.1, bn.2);
            (Some(cfis), Some(fd), None, None)
        } else {
            let fuse = ConvBnRelu::new(store, &mut rng, "base.fuse", 4 * w, w, 1, bn.0, bn.1, bn.2);
            let base_fe = (use_fe && !cfg.fe_share_params)
                .then(|| FeModule::new(store, &mut rng, "base.fe", w, bn.0, bn.1, bn.2))
                .transpose()?;
            (None, None, Some(fuse), base_fe)
        };

        let heads = if cfg.toggles.msi {
            (2..=5)
                .map(|level| Head::new(store, &mut rng, &format!("head{level}"), w))
                .collect()
        } else {
            vec![Head::new(store, &mut rng, "head2", w)]
        };

        Ok(SodModel {
            cfg: cfg.clone(),
            backbone,
            reduce,
            top_fe,
            shared_fe,
            cfi,
            fd,
            heads,
            base_fuse,
            base_fe,
        })
    }

    fn enhance_site<'a>(&'a self, owned: &'a Option<FeModule>) -> Option<&'a FeModule> {
        if !self.cfg.toggles.fe {
            return None;
        }
        if self.cfg.fe_share_params {
            self.shared_fe.as_ref()
        } else {
            owned.as_ref()
        }
    }

    /// Record one forward pass on the session's tape.
    pub fn forward(&self, s: &Session, image: Var) -> Result<ForwardTrace> {
        let t = &s.tape;
        let in_shape = t.shape(image);
        let out_size = (in_shape[2], in_shape[3]);

        let pyramid = self.backbone.forward(s, image)?;
        let mut reduced = Vec::with_capacity(4);
        for (slot, r) in self.reduce.iter().enumerate() {
            reduced.push(r.forward(s, pyramid[slot + 1])?);
        }
        let reduced: [Var; 4] = reduced.try_into().expect("four reduced levels");

        let top_enh = match self.enhance_site(&self.top_fe) {
            Some(fe) => fe.forward(s, reduced[3])?,
            None => reduced[3],
        };

        if self.cfg.toggles.msi {
            let cfis = self.cfi.as_ref().expect("cfi modules built");
            let shared = self.shared_fe.as_ref();
            // slots: reduced[0]=r2, [1]=r3, [2]=r4, [3]=r5
            let (c2, tr2) = cfis[0].forward(s, reduced[0], reduced[1], top_enh, shared)?;
            let (c3, tr3) = cfis[1].forward(s, reduced[1], reduced[2], top_enh, shared)?;
            let (c4, tr4) = cfis[2].forward(s, reduced[2], reduced[3], top_enh, shared)?;
            let (fd3, fd2) = self
                .fd
                .as_ref()
                .expect("fd module built")
                .forward(s, c4, c3, c2)?;

            let sources = [fd2, fd3, c4, top_enh];
            let mut maps = Vec::with_capacity(4);
            for (i, (head, src)) in self.heads.iter().zip(sources).enumerate() {
                maps.push(((i + 2) as u8, head.forward(s, src, out_size)?));
            }
            Ok(ForwardTrace {
                pyramid,
                reduced,
                top_enh,
                cfi: Some([(c2, tr2), (c3, tr3), (c4, tr4)]),
                fd: Some((fd3, fd2)),
                maps,
            })
        } else {
            // concat-and-compress baseline: everything upsampled to the
            // level-2 grid, fused by one conv block, one head
            let target = {
                let sh = t.shape(reduced[0]);
                (sh[2], sh[3])
            };
            let mut parts = vec![reduced[0]];
            for &v in &reduced[1..3] {
                parts.push(upsample(t, v, target)?);
            }
            parts.push(upsample(t, top_enh, target)?);
            let fused = self
                .base_fuse
                .as_ref()
                .expect("base decoder built")
                .forward(s, t.concat_c(&parts)?)?;
            let fused = match self.enhance_site(&self.base_fe) {
                Some(fe) => fe.forward(s, fused)?,
                None => fused,
            };
            let m2 = self.heads[0].forward(s, fused, out_size)?;
            Ok(ForwardTrace {
                pyramid,
                reduced,
                top_enh,
                cfi: None,
                fd: None,
                maps: vec![(2, m2)],
            })
        }
    }

    /// Eval-mode forward returning the final saliency map as an array.
    pub fn predict(&self, store: &ParamStore, image: &ImageTensor) -> Result<Array4<f64>> {
        let s = Session::new(store, false);
        let input = s.input(image.data().clone());
        let trace = self.forward(&s, input)?;
        Ok((*s.tape.value(trace.final_map())).clone())
    }
}
