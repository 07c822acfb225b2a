//! Parameter storage, layer building blocks, and the forward session.
//!
//! Parameters live in a [`ParamStore`] so the optimizer, checkpointing, and
//! the tape can all address the same flat, name-keyed registry. A
//! [`Session`] binds the store to one tape-recorded forward pass; parameter
//! leaves are memoized so layers that share parameters accumulate gradients
//! correctly.

use std::cell::RefCell;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    /// Whether weight decay applies by default (biases and norm affine
    /// parameters are excluded unless the config opts in).
    pub fn decays_by_default(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    kind: ParamKind,
    value: RefCell<Array4<f64>>,
}

/// Flat registry of all model parameters and buffers.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Array4<f64>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value: RefCell::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> Array4<f64> {
        self.entries[id.0].value.borrow().clone()
    }

    pub fn shape(&self, id: ParamId) -> [usize; 4] {
        let d = self.entries[id.0].value.borrow().dim();
        [d.0, d.1, d.2, d.3]
    }

    /// Overwrite a parameter value; the shape must match.
    pub fn set(&self, id: ParamId, value: Array4<f64>) -> Result<()> {
        let mut slot = self.entries[id.0].value.borrow_mut();
        if slot.dim() != value.dim() {
            return Err(shape_err(format!(
                "set {}: shape {:?} != {:?}",
                self.entries[id.0].name,
                value.dim(),
                slot.dim()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// One tape-recorded forward pass over a parameter store.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    pub training: bool,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, training: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            training,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a parameter, memoized per session so reuse shares the node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id));
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Leaf for external data (images, masks).
    pub fn input(&self, value: Array4<f64>) -> Var {
        self.tape.leaf(value)
    }

    /// `(ParamId, Var)` pairs for every parameter touched by this pass.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }
}

// -------------------------------------------------------------------------
// Initialization
// -------------------------------------------------------------------------

/// Kaiming-style normal init for conv kernels: std = sqrt(2 / fan_in).
pub fn kaiming_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> Array4<f64> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let mut w = Array4::zeros((out_c, in_c, k, k));
    for v in w.iter_mut() {
        *v = normal_sample(rng) * std;
    }
    w
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per sample
/// so initialization order is reproducible.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// -------------------------------------------------------------------------
// Layers
// -------------------------------------------------------------------------

/// Plain 2-D convolution with bias.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            kaiming_conv(rng, out_c, in_c, k),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Array4::zeros((1, out_c, 1, 1)),
        );
        Conv2d {
            weight,
            bias,
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.tape.conv2d(
            x,
            s.param(self.weight),
            Some(s.param(self.bias)),
            self.stride,
            self.pad,
        )
    }
}

/// Batch normalization over `[N, H, W]` per channel.
///
/// Training mode normalizes with batch statistics (differentiable through
/// them) and refreshes running statistics; eval mode uses the stored
/// running statistics, which keeps inference batch-independent.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::NormScale,
            Array4::from_elem((1, channels, 1, 1), 1.0),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::NormShift,
            Array4::zeros((1, channels, 1, 1)),
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Array4::zeros((1, channels, 1, 1)),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Array4::from_elem((1, channels, 1, 1), 1.0),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            eps,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = &s.tape;
        if s.training {
            let mu = t.mean_cvec(x);
            let xc = t.add_cvec(x, t.scale(mu, -1.0))?;
            let var = t.mean_cvec(t.mul(xc, xc)?);
            self.update_running(s, &t.value(mu), &t.value(var), t.shape(x));
            let inv = t.recip(t.sqrt(t.add_scalar(var, self.eps)));
            let scaled = t.mul_cvec(xc, t.mul(inv, s.param(self.gamma))?)?;
            t.add_cvec(scaled, s.param(self.beta))
        } else {
            let rm = s.param(self.running_mean);
            let rv = s.param(self.running_var);
            let xc = t.add_cvec(x, t.scale(rm, -1.0))?;
            let inv = t.recip(t.sqrt(t.add_scalar(rv, self.eps)));
            let scaled = t.mul_cvec(xc, t.mul(inv, s.param(self.gamma))?)?;
            t.add_cvec(scaled, s.param(self.beta))
        }
    }

    fn update_running(
        &self,
        s: &Session,
        batch_mean: &Array4<f64>,
        batch_var: &Array4<f64>,
        xshape: [usize; 4],
    ) {
        let cnt = (xshape[0] * xshape[2] * xshape[3]) as f64;
        let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
        let m = self.momentum;
        let rm = s.store().value(self.running_mean);
        let rv = s.store().value(self.running_var);
        let new_rm = &rm * (1.0 - m) + &(batch_mean * m);
        let new_rv = &rv * (1.0 - m) + &(batch_var * (m * unbias));
        s.store().set(self.running_mean, new_rm).expect("bn mean shape");
        s.store().set(self.running_var, new_rv).expect("bn var shape");
    }
}

/// 3x3 conv + batchnorm + relu, the workhorse block of the fusion stages.
/// The norm can be bypassed for algebraic unit tests.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bn_momentum: f64,
        bn_eps: f64,
        bypass_norm: bool,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_c, out_c, 3, stride);
        let bn = (!bypass_norm)
            .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), out_c, bn_momentum, bn_eps));
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        Ok(s.tape.relu(y))
    }
}
