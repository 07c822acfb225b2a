//! Reverse-mode autodiff tape over `[N, C, H, W]` f64 tensors.
//!
//! Every intermediate of a forward pass is a node on an append-only tape;
//! `backward` walks the tape in reverse and accumulates gradients into the
//! leaves. The op set is exactly what the pipeline needs: elementwise
//! arithmetic, channel broadcasts, reductions, 2-D convolution, stride-1
//! max-pooling with zero padding, and bilinear upsampling.
//!
//! All values are f64 so finite-difference gradient checks and the metric
//! oracles have headroom at their stated tolerances.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{shape_err, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type Sink<'a> = dyn FnMut(usize, Array4<f64>) + 'a;
type BackFn = Box<dyn Fn(&Array4<f64>, &mut Sink)>;

struct Node {
    value: Arc<Array4<f64>>,
    back: Option<BackFn>,
}

/// Append-only graph of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexable by [`Var`].
pub struct Grads {
    g: Vec<Option<Array4<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Array4<f64>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array4<f64>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Array4<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            back,
        });
        Var(nodes.len() - 1)
    }

    fn push_arc(&self, value: Arc<Array4<f64>>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var(nodes.len() - 1)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduce a leaf (input or parameter). Leaves receive gradients but
    /// have no parents.
    pub fn leaf(&self, value: Array4<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Arc<Array4<f64>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        let d = self.nodes.borrow()[v.0].value.dim();
        [d.0, d.1, d.2, d.3]
    }

    /// Extract the single element of a `[1,1,1,1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[[0, 0, 0, 0]]
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{op}: operand shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Elementwise arithmetic
    // ---------------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = &*self.value(a) + &*self.value(b);
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = &*self.value(a) - &*self.value(b);
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.mapv(|v| -v));
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va * &*vb;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &*vb);
                sink(b.0, g * &*va);
            })),
        ))
    }

    /// `x * k + c` with scalar constants.
    pub fn affine(&self, x: Var, k: f64, c: f64) -> Var {
        let out = self.value(x).mapv(|v| v * k + c);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink(x.0, g.mapv(|v| v * k)))),
        )
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn one_minus(&self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    // ---------------------------------------------------------------------
    // Unary nonlinearities
    // ---------------------------------------------------------------------

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| v.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vx, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                sink(x.0, dx);
            })),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Arc::new(out);
        let yc = Arc::clone(&y);
        self.push_arc(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&yc, |d, &s| *d *= s * (1.0 - s));
                sink(x.0, dx);
            })),
        )
    }

    /// Natural log. Caller is responsible for keeping the operand positive
    /// (the loss paths clamp first).
    pub fn ln(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(f64::ln);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vx, |d, &v| *d /= v);
                sink(x.0, dx);
            })),
        )
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::sqrt);
        let y = Arc::new(out);
        let yc = Arc::clone(&y);
        self.push_arc(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&yc, |d, &s| *d *= 0.5 / s);
                sink(x.0, dx);
            })),
        )
    }

    pub fn recip(&self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / v);
        let y = Arc::new(out);
        let yc = Arc::clone(&y);
        self.push_arc(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&yc, |d, &s| *d *= -s * s);
                sink(x.0, dx);
            })),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| v.clamp(lo, hi));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vx, |d, &v| {
                    if v <= lo || v >= hi {
                        *d = 0.0;
                    }
                });
                sink(x.0, dx);
            })),
        )
    }

    // ---------------------------------------------------------------------
    // Channel broadcasts: `c` has shape [1, C, 1, 1]
    // ---------------------------------------------------------------------

    fn check_cvec(&self, x: Var, c: Var, op: &str) -> Result<()> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sc[0] != 1 || sc[2] != 1 || sc[3] != 1 || sc[1] != sx[1] {
            return Err(shape_err(format!(
                "{op}: channel vector {sc:?} does not broadcast over {sx:?}"
            )));
        }
        Ok(())
    }

    pub fn add_cvec(&self, x: Var, c: Var) -> Result<Var> {
        self.check_cvec(x, c, "add_cvec")?;
        let (vx, vc) = (self.value(x), self.value(c));
        let out = &*vx + &vc.view();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                sink(c.0, sum_to_cvec(g));
            })),
        ))
    }

    pub fn mul_cvec(&self, x: Var, c: Var) -> Result<Var> {
        self.check_cvec(x, c, "mul_cvec")?;
        let (vx, vc) = (self.value(x), self.value(c));
        let out = &*vx * &vc.view();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g * &vc.view());
                sink(c.0, sum_to_cvec(&(g * &*vx)));
            })),
        ))
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.dim();
        let s = vx.sum();
        self.push(
            Array4::from_elem((1, 1, 1, 1), s),
            Some(Box::new(move |g, sink| {
                sink(x.0, Array4::from_elem(shape, g[[0, 0, 0, 0]]));
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.dim();
        let n = vx.len() as f64;
        let s = vx.sum() / n;
        self.push(
            Array4::from_elem((1, 1, 1, 1), s),
            Some(Box::new(move |g, sink| {
                sink(x.0, Array4::from_elem(shape, g[[0, 0, 0, 0]] / n));
            })),
        )
    }

    /// Per-channel mean over batch and space: `[N,C,H,W] -> [1,C,1,1]`.
    pub fn mean_cvec(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dim();
        let cnt = (n * h * w) as f64;
        let mut out = Array4::zeros((1, c, 1, 1));
        for ci in 0..c {
            out[[0, ci, 0, 0]] = vx.index_axis(Axis(1), ci).sum() / cnt;
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array4::zeros((n, c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(1), ci).fill(g[[0, ci, 0, 0]] / cnt);
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Per-sample sum over channel and space: `[N,C,H,W] -> [N,1,1,1]`.
    pub fn sum_spatial(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dim();
        let mut out = Array4::zeros((n, 1, 1, 1));
        for ni in 0..n {
            out[[ni, 0, 0, 0]] = vx.index_axis(Axis(0), ni).sum();
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    dx.index_axis_mut(Axis(0), ni).fill(g[[ni, 0, 0, 0]]);
                }
                sink(x.0, dx);
            })),
        )
    }

    // ---------------------------------------------------------------------
    // Structure
    // ---------------------------------------------------------------------

    /// Channel-wise concatenation; all inputs share N, H, W.
    pub fn concat_c(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_c: empty input list"));
        }
        let s0 = self.shape(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if [s[0], s[2], s[3]] != [s0[0], s0[2], s0[3]] {
                return Err(shape_err(format!(
                    "concat_c: {s:?} incompatible with {s0:?}"
                )));
            }
            widths.push(s[1]);
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err(format!("concat_c: {e}")))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut at = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let piece = g.slice(ndarray::s![.., at..at + w, .., ..]).to_owned();
                    sink(id, piece);
                    at += w;
                }
            })),
        ))
    }

    /// Channel slice `[lo, hi)`.
    pub fn slice_c(&self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape(x);
        if lo >= hi || hi > s[1] {
            return Err(shape_err(format!(
                "slice_c: [{lo},{hi}) out of range for {} channels",
                s[1]
            )));
        }
        let vx = self.value(x);
        let out = vx.slice(ndarray::s![.., lo..hi, .., ..]).to_owned();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array4::zeros((s[0], s[1], s[2], s[3]));
                dx.slice_mut(ndarray::s![.., lo..hi, .., ..]).assign(g);
                sink(x.0, dx);
            })),
        ))
    }

    // ---------------------------------------------------------------------
    // Convolution
    // ---------------------------------------------------------------------

    /// 2-D convolution with square kernel, zero padding `pad`, stride `stride`.
    /// `w: [OC, C, K, K]`, optional `b: [1, OC, 1, 1]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, wc, k, k2) = (sw[0], sw[1], sw[2], sw[3]);
        if k != k2 {
            return Err(shape_err(format!("conv2d: non-square kernel {k}x{k2}")));
        }
        if wc != c {
            return Err(shape_err(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!(
                "conv2d: spatial {h}x{wd} (pad {pad}) smaller than kernel {k}"
            )));
        }
        if let Some(bv) = b {
            let sb = self.shape(bv);
            if sb != [1, oc, 1, 1] {
                return Err(shape_err(format!("conv2d: bias shape {sb:?} != [1,{oc},1,1]")));
            }
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let vx = self.value(x);
        let vw = self.value(w);
        let vb = b.map(|bv| self.value(bv));

        let w2 = vw
            .to_shape((oc, c * k * k))
            .expect("kernel reshape")
            .to_owned();

        let per_sample: Vec<Array2<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col(&vx.index_axis(Axis(0), ni), k, stride, pad, oh, ow);
                w2.dot(&cols)
            })
            .collect();

        let mut out = Array4::zeros((n, oc, oh, ow));
        for (ni, m) in per_sample.into_iter().enumerate() {
            let r = m.into_shape_with_order((oc, oh, ow)).expect("conv reshape");
            out.index_axis_mut(Axis(0), ni).assign(&r);
        }
        if let Some(bv) = &vb {
            out += &bv.view();
        }

        let geom = ConvGeom {
            stride,
            pad,
            k,
            c,
            h,
            wd,
            oh,
            ow,
            oc,
        };
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (dx, dw) = conv2d_backward(g, &vx, &vw, &geom);
                sink(x.0, dx);
                sink(w.0, dw);
                if let Some(bv) = b {
                    let mut db = Array4::zeros((1, geom.oc, 1, 1));
                    for ci in 0..geom.oc {
                        db[[0, ci, 0, 0]] = g.index_axis(Axis(1), ci).sum();
                    }
                    sink(bv.0, db);
                }
            })),
        ))
    }

    // ---------------------------------------------------------------------
    // Pooling and resampling
    // ---------------------------------------------------------------------

    /// Stride-1 max pool with odd kernel `k`, symmetric zero padding
    /// `(k-1)/2`; output spatial size equals input size. Out-of-image cells
    /// contribute the padding value 0.
    pub fn maxpool_same(&self, x: Var, k: usize) -> Result<Var> {
        if k % 2 == 0 || k == 0 {
            return Err(crate::error::config_err(format!(
                "maxpool_same: kernel must be odd, got {k}"
            )));
        }
        let sx = self.shape(x);
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h == 0 || w == 0 {
            return Err(shape_err("maxpool_same: empty spatial extent"));
        }
        let vx = self.value(x);
        let pad = (k - 1) / 2;

        let mut out = Array4::zeros((n, c, h, w));
        let mut arg: Array4<i64> = Array4::from_elem((n, c, h, w), -1);
        {
            let results: Vec<(Array2<f64>, Array2<i64>)> = (0..n * c)
                .into_par_iter()
                .map(|nc| {
                    let (ni, ci) = (nc / c, nc % c);
                    let plane = vx.index_axis(Axis(0), ni);
                    let plane = plane.index_axis(Axis(0), ci);
                    maxpool_plane(&plane, k, pad)
                })
                .collect();
            for (nc, (o, a)) in results.into_iter().enumerate() {
                let (ni, ci) = (nc / c, nc % c);
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&o);
                arg.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&a);
            }
        }

        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for oi in 0..h {
                            for oj in 0..w {
                                let a = arg[[ni, ci, oi, oj]];
                                if a >= 0 {
                                    let (ii, jj) = ((a as usize) / w, (a as usize) % w);
                                    dx[[ni, ci, ii, jj]] += g[[ni, ci, oi, oj]];
                                }
                            }
                        }
                    }
                }
                sink(x.0, dx);
            })),
        ))
    }

    /// Bilinear upsampling (half-pixel alignment, `align_corners = false`).
    /// Target must be at least the current size; equal size is an exact
    /// passthrough.
    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x);
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if out_h < h || out_w < w {
            return Err(shape_err(format!(
                "upsample_bilinear: target {out_h}x{out_w} smaller than source {h}x{w}"
            )));
        }
        let vx = self.value(x);
        if out_h == h && out_w == w {
            let yc = Arc::clone(&vx);
            return Ok(self.push_arc(
                yc,
                Some(Box::new(move |g, sink| sink(x.0, g.clone()))),
            ));
        }

        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let mut out = Array4::zeros((n, c, out_h, out_w));
        for ni in 0..n {
            for ci in 0..c {
                for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let v00 = vx[[ni, ci, r0, c0]];
                        let v01 = vx[[ni, ci, r0, c1]];
                        let v10 = vx[[ni, ci, r1, c0]];
                        let v11 = vx[[ni, ci, r1, c1]];
                        out[[ni, ci, oi, oj]] = (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
                            + fr * ((1.0 - fc) * v10 + fc * v11);
                    }
                }
            }
        }

        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                                let go = g[[ni, ci, oi, oj]];
                                dx[[ni, ci, r0, c0]] += go * (1.0 - fr) * (1.0 - fc);
                                dx[[ni, ci, r0, c1]] += go * (1.0 - fr) * fc;
                                dx[[ni, ci, r1, c0]] += go * fr * (1.0 - fc);
                                dx[[ni, ci, r1, c1]] += go * fr * fc;
                            }
                        }
                    }
                }
                sink(x.0, dx);
            })),
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// leaf reachable from `loss` (unreached leaves report `None`).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(shape_err(format!(
                "backward: loss must be [1,1,1,1], got {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes.borrow();
        let mut g: Vec<Option<Array4<f64>>> = (0..nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if nodes[i].back.is_some() {
                if let Some(gi) = g[i].take() {
                    let back = nodes[i].back.as_ref().unwrap();
                    back(&gi, &mut |p: usize, contrib: Array4<f64>| {
                        match &mut g[p] {
                            Some(acc) => {
                                debug_assert_eq!(acc.dim(), contrib.dim());
                                *acc += &contrib;
                            }
                            slot @ None => *slot = Some(contrib),
                        }
                    });
                }
            }
        }
        Ok(Grads { g })
    }
}

// -------------------------------------------------------------------------
// Convolution internals
// -------------------------------------------------------------------------

struct ConvGeom {
    stride: usize,
    pad: usize,
    k: usize,
    c: usize,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    oc: usize,
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = cols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[ci, ii as usize, jj as usize]] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

fn conv2d_backward(
    g: &Array4<f64>,
    x: &Array4<f64>,
    w: &Array4<f64>,
    geom: &ConvGeom,
) -> (Array4<f64>, Array4<f64>) {
    let n = x.dim().0;
    let ckk = geom.c * geom.k * geom.k;
    let w2 = w.to_shape((geom.oc, ckk)).expect("kernel reshape").to_owned();
    let w2t = w2.t().to_owned();

    let per_sample: Vec<(ndarray::Array3<f64>, Array2<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let gn = g
                .index_axis(Axis(0), ni)
                .to_shape((geom.oc, geom.oh * geom.ow))
                .expect("grad reshape")
                .to_owned();
            let cols = im2col(
                &x.index_axis(Axis(0), ni),
                geom.k,
                geom.stride,
                geom.pad,
                geom.oh,
                geom.ow,
            );
            let dcols = w2t.dot(&gn);
            let dxn = col2im(
                &dcols.view(),
                geom.c,
                geom.h,
                geom.wd,
                geom.k,
                geom.stride,
                geom.pad,
                geom.oh,
                geom.ow,
            );
            let dwn = gn.dot(&cols.t());
            (dxn, dwn)
        })
        .collect();

    let mut dx = Array4::zeros((n, geom.c, geom.h, geom.wd));
    let mut dw2 = Array2::zeros((geom.oc, ckk));
    for (ni, (dxn, dwn)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), ni).assign(&dxn);
        dw2 += &dwn;
    }
    let dw = dw2
        .into_shape_with_order((geom.oc, geom.c, geom.k, geom.k))
        .expect("dw reshape");
    (dx, dw)
}

// -------------------------------------------------------------------------
// Pooling / resampling internals
// -------------------------------------------------------------------------

/// Max over each k-by-k window (stride 1, zero padding). Returns the pooled
/// plane and per-pixel argmax as flat `h*W + w` indices, `-1` when the
/// implicit zero padding wins. Ties go to the first cell in row-major scan
/// order, so results are deterministic.
fn maxpool_plane(x: &ndarray::ArrayView2<f64>, k: usize, pad: usize) -> (Array2<f64>, Array2<i64>) {
    let (h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    let mut arg = Array2::from_elem((h, w), -1i64);
    for oi in 0..h {
        for oj in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut bi: i64 = -1;
            let mut saw_oob = false;
            for ki in 0..k {
                let ii = (oi + ki) as isize - pad as isize;
                if ii < 0 || ii >= h as isize {
                    saw_oob = true;
                    continue;
                }
                for kj in 0..k {
                    let jj = (oj + kj) as isize - pad as isize;
                    if jj < 0 || jj >= w as isize {
                        saw_oob = true;
                        continue;
                    }
                    let v = x[[ii as usize, jj as usize]];
                    if v > best {
                        best = v;
                        bi = (ii as usize * w + jj as usize) as i64;
                    }
                }
            }
            if saw_oob && best < 0.0 {
                out[[oi, oj]] = 0.0;
                arg[[oi, oj]] = -1;
            } else {
                out[[oi, oj]] = best;
                arg[[oi, oj]] = bi;
            }
        }
    }
    (out, arg)
}

/// Source taps for one axis of half-pixel bilinear resampling.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i0 = i0.min(in_len - 1);
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Sum `[N,C,H,W]` down to `[1,C,1,1]`.
fn sum_to_cvec(g: &Array4<f64>) -> Array4<f64> {
    let c = g.dim().1;
    let mut out = Array4::zeros((1, c, 1, 1));
    for ci in 0..c {
        out[[0, ci, 0, 0]] = g.index_axis(Axis(1), ci).sum();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t4(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_vec(shape, data).unwrap()
    }

    /// Central finite differences of a scalar-valued rebuild against the
    /// analytic gradient of one leaf.
    fn check_fd<F>(input: Array4<f64>, build: F, tol: f64)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();

        let eps = 1e-6;
        let flat: Vec<f64> = input.iter().copied().collect();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += eps;
            let mut minus = flat.clone();
            minus[i] -= eps;
            let shape = input.dim();
            let eval = |data: Vec<f64>| {
                let t = Tape::new();
                let v = t.leaf(Array4::from_shape_vec(shape, data).unwrap());
                t.scalar(build(&t, v))
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[i];
            assert!(
                (a - fd).abs() <= tol * (1.0 + fd.abs()),
                "grad mismatch at {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn add_mul_backward() {
        let t = Tape::new();
        let a = t.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let b = t.leaf(t4(vec![5.0, 6.0, 7.0, 8.0], (1, 1, 2, 2)));
        let y = t.mul(t.add(a, b).unwrap(), a).unwrap();
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        // d/da (a+b)*a = 2a + b, d/db = a
        let ga = g.wrt(a).unwrap();
        let gb = g.wrt(b).unwrap();
        assert_eq!(ga[[0, 0, 0, 0]], 2.0 + 5.0);
        assert_eq!(ga[[0, 0, 1, 1]], 8.0 + 8.0);
        assert_eq!(gb[[0, 0, 0, 1]], 2.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let t = Tape::new();
        let a = t.leaf(Array4::zeros((1, 1, 2, 2)));
        let b = t.leaf(Array4::zeros((1, 1, 3, 2)));
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        // 1x1x3x3 input, single 3x3 kernel, pad 1: center output is the
        // full inner product.
        let t = Tape::new();
        let x = t.leaf(t4((1..=9).map(|v| v as f64).collect(), (1, 1, 3, 3)));
        let w = t.leaf(t4(vec![0.1; 9], (1, 1, 3, 3)));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let v = t.value(y);
        let expected_center: f64 = (1..=9).map(|v| v as f64 * 0.1).sum();
        assert!((v[[0, 0, 1, 1]] - expected_center).abs() < 1e-12);
        // corner (0,0): window rows -1..1, cols -1..1 -> only 4 valid cells
        let expected_corner = 0.1 * (1.0 + 2.0 + 4.0 + 5.0);
        assert!((v[[0, 0, 0, 0]] - expected_corner).abs() < 1e-12);
    }

    #[test]
    fn conv2d_gradcheck() {
        let input = t4(
            vec![
                0.5, -0.3, 0.8, 0.1, 0.9, -0.7, 0.2, 0.4, -0.1, 0.6, 0.3, -0.5, 0.7, 0.2, -0.9,
                0.05, 0.35, -0.25,
            ],
            (1, 2, 3, 3),
        );
        check_fd(
            input,
            |t, x| {
                let w = t.leaf(t4(
                    vec![
                        0.2, -0.1, 0.3, 0.05, -0.4, 0.15, 0.25, -0.2, 0.1, 0.3, -0.3, 0.2, 0.1,
                        0.05, -0.15, 0.4, -0.05, 0.35,
                    ],
                    (1, 2, 3, 3),
                ));
                let y = t.conv2d(x, w, None, 1, 1).unwrap();
                t.mean_all(t.mul(y, y).unwrap())
            },
            1e-6,
        );
    }

    #[test]
    fn strided_conv_shape() {
        let t = Tape::new();
        let x = t.leaf(Array4::zeros((2, 3, 8, 8)));
        let w = t.leaf(Array4::zeros((5, 3, 3, 3)));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y), [2, 5, 4, 4]);
    }

    #[test]
    fn maxpool_hot_pixel() {
        let t = Tape::new();
        let mut x = Array4::zeros((1, 1, 5, 5));
        x[[0, 0, 2, 2]] = 3.0;
        let v = t.leaf(x);
        let y = t.maxpool_same(v, 3).unwrap();
        let out = t.value(y);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=3).contains(&i) && (1..=3).contains(&j) {
                    3.0
                } else {
                    0.0
                };
                assert_eq!(out[[0, 0, i, j]], expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn maxpool_negative_interior_keeps_value() {
        // Interior windows have no padding; a fully negative window must not
        // be clipped to the padding value.
        let t = Tape::new();
        let x = t.leaf(Array4::from_elem((1, 1, 5, 5), -2.0));
        let y = t.maxpool_same(x, 3).unwrap();
        let out = t.value(y);
        assert_eq!(out[[0, 0, 2, 2]], -2.0);
        assert_eq!(out[[0, 0, 0, 0]], 0.0); // border window sees padding
    }

    #[test]
    fn maxpool_gradcheck() {
        let input = t4(
            vec![
                0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 0.15, 0.55, 0.35, 0.95, 0.25, 0.45,
                0.65,
            ],
            (1, 1, 4, 4),
        );
        check_fd(
            input,
            |t, x| {
                let y = t.maxpool_same(x, 3).unwrap();
                t.mean_all(t.mul(y, y).unwrap())
            },
            1e-6,
        );
    }

    #[test]
    fn upsample_identity_is_bitwise() {
        let t = Tape::new();
        let x = t.leaf(t4(vec![0.13, 0.57, 0.91, 0.27], (1, 1, 2, 2)));
        let y = t.upsample_bilinear(x, 2, 2).unwrap();
        assert_eq!(*t.value(x), *t.value(y));
    }

    #[test]
    fn upsample_2x2_to_4x4_reference() {
        let t = Tape::new();
        let x = t.leaf(t4(vec![0.0, 1.0, 0.0, 1.0], (1, 1, 2, 2)));
        let y = t.upsample_bilinear(x, 4, 4).unwrap();
        let v = t.value(y);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (v[[0, 0, i, j]] - expect[j]).abs() < 1e-12,
                    "row {i} col {j}: {}",
                    v[[0, 0, i, j]]
                );
            }
        }
    }

    #[test]
    fn upsample_rejects_downscale() {
        let t = Tape::new();
        let x = t.leaf(Array4::zeros((1, 1, 4, 4)));
        assert!(t.upsample_bilinear(x, 2, 4).is_err());
    }

    #[test]
    fn upsample_gradcheck() {
        let input = t4(vec![0.2, 0.9, 0.4, 0.7], (1, 1, 2, 2));
        check_fd(
            input,
            |t, x| {
                let y = t.upsample_bilinear(x, 5, 5).unwrap();
                t.mean_all(t.mul(y, y).unwrap())
            },
            1e-6,
        );
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let t = Tape::new();
        let a = t.leaf(t4(vec![1.0, 2.0], (1, 2, 1, 1)));
        let b = t.leaf(t4(vec![3.0], (1, 1, 1, 1)));
        let cat = t.concat_c(&[a, b]).unwrap();
        assert_eq!(t.shape(cat), [1, 3, 1, 1]);
        let sl = t.slice_c(cat, 1, 3).unwrap();
        let loss = t.sum_all(sl);
        let g = t.backward(loss).unwrap();
        assert_eq!(*g.wrt(a).unwrap(), t4(vec![0.0, 1.0], (1, 2, 1, 1)));
        assert_eq!(*g.wrt(b).unwrap(), t4(vec![1.0], (1, 1, 1, 1)));
    }

    #[test]
    fn bn_style_composite_gradcheck() {
        // mean/variance normalization composed from primitives
        let input = t4(
            vec![0.5, 1.5, -0.5, 2.0, 0.3, -1.2, 0.9, 0.1],
            (2, 1, 2, 2),
        );
        check_fd(
            input,
            |t, x| {
                let mu = t.mean_cvec(x);
                let xc = t.add_cvec(x, t.scale(mu, -1.0)).unwrap();
                let var = t.mean_cvec(t.mul(xc, xc).unwrap());
                let inv = t.recip(t.sqrt(t.add_scalar(var, 1e-5)));
                let y = t.mul_cvec(xc, inv).unwrap();
                let z = t.sigmoid(y);
                t.mean_all(z)
            },
            1e-5,
        );
    }

    #[test]
    fn sum_spatial_per_sample() {
        let t = Tape::new();
        let x = t.leaf(t4(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], (2, 1, 2, 2)));
        let s = t.sum_spatial(x);
        let v = t.value(s);
        assert_eq!(v[[0, 0, 0, 0]], 10.0);
        assert_eq!(v[[1, 0, 0, 0]], 26.0);
    }

    #[test]
    fn fanout_accumulates() {
        // y = x used twice through different paths must sum gradients
        let t = Tape::new();
        let x = t.leaf(array![[[[2.0]]]]);
        let y = t.add(t.scale(x, 3.0), t.scale(x, 4.0)).unwrap();
        let g = t.backward(t.sum_all(y)).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0, 0, 0]], 7.0);
    }
}
