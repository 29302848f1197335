//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Tape`] is a growing arena of value slots. Every op validates shapes,
//! computes its forward result eagerly, checks it for NaN/Inf, and appends
//! a node holding the inputs it needs for the adjoint. [`Tape::backward`]
//! walks the nodes once in reverse creation order (creation order is a
//! topological order by construction) and accumulates gradients
//! additively, so values feeding several consumers are handled naturally.
//!
//! Gradient work is skipped for sub-graphs that cannot reach a watched
//! leaf: `needs_grad` propagates forward from watched leaves, and each
//! adjoint only fills inputs that need it (this is what keeps the frozen
//! backbone free: its weight leaves are plain constants).

use super::kernels as k;
use super::{broadcast_shape, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Scale { x: ValId, c: T },
    Exp { x: ValId },
    Sigmoid { x: ValId },
    Silu { x: ValId },
    Softplus { x: ValId },
    Gelu { x: ValId },
    Matmul { a: ValId, b: ValId },
    Permute { x: ValId, axes: Vec<usize> },
    Reshape { x: ValId },
    Concat { parts: Vec<ValId>, axis: usize },
    Slice { x: ValId, axis: usize, start: usize },
    Conv2d { x: ValId, w: ValId, b: Option<ValId>, stride: usize },
    ConvT2d { x: ValId, w: ValId, b: Option<ValId> },
    DwConv1d { x: ValId, w: ValId, b: ValId },
    PatchExtract { x: ValId, patch: usize },
    AvgPool2d { x: ValId, kernel: usize },
    GlobalAvgPool { x: ValId },
    GlobalMaxPool { x: ValId, argmax: Vec<usize> },
    UpsampleBilinear { x: ValId, factor: usize },
    LayerNorm { x: ValId, rstd: Vec<T> },
    Softmax { x: ValId },
    Sum { x: ValId },
    StopGrad,
    SsmScan {
        u: ValId,
        a: ValId,
        bseq: ValId,
        cseq: ValId,
        delta: ValId,
        d: ValId,
        h: Vec<T>,
    },
    BceLogits { x: ValId, target: Vec<T>, weight: Vec<T> },
    DiceLoss { p: ValId, target: Vec<T>, weight: Vec<T>, num: T, den: T },
}

struct Slot<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation with eager forward values.
pub struct Tape<T> {
    slots: Vec<Slot<T>>,
    grads: Vec<Option<Vec<T>>>,
    ran_backward: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool, label: &'static str) -> Result<ValId> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(label));
        }
        self.slots.push(Slot { shape, data, op, needs_grad });
        self.grads.push(None);
        Ok(ValId(self.slots.len() - 1))
    }

    fn ng(&self, id: ValId) -> bool {
        self.slots[id.0].needs_grad
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn data(&self, id: ValId) -> &[T] {
        &self.slots[id.0].data
    }

    pub fn to_tensor(&self, id: ValId) -> Tensor<T> {
        Tensor::new(self.slots[id.0].shape.clone(), self.slots[id.0].data.clone())
            .expect("tape slot is always consistent")
    }

    /// Value of a single-element slot.
    pub fn scalar(&self, id: ValId) -> Result<T> {
        let s = &self.slots[id.0];
        if s.data.len() != 1 {
            return Err(Error::shape("scalar", format!("shape {:?} is not scalar", s.shape)));
        }
        Ok(s.data[0])
    }

    /// Gradient accumulated for `id` by [`Tape::backward`]; `None` when the
    /// value was never reached (for a watched leaf that means zero grad).
    pub fn grad(&self, id: ValId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Record a constant (no gradient will be computed for it).
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<ValId> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, "constant")
    }

    /// Record a watched leaf: backward will accumulate its gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<ValId> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, "param")
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<ValId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", format!("shape {:?} vs {} values", shape, data.len())));
        }
        self.push(shape, data, Op::Leaf, false, "constant")
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Elementwise add with broadcasting from size-1 axes.
    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (sa, sb) = (&self.slots[a.0], &self.slots[b.0]);
        let data = if sa.shape == sb.shape {
            sa.data.iter().zip(&sb.data).map(|(&x, &y)| x + y).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            k::for_each_broadcast(&out_shape, &sa.shape, &sb.shape, |oi, ai, bi| {
                out[oi] = sa.data[ai] + sb.data[bi];
            });
            out
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out_shape, data, Op::Add { a, b }, ng, "add")
    }

    /// Elementwise multiply with broadcasting from size-1 axes.
    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (sa, sb) = (&self.slots[a.0], &self.slots[b.0]);
        let data = if sa.shape == sb.shape {
            sa.data.iter().zip(&sb.data).map(|(&x, &y)| x * y).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            k::for_each_broadcast(&out_shape, &sa.shape, &sb.shape, |oi, ai, bi| {
                out[oi] = sa.data[ai] * sb.data[bi];
            });
            out
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out_shape, data, Op::Mul { a, b }, ng, "mul")
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> Result<ValId> {
        let c = T::from_f64(c);
        let s = &self.slots[x.0];
        let data = s.data.iter().map(|&v| v * c).collect();
        let ng = self.ng(x);
        self.push(s.shape.clone(), data, Op::Scale { x, c }, ng, "scale")
    }

    pub fn neg(&mut self, x: ValId) -> Result<ValId> {
        self.scale(x, -1.0)
    }

    fn unary(&mut self, x: ValId, f: impl Fn(T) -> T, op: Op<T>, label: &'static str) -> Result<ValId> {
        let s = &self.slots[x.0];
        let data = s.data.iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(s.shape.clone(), data, op, ng, label)
    }

    pub fn exp(&mut self, x: ValId) -> Result<ValId> {
        self.unary(x, |v| v.exp(), Op::Exp { x }, "exp")
    }

    pub fn sigmoid(&mut self, x: ValId) -> Result<ValId> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x }, "sigmoid")
    }

    /// silu(x) = x * sigmoid(x)
    pub fn silu(&mut self, x: ValId) -> Result<ValId> {
        self.unary(x, |v| v * sigmoid_scalar(v), Op::Silu { x }, "silu")
    }

    /// Numerically stable softplus: max(x,0) + ln(1 + exp(-|x|)).
    pub fn softplus(&mut self, x: ValId) -> Result<ValId> {
        self.unary(x, softplus_scalar, Op::Softplus { x }, "softplus")
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: ValId) -> Result<ValId> {
        self.unary(x, gelu_scalar, Op::Gelu { x }, "gelu")
    }

    pub fn stop_grad(&mut self, x: ValId) -> Result<ValId> {
        let s = &self.slots[x.0];
        self.push(s.shape.clone(), s.data.clone(), Op::StopGrad, false, "stop_grad")
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: ValId, shape: Vec<usize>) -> Result<ValId> {
        let s = &self.slots[x.0];
        if numel(&shape) != s.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", s.shape, shape)));
        }
        let data = s.data.clone();
        let ng = self.ng(x);
        self.push(shape, data, Op::Reshape { x }, ng, "reshape")
    }

    pub fn permute(&mut self, x: ValId, axes: &[usize]) -> Result<ValId> {
        let s = &self.slots[x.0];
        let rank = s.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {:?} for rank {}", axes, rank)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s.shape[a]).collect();
        let data = permute_copy(&s.data, &s.shape, axes);
        let ng = self.ng(x);
        self.push(out_shape, data, Op::Permute { x, axes: axes.to_vec() }, ng, "permute")
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: ValId) -> Result<ValId> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", "rank < 2".to_string()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[ValId], axis: usize) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no parts"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {} for rank {}", axis, first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", sh, first, axis)));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); numel(&out_shape)];
        let out_block = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s = &self.slots[p.0];
            let blk = s.shape[axis] * inner;
            for o in 0..outer {
                data[o * out_block + offset..o * out_block + offset + blk]
                    .copy_from_slice(&s.data[o * blk..(o + 1) * blk]);
            }
            offset += blk;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out_shape, data, Op::Concat { parts: parts.to_vec(), axis }, ng, "concat")
    }

    pub fn slice(&mut self, x: ValId, axis: usize, start: usize, len: usize) -> Result<ValId> {
        let s = &self.slots[x.0];
        if axis >= s.shape.len() || start + len > s.shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("axis {} range {}..{} of {:?}", axis, start, start + len, s.shape),
            ));
        }
        let mut out_shape = s.shape.clone();
        out_shape[axis] = len;
        let outer: usize = s.shape[..axis].iter().product();
        let inner: usize = s.shape[axis + 1..].iter().product();
        let in_block = s.shape[axis] * inner;
        let mut data = vec![T::zero(); numel(&out_shape)];
        for o in 0..outer {
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&s.data[o * in_block + start * inner..o * in_block + (start + len) * inner]);
        }
        let ng = self.ng(x);
        self.push(out_shape, data, Op::Slice { x, axis, start }, ng, "slice")
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Batched matmul: [..,m,k] x [..,k,p] -> [..,m,p], equal leading dims.
    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", ka, kb)));
        }
        let bt: usize = sa[..sa.len() - 2].iter().product();
        let data = k::matmul_fwd(&self.slots[a.0].data, &self.slots[b.0].data, bt, m, ka, p);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(p);
        let ng = self.ng(a) || self.ng(b);
        self.push(out_shape, data, Op::Matmul { a, b }, ng, "matmul")
    }

    /// y = x W + b over the last axis. x: [..,din], w: [din,dout], b: [dout].
    pub fn linear(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap_or(&0) != ws[0] {
            return Err(Error::shape("linear", format!("x {:?} w {:?}", xs, ws)));
        }
        let din = ws[0];
        let dout = ws[1];
        let m: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, vec![m, din])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} want [{}]", self.shape(b), dout)));
            }
            let brow = self.reshape(b, vec![1, dout])?;
            y = self.add(y, brow)?;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(dout);
        self.reshape(y, out_shape)
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Same-padded 2-D convolution, odd kernel, NHWC layout. `x` may be
    /// [h,w,ci] or [n,h,w,ci]; `w` is [k,k,ci,co].
    pub fn conv2d(&mut self, x: ValId, w: ValId, b: Option<ValId>, stride: usize) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::shape("conv2d", format!("kernel {:?}", ws)));
        }
        let kk = ws[0];
        if kk % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {} must be odd", kk)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride 0"));
        }
        let (n, h, wid, ci) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(Error::shape("conv2d", format!("input {:?}", xs))),
        };
        if ci != ws[2] {
            return Err(Error::shape("conv2d", format!("in channels {} vs kernel {:?}", ci, ws)));
        }
        if h < kk || wid < kk {
            return Err(Error::shape("conv2d", format!("input {}x{} smaller than kernel {}", h, wid, kk)));
        }
        let co = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} want [{}]", self.shape(b), co)));
            }
        }
        let bias_data: Vec<T> = b.map(|b| self.slots[b.0].data.clone()).unwrap_or_default();
        let data = k::conv2d_fwd(&self.slots[x.0].data, n, h, wid, ci, &self.slots[w.0].data, kk, co, &bias_data, stride);
        let (oh, ow) = k::conv2d_out_size(h, wid, kk, stride);
        let out_shape = if xs.len() == 3 { vec![oh, ow, co] } else { vec![n, oh, ow, co] };
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(out_shape, data, Op::Conv2d { x, w, b, stride }, ng, "conv2d")
    }

    /// Transposed convolution with kernel == stride (exact s-fold
    /// upsampling). x: [h,w,ci], w: [s,s,ci,co].
    pub fn conv_transpose2d(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || xs[2] != ws[2] {
            return Err(Error::shape("conv_transpose2d", format!("x {:?} w {:?}", xs, ws)));
        }
        let s = ws[0];
        let co = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let bias_data: Vec<T> = b.map(|b| self.slots[b.0].data.clone()).unwrap_or_default();
        let data = k::convt2d_fwd(&self.slots[x.0].data, xs[0], xs[1], xs[2], &self.slots[w.0].data, s, co, &bias_data);
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(vec![xs[0] * s, xs[1] * s, co], data, Op::ConvT2d { x, w, b }, ng, "conv_transpose2d")
    }

    /// Depthwise causal conv over a sequence. x: [l,e], w: [width,e], b: [e].
    pub fn dwconv1d(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [xs[1]] {
            return Err(Error::shape("dwconv1d", format!("x {:?} w {:?}", xs, ws)));
        }
        let data = k::dwconv1d_fwd(&self.slots[x.0].data, xs[0], xs[1], &self.slots[w.0].data, ws[0], &self.slots[b.0].data);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(xs, data, Op::DwConv1d { x, w, b }, ng, "dwconv1d")
    }

    /// [h,w,c] -> [(h/p)*(w/p), p*p*c] patch tokens.
    pub fn patch_extract(&mut self, x: ValId, patch: usize) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || patch == 0 || xs[0] % patch != 0 || xs[1] % patch != 0 {
            return Err(Error::invalid(
                "patch_extract",
                format!("patch {} must divide spatial dims of {:?}", patch, xs),
            ));
        }
        let data = k::patch_extract_fwd(&self.slots[x.0].data, xs[0], xs[1], xs[2], patch);
        let t = (xs[0] / patch) * (xs[1] / patch);
        let ng = self.ng(x);
        self.push(vec![t, patch * patch * xs[2]], data, Op::PatchExtract { x, patch }, ng, "patch_extract")
    }

    /// Non-overlapping average pool with kernel == stride.
    pub fn avg_pool2d(&mut self, x: ValId, kernel: usize) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || kernel == 0 || xs[0] % kernel != 0 || xs[1] % kernel != 0 {
            return Err(Error::invalid(
                "avg_pool2d",
                format!("kernel {} must divide spatial dims of {:?}", kernel, xs),
            ));
        }
        let data = k::avgpool2d_fwd(&self.slots[x.0].data, xs[0], xs[1], xs[2], kernel);
        let ng = self.ng(x);
        self.push(vec![xs[0] / kernel, xs[1] / kernel, xs[2]], data, Op::AvgPool2d { x, kernel }, ng, "avg_pool2d")
    }

    /// Per-channel spatial mean: [h,w,c] -> [c].
    pub fn global_avg_pool(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] * xs[1] == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", xs)));
        }
        let data = k::global_avg_fwd(&self.slots[x.0].data, xs[0] * xs[1], xs[2]);
        let ng = self.ng(x);
        self.push(vec![xs[2]], data, Op::GlobalAvgPool { x }, ng, "global_avg_pool")
    }

    /// Per-channel spatial max: [h,w,c] -> [c]. Gradient routes to the
    /// first row-major maximum on ties.
    pub fn global_max_pool(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] * xs[1] == 0 {
            return Err(Error::shape("global_max_pool", format!("input {:?}", xs)));
        }
        let (data, argmax) = k::global_max_fwd(&self.slots[x.0].data, xs[0] * xs[1], xs[2]);
        let ng = self.ng(x);
        self.push(vec![xs[2]], data, Op::GlobalMaxPool { x, argmax }, ng, "global_max_pool")
    }

    /// Integer-factor bilinear upsampling, align-corners=false convention.
    pub fn upsample_bilinear(&mut self, x: ValId, factor: usize) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::invalid("upsample_bilinear", format!("input {:?} factor {}", xs, factor)));
        }
        let data = k::upsample_bilinear_fwd(&self.slots[x.0].data, xs[0], xs[1], xs[2], factor);
        let ng = self.ng(x);
        self.push(vec![xs[0] * factor, xs[1] * factor, xs[2]], data, Op::UpsampleBilinear { x, factor }, ng, "upsample_bilinear")
    }

    /// Normalize the last axis to mean 0 / variance 1 (no affine; scale
    /// and shift with `mul`/`add` where a learned affine is wanted).
    pub fn layer_norm(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank 0".to_string()))?;
        let rows = numel(&xs) / cols;
        let (data, _means, rstd) = k::layer_norm_fwd(&self.slots[x.0].data, rows, cols);
        let ng = self.ng(x);
        self.push(xs, data, Op::LayerNorm { x, rstd }, ng, "layer_norm")
    }

    /// Softmax over the last axis; rows sum to 1.
    pub fn softmax(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::shape("softmax", "rank 0".to_string()))?;
        let rows = numel(&xs) / cols;
        let data = k::softmax_fwd(&self.slots[x.0].data, rows, cols);
        let ng = self.ng(x);
        self.push(xs, data, Op::Softmax { x }, ng, "softmax")
    }

    /// Sum of all elements -> scalar [1].
    pub fn sum(&mut self, x: ValId) -> Result<ValId> {
        let mut acc = T::zero();
        for &v in &self.slots[x.0].data {
            acc += v;
        }
        let ng = self.ng(x);
        self.push(vec![1], vec![acc], Op::Sum { x }, ng, "sum")
    }

    /// Mean of all elements -> scalar [1].
    pub fn mean(&mut self, x: ValId) -> Result<ValId> {
        let n = self.slots[x.0].data.len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ── selective scan ───────────────────────────────────────────────

    /// Fused selective-scan recurrence. u: [l,e], a: [e,n] (negative decay
    /// rates), bseq/cseq: [l,n], delta: [l,e] (positive step sizes), d: [e].
    pub fn ssm_scan(&mut self, u: ValId, a: ValId, bseq: ValId, cseq: ValId, delta: ValId, d: ValId) -> Result<ValId> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 || us[0] == 0 {
            return Err(Error::shape("ssm_scan", format!("u {:?} (need [l>=1, e])", us)));
        }
        let (l, e) = (us[0], us[1]);
        let asx = self.shape(a).to_vec();
        if asx.len() != 2 || asx[0] != e {
            return Err(Error::shape("ssm_scan", format!("a {:?} want [{}, n]", asx, e)));
        }
        let nst = asx[1];
        if self.shape(bseq) != [l, nst] || self.shape(cseq) != [l, nst] {
            return Err(Error::shape("ssm_scan", "b/c sequence shape".to_string()));
        }
        if self.shape(delta) != [l, e] || self.shape(d) != [e] {
            return Err(Error::shape("ssm_scan", "delta/d shape".to_string()));
        }
        let (y, h) = k::ssm_scan_fwd(
            &self.slots[u.0].data,
            l,
            e,
            nst,
            &self.slots[a.0].data,
            &self.slots[bseq.0].data,
            &self.slots[cseq.0].data,
            &self.slots[delta.0].data,
            &self.slots[d.0].data,
        );
        let ng = [u, a, bseq, cseq, delta, d].iter().any(|&v| self.ng(v));
        self.push(vec![l, e], y, Op::SsmScan { u, a, bseq, cseq, delta, d, h }, ng, "ssm_scan")
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Weighted binary cross entropy from logits, normalized by the weight
    /// mass: sum(w * bce(x, g)) / sum(w). Stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, x: ValId, target: Vec<T>, weight: Vec<T>) -> Result<ValId> {
        let s = &self.slots[x.0];
        if target.len() != s.data.len() || weight.len() != s.data.len() {
            return Err(Error::shape("bce_with_logits", "target/weight length".to_string()));
        }
        let mut num = T::zero();
        let mut den = T::zero();
        for ((&xv, &g), &w) in s.data.iter().zip(&target).zip(&weight) {
            let bce = xv.max(T::zero()) - xv * g + (T::one() + (-xv.abs()).exp()).ln();
            num += w * bce;
            den += w;
        }
        let ng = self.ng(x);
        self.push(vec![1], vec![num / den], Op::BceLogits { x, target, weight }, ng, "bce_with_logits")
    }

    /// Weighted Dice loss on probabilities:
    /// 1 - (2*sum(w p g) + eps) / (sum(w (p+g)) + eps).
    pub fn dice_loss(&mut self, p: ValId, target: Vec<T>, weight: Vec<T>, eps: f64) -> Result<ValId> {
        let s = &self.slots[p.0];
        if target.len() != s.data.len() || weight.len() != s.data.len() {
            return Err(Error::shape("dice_loss", "target/weight length".to_string()));
        }
        let epsv = T::from_f64(eps);
        let two = T::from_f64(2.0);
        let mut num = epsv;
        let mut den = epsv;
        for ((&pv, &g), &w) in s.data.iter().zip(&target).zip(&weight) {
            num += two * w * pv * g;
            den += w * (pv + g);
        }
        let ng = self.ng(p);
        self.push(vec![1], vec![T::one() - num / den], Op::DiceLoss { p, target, weight, num, den }, ng, "dice_loss")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of watched leaves are
    /// readable through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss shape {:?} is not scalar", self.slots[loss.0].shape),
            ));
        }
        if self.ran_backward {
            return Err(Error::invalid("backward", "tape already differentiated"));
        }
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.slots.len()).rev() {
            if matches!(self.slots[i].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &dout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: ValId) -> &mut [T] {
        let n = numel(&self.slots[id.0].shape);
        self.grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop_node(&mut self, i: usize, dout: &[T]) {
        // Ops only reference earlier slots, so splitting the borrow by
        // index is safe; clone small metadata out of the op first.
        match &self.slots[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.slots[i].shape.clone();
                for side in [a, b] {
                    if !self.ng(side) {
                        continue;
                    }
                    let in_shape = self.slots[side.0].shape.clone();
                    let g = self.grad_buf(side);
                    if in_shape == out_shape {
                        for (gv, &d) in g.iter_mut().zip(dout) {
                            *gv += d;
                        }
                    } else {
                        k::for_each_broadcast(&out_shape, &in_shape, &in_shape, |oi, ii, _| {
                            g[ii] += dout[oi];
                        });
                    }
                }
            }
            Op::Mul { a, b } if a == b => {
                // d(x*x) = 2x dx; taking the operand buffer would empty the
                // slot being read, so square is handled on its own.
                let a = *a;
                if self.ng(a) {
                    let two = T::from_f64(2.0);
                    let xdata = std::mem::take(&mut self.slots[a.0].data);
                    let g = self.grad_buf(a);
                    for ((gv, &d), &xv) in g.iter_mut().zip(dout).zip(&xdata) {
                        *gv += two * d * xv;
                    }
                    self.slots[a.0].data = xdata;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.slots[i].shape.clone();
                for (side, other) in [(a, b), (b, a)] {
                    if !self.ng(side) {
                        continue;
                    }
                    let in_shape = self.slots[side.0].shape.clone();
                    let other_shape = self.slots[other.0].shape.clone();
                    let other_data = std::mem::take(&mut self.slots[other.0].data);
                    let g = self.grad_buf(side);
                    if in_shape == out_shape && other_shape == out_shape {
                        for ((gv, &d), &ov) in g.iter_mut().zip(dout).zip(&other_data) {
                            *gv += d * ov;
                        }
                    } else {
                        k::for_each_broadcast(&out_shape, &in_shape, &other_shape, |oi, ii, bi| {
                            g[ii] += dout[oi] * other_data[bi];
                        });
                    }
                    self.slots[other.0].data = other_data;
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.ng(x) {
                    let g = self.grad_buf(x);
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d * c;
                    }
                }
            }
            Op::Exp { x } => {
                let x = *x;
                if self.ng(x) {
                    let y = std::mem::take(&mut self.slots[i].data);
                    let g = self.grad_buf(x);
                    for ((gv, &d), &yv) in g.iter_mut().zip(dout).zip(&y) {
                        *gv += d * yv;
                    }
                    self.slots[i].data = y;
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.ng(x) {
                    let y = std::mem::take(&mut self.slots[i].data);
                    let g = self.grad_buf(x);
                    for ((gv, &d), &yv) in g.iter_mut().zip(dout).zip(&y) {
                        *gv += d * yv * (T::one() - yv);
                    }
                    self.slots[i].data = y;
                }
            }
            Op::Silu { x } => {
                let x = *x;
                if self.ng(x) {
                    let xin = std::mem::take(&mut self.slots[x.0].data);
                    let g = self.grad_buf(x);
                    for ((gv, &d), &xv) in g.iter_mut().zip(dout).zip(&xin) {
                        let s = sigmoid_scalar(xv);
                        *gv += d * s * (T::one() + xv * (T::one() - s));
                    }
                    self.slots[x.0].data = xin;
                }
            }
            Op::Softplus { x } => {
                let x = *x;
                if self.ng(x) {
                    let xin = std::mem::take(&mut self.slots[x.0].data);
                    let g = self.grad_buf(x);
                    for ((gv, &d), &xv) in g.iter_mut().zip(dout).zip(&xin) {
                        *gv += d * sigmoid_scalar(xv);
                    }
                    self.slots[x.0].data = xin;
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.ng(x) {
                    let xin = std::mem::take(&mut self.slots[x.0].data);
                    let g = self.grad_buf(x);
                    for ((gv, &d), &xv) in g.iter_mut().zip(dout).zip(&xin) {
                        *gv += d * gelu_grad_scalar(xv);
                    }
                    self.slots[x.0].data = xin;
                }
            }
            Op::Matmul { a, b } if a == b => {
                let a = *a;
                let sa = self.slots[a.0].shape.clone();
                let (m, kk) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let bt: usize = sa[..sa.len() - 2].iter().product();
                if self.ng(a) {
                    let adata = self.slots[a.0].data.clone();
                    let g = self.grad_buf(a);
                    k::matmul_bwd_a(dout, &adata, bt, m, kk, kk, g);
                    k::matmul_bwd_b(&adata, dout, bt, m, kk, kk, g);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.slots[a.0].shape.clone();
                let sb = self.slots[b.0].shape.clone();
                let (m, kk) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = sb[sb.len() - 1];
                let bt: usize = sa[..sa.len() - 2].iter().product();
                if self.ng(a) {
                    let bdata = std::mem::take(&mut self.slots[b.0].data);
                    let g = self.grad_buf(a);
                    k::matmul_bwd_a(dout, &bdata, bt, m, kk, p, g);
                    self.slots[b.0].data = bdata;
                }
                if self.ng(b) {
                    let adata = std::mem::take(&mut self.slots[a.0].data);
                    let g = self.grad_buf(b);
                    k::matmul_bwd_b(&adata, dout, bt, m, kk, p, g);
                    self.slots[a.0].data = adata;
                }
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let axes = axes.clone();
                if self.ng(x) {
                    let out_shape = self.slots[i].shape.clone();
                    let mut inverse = vec![0usize; axes.len()];
                    for (pos, &a) in axes.iter().enumerate() {
                        inverse[a] = pos;
                    }
                    let gin = permute_copy(dout, &out_shape, &inverse);
                    let g = self.grad_buf(x);
                    for (gv, d) in g.iter_mut().zip(gin) {
                        *gv += d;
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.ng(x) {
                    let g = self.grad_buf(x);
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.slots[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0usize;
                for &p in &parts {
                    let blk = self.slots[p.0].shape[axis] * inner;
                    if self.ng(p) {
                        let g = self.grad_buf(p);
                        for o in 0..outer {
                            let src = &dout[o * out_block + offset..o * out_block + offset + blk];
                            for (gv, &d) in g[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *gv += d;
                            }
                        }
                    }
                    offset += blk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                if self.ng(x) {
                    let in_shape = self.slots[x.0].shape.clone();
                    let out_shape = self.slots[i].shape.clone();
                    let len = out_shape[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let in_block = in_shape[axis] * inner;
                    let g = self.grad_buf(x);
                    for o in 0..outer {
                        let dst = &mut g[o * in_block + start * inner..o * in_block + (start + len) * inner];
                        let src = &dout[o * len * inner..(o + 1) * len * inner];
                        for (gv, &d) in dst.iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let xs = self.slots[x.0].shape.clone();
                let ws = self.slots[w.0].shape.clone();
                let (n, h, wid, ci) = match xs.len() {
                    3 => (1, xs[0], xs[1], xs[2]),
                    _ => (xs[0], xs[1], xs[2], xs[3]),
                };
                let (kk, co) = (ws[0], ws[3]);
                if self.ng(x) {
                    let wdata = std::mem::take(&mut self.slots[w.0].data);
                    let g = self.grad_buf(x);
                    k::conv2d_bwd_input(dout, n, h, wid, ci, &wdata, kk, co, stride, g);
                    self.slots[w.0].data = wdata;
                }
                let need_w = self.ng(w);
                let need_b = b.map(|b| self.ng(b)).unwrap_or(false);
                if need_w || need_b {
                    let xdata = std::mem::take(&mut self.slots[x.0].data);
                    if need_w {
                        let mut dw = std::mem::take(&mut self.grads[w.0])
                            .unwrap_or_else(|| vec![T::zero(); self.slots[w.0].data.len()]);
                        let mut db_local = b.map(|_| vec![T::zero(); co]);
                        k::conv2d_bwd_weights(&xdata, dout, n, h, wid, ci, kk, co, stride, &mut dw, db_local.as_deref_mut());
                        self.grads[w.0] = Some(dw);
                        if need_b {
                            if let (Some(b), Some(dbl)) = (b, db_local) {
                                let g = self.grad_buf(b);
                                for (gv, d) in g.iter_mut().zip(dbl) {
                                    *gv += d;
                                }
                            }
                        }
                    } else if need_b {
                        if let Some(b) = b {
                            let (oh, ow) = k::conv2d_out_size(h, wid, kk, stride);
                            let g = self.grad_buf(b);
                            for pos in 0..n * oh * ow {
                                for c in 0..co {
                                    g[c] += dout[pos * co + c];
                                }
                            }
                        }
                    }
                    self.slots[x.0].data = xdata;
                }
            }
            Op::ConvT2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.slots[x.0].shape.clone();
                let ws = self.slots[w.0].shape.clone();
                let (s, co) = (ws[0], ws[3]);
                let need_x = self.ng(x);
                let need_w = self.ng(w);
                let need_b = b.map(|b| self.ng(b)).unwrap_or(false);
                let xdata = std::mem::take(&mut self.slots[x.0].data);
                let wdata = std::mem::take(&mut self.slots[w.0].data);
                let mut dx = if need_x { Some(vec![T::zero(); xdata.len()]) } else { None };
                let mut dw = if need_w { Some(vec![T::zero(); wdata.len()]) } else { None };
                let mut db = if need_b { Some(vec![T::zero(); co]) } else { None };
                k::convt2d_bwd(
                    &xdata, dout, xs[0], xs[1], xs[2], &wdata, s, co,
                    dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut(),
                );
                self.slots[x.0].data = xdata;
                self.slots[w.0].data = wdata;
                if let Some(dx) = dx {
                    let g = self.grad_buf(x);
                    for (gv, d) in g.iter_mut().zip(dx) {
                        *gv += d;
                    }
                }
                if let Some(dw) = dw {
                    let g = self.grad_buf(w);
                    for (gv, d) in g.iter_mut().zip(dw) {
                        *gv += d;
                    }
                }
                if let (Some(b), Some(db)) = (b, db) {
                    let g = self.grad_buf(b);
                    for (gv, d) in g.iter_mut().zip(db) {
                        *gv += d;
                    }
                }
            }
            Op::DwConv1d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.slots[x.0].shape.clone();
                let ws = self.slots[w.0].shape.clone();
                let xdata = std::mem::take(&mut self.slots[x.0].data);
                let wdata = std::mem::take(&mut self.slots[w.0].data);
                let mut dx = vec![T::zero(); xdata.len()];
                let mut dw = vec![T::zero(); wdata.len()];
                let mut db = vec![T::zero(); xs[1]];
                k::dwconv1d_bwd(&xdata, dout, xs[0], xs[1], &wdata, ws[0], &mut dx, &mut dw, &mut db);
                self.slots[x.0].data = xdata;
                self.slots[w.0].data = wdata;
                if self.ng(x) {
                    let g = self.grad_buf(x);
                    for (gv, d) in g.iter_mut().zip(dx) {
                        *gv += d;
                    }
                }
                if self.ng(w) {
                    let g = self.grad_buf(w);
                    for (gv, d) in g.iter_mut().zip(dw) {
                        *gv += d;
                    }
                }
                if self.ng(b) {
                    let g = self.grad_buf(b);
                    for (gv, d) in g.iter_mut().zip(db) {
                        *gv += d;
                    }
                }
            }
            Op::PatchExtract { x, patch } => {
                let (x, patch) = (*x, *patch);
                if self.ng(x) {
                    let xs = self.slots[x.0].shape.clone();
                    let g = self.grad_buf(x);
                    k::patch_extract_bwd(dout, xs[0], xs[1], xs[2], patch, g);
                }
            }
            Op::AvgPool2d { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                if self.ng(x) {
                    let xs = self.slots[x.0].shape.clone();
                    let g = self.grad_buf(x);
                    k::avgpool2d_bwd(dout, xs[0], xs[1], xs[2], kernel, g);
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if self.ng(x) {
                    let xs = self.slots[x.0].shape.clone();
                    let hw = xs[0] * xs[1];
                    let c = xs[2];
                    let inv = T::from_f64(1.0 / hw as f64);
                    let g = self.grad_buf(x);
                    for pos in 0..hw {
                        for ch in 0..c {
                            g[pos * c + ch] += dout[ch] * inv;
                        }
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                if self.ng(x) {
                    let c = self.slots[x.0].shape[2];
                    let g = self.grad_buf(x);
                    for (ch, &pos) in argmax.iter().enumerate() {
                        g[pos * c + ch] += dout[ch];
                    }
                }
            }
            Op::UpsampleBilinear { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.ng(x) {
                    let xs = self.slots[x.0].shape.clone();
                    let g = self.grad_buf(x);
                    k::upsample_bilinear_bwd(dout, xs[0], xs[1], xs[2], factor, g);
                }
            }
            Op::LayerNorm { x, rstd } => {
                let x = *x;
                let rstd = rstd.clone();
                if self.ng(x) {
                    let y = std::mem::take(&mut self.slots[i].data);
                    let shape = self.slots[i].shape.clone();
                    let cols = *shape.last().unwrap();
                    let rows = y.len() / cols;
                    let g = self.grad_buf(x);
                    k::layer_norm_bwd(&y, dout, &rstd, rows, cols, g);
                    self.slots[i].data = y;
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.ng(x) {
                    let y = std::mem::take(&mut self.slots[i].data);
                    let shape = self.slots[i].shape.clone();
                    let cols = *shape.last().unwrap();
                    let rows = y.len() / cols;
                    let g = self.grad_buf(x);
                    k::softmax_bwd(&y, dout, rows, cols, g);
                    self.slots[i].data = y;
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.ng(x) {
                    let d = dout[0];
                    let g = self.grad_buf(x);
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                }
            }
            Op::StopGrad => {}
            Op::SsmScan { u, a, bseq, cseq, delta, d, h: _ } => {
                let (u, a, bseq, cseq, delta, d) = (*u, *a, *bseq, *cseq, *delta, *d);
                let h = std::mem::take(match &mut self.slots[i].op {
                    Op::SsmScan { h, .. } => h,
                    _ => unreachable!(),
                });
                let us = self.slots[u.0].shape.clone();
                let (l, e) = (us[0], us[1]);
                let nst = self.slots[a.0].shape[1];
                let udata = std::mem::take(&mut self.slots[u.0].data);
                let adata = std::mem::take(&mut self.slots[a.0].data);
                let bdata = std::mem::take(&mut self.slots[bseq.0].data);
                let cdata = std::mem::take(&mut self.slots[cseq.0].data);
                let ddata = std::mem::take(&mut self.slots[delta.0].data);
                let skipdata = std::mem::take(&mut self.slots[d.0].data);
                let mut du = vec![T::zero(); l * e];
                let mut da = vec![T::zero(); e * nst];
                let mut db = vec![T::zero(); l * nst];
                let mut dc = vec![T::zero(); l * nst];
                let mut ddelta = vec![T::zero(); l * e];
                let mut dd = vec![T::zero(); e];
                k::ssm_scan_bwd(
                    &udata, l, e, nst, &adata, &bdata, &cdata, &ddata, &skipdata, &h, dout,
                    &mut du, &mut da, &mut db, &mut dc, &mut ddelta, &mut dd,
                );
                self.slots[u.0].data = udata;
                self.slots[a.0].data = adata;
                self.slots[bseq.0].data = bdata;
                self.slots[cseq.0].data = cdata;
                self.slots[delta.0].data = ddata;
                self.slots[d.0].data = skipdata;
                match &mut self.slots[i].op {
                    Op::SsmScan { h: hh, .. } => *hh = h,
                    _ => unreachable!(),
                }
                for (id, buf) in [(u, du), (a, da), (bseq, db), (cseq, dc), (delta, ddelta), (d, dd)] {
                    if self.ng(id) {
                        let g = self.grad_buf(id);
                        for (gv, d) in g.iter_mut().zip(buf) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::BceLogits { x, target, weight } => {
                let x = *x;
                let (target, weight) = (target.clone(), weight.clone());
                if self.ng(x) {
                    let xdata = std::mem::take(&mut self.slots[x.0].data);
                    let mut den = T::zero();
                    for &w in &weight {
                        den += w;
                    }
                    let d = dout[0] / den;
                    let g = self.grad_buf(x);
                    for (((gv, &xv), &gt), &w) in g.iter_mut().zip(&xdata).zip(&target).zip(&weight) {
                        *gv += d * w * (sigmoid_scalar(xv) - gt);
                    }
                    self.slots[x.0].data = xdata;
                }
            }
            Op::DiceLoss { p, target, weight, num, den } => {
                let p = *p;
                let (num, den) = (*num, *den);
                let (target, weight) = (target.clone(), weight.clone());
                if self.ng(p) {
                    let d = dout[0];
                    let two = T::from_f64(2.0);
                    let g = self.grad_buf(p);
                    for ((gv, &gt), &w) in g.iter_mut().zip(&target).zip(&weight) {
                        // d/dp of (1 - num/den): w*(num - 2 g den) / den^2
                        *gv += d * w * (num - two * gt * den) / (den * den);
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Stable in both tails.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let t = (c0 * (x + c1 * x * x * x)).tanh();
    half * x * (T::one() + t)
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let three = T::from_f64(3.0);
    let half = T::from_f64(0.5);
    let inner = c0 * (x + c1 * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

fn permute_copy<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total = data.len();
    let mut out = vec![data.first().copied().unwrap_or_else(T::zero); total];
    if total == 0 {
        return out;
    }
    // Odometer over output coords; input index tracks via permuted strides.
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut coords = vec![0usize; rank];
    let mut ii = 0usize;
    for item in out.iter_mut().take(total) {
        *item = data[ii];
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            ii += perm_strides[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            coords[axis] = 0;
            ii -= perm_strides[axis] * out_shape[axis];
        }
    }
    out
}
