//! Forward kernels and their adjoints.

use super::tape::{Node, Var};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logs in [`Var::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Spatial padding rule for [`Var::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent is `ceil(in / stride)`, zeros split evenly (extra at
    /// the bottom/right).
    Same,
    /// No padding.
    Valid,
    /// Zeros added explicitly on each side.
    Explicit { top: usize, bottom: usize, left: usize, right: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, axis: usize },
    Reduce { x: usize, kind: ReduceKind, map: Vec<usize>, argmax: Vec<usize>, count: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Transpose { x: usize },
    Conv2d { x: usize, kernel: usize, geom: ConvGeom },
    Upsample { x: usize, factor: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Bce { p: usize, target: Vec<f64> },
    SoftmaxPool { scores: usize, values: usize },
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.into()))
    }
}

fn same_tape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{op}: operands live on different tapes")))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv_geom(xs: &[usize], ks: &[usize], stride: usize, padding: Padding) -> Result<ConvGeom> {
    if xs.len() != 4 {
        return Err(Error::dim("conv2d", format!("input must be [N,H,W,C], got {xs:?}")));
    }
    if ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[3] {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {ks:?} does not fit input {xs:?} (want [k,k,{},C_out])", xs[3]),
        ));
    }
    if stride == 0 {
        return Err(Error::Validation("conv2d stride must be positive".into()));
    }
    let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ks[0], ks[3]);
    let (pt, pb, pl, pr) = match padding {
        Padding::Valid => (0, 0, 0, 0),
        Padding::Explicit { top, bottom, left, right } => (top, bottom, left, right),
        Padding::Same => {
            let pad = |len: usize| {
                let out = len.div_ceil(stride);
                ((out - 1) * stride + k).saturating_sub(len)
            };
            let (ph, pw) = (pad(h), pad(w));
            (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
        }
    };
    let (hp, wp) = (h + pt + pb, w + pl + pr);
    if k > hp || k > wp {
        return Err(Error::dim("conv2d", format!("kernel {k} exceeds padded extent {hp}x{wp} of input {xs:?}")));
    }
    if stride > hp || stride > wp {
        return Err(Error::dim("conv2d", format!("stride {stride} exceeds padded extent {hp}x{wp} of input {xs:?}")));
    }
    Ok(ConvGeom {
        n,
        h,
        w,
        cin,
        k,
        cout,
        stride,
        pad_top: pt,
        pad_left: pl,
        oh: (hp - k) / stride + 1,
        ow: (wp - k) / stride + 1,
    })
}

impl ConvGeom {
    /// Calls `f(out_offset, x_offset, kernel_offset)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let out_off = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let x_off = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                            let k_off = (ky * g.k + kx) * g.cin * g.cout;
                            f(out_off, x_off, k_off);
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(&self, op: &'static str, value: Tensor, node: Op) -> Result<Var<'t>> {
        check_finite(op, value.data())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, node, rg))
    }

    /// Matrix product of `[n,k]` and `[k,m]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape("matmul", self, &other)?;
        let (value, rg) = self.tape.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
            }
            let data = matmul_raw(a.data(), b.data(), sa[0], sa[1], sb[1]);
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            Ok((Tensor::from_parts(vec![sa[0], sb[1]], data), rg))
        })?;
        check_finite("matmul", value.data())?;
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id }, rg))
    }

    /// Affine map `x·W + b` with the bias broadcast over rows.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim("linear", format!("x {xs:?}, W {ws:?}, b {bs:?} do not conform")));
        }
        self.matmul(weight)?.add(bias)
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        same_tape(name, self, &other)?;
        let (value, rg) = self.tape.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let out_shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::dim(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
            let (ma, mb) = (broadcast_map(a.shape(), &out_shape), broadcast_map(b.shape(), &out_shape));
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| match kind {
                    BinaryKind::Add => ad[i] + bd[j],
                    BinaryKind::Sub => ad[i] - bd[j],
                    BinaryKind::Mul => ad[i] * bd[j],
                })
                .collect();
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            Ok::<_, Error>((Tensor::from_parts(out_shape, data), rg))
        })?;
        check_finite(name, value.data())?;
        Ok(self.tape.push(value, Op::Binary { kind, a: self.id, b: other.id }, rg))
    }

    /// Elementwise sum with trailing-aligned broadcasting.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v * factor);
        self.unary("scale", value, Op::Scale { x: self.id, factor })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let x = self.value();
        if self.tape.tracks_kinks() {
            let margin = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let signs: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
            self.tape.note_kinks(margin, signs);
        }
        self.unary("relu", x.map(|v| v.max(0.0)), Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let value = self.value().map(sigmoid);
        self.unary("sigmoid", value, Op::Sigmoid { x: self.id })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.unary("softmax", value, Op::Softmax { x: self.id, axis })
    }

    /// Reduction over `axes`; reduced axes are dropped (all-axes gives `[1]`).
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axes.is_empty() {
            return Err(Error::Degenerate("reduction over an empty axis list".into()));
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::dim("reduce", format!("axes {axes:?} invalid for shape {shape:?}")));
            }
            reduced[a] = true;
        }
        let mut out_shape: Vec<usize> = shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        // Same-rank view of the output with reduced extents set to 1, so the
        // broadcast map sends each input index to its output slot.
        let keep_shape: Vec<usize> = shape.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let map = broadcast_map(&keep_shape, shape);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let n_out: usize = out_shape.iter().product();
        let src = x.data();
        let mut out = vec![0.0; n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += src[i];
                }
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= count as f64;
                    }
                }
            }
            ReduceKind::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; n_out];
                let mut runner_up = vec![f64::NEG_INFINITY; n_out];
                for (i, &o) in map.iter().enumerate() {
                    if src[i] > out[o] {
                        runner_up[o] = out[o];
                        out[o] = src[i];
                        argmax[o] = i;
                    } else if src[i] > runner_up[o] {
                        runner_up[o] = src[i];
                    }
                }
                if self.tape.tracks_kinks() {
                    let margin = out.iter().zip(&runner_up).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
                    self.tape.note_kinks(margin, argmax.clone());
                }
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        self.unary("reduce", value, Op::Reduce { x: self.id, kind, map, argmax, count })
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn max(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes)
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes)
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes)
    }

    /// Concatenates `parts` along `axis` in argument order.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no parts given"))?;
        let tape = first.tape;
        for p in parts {
            same_tape("concat", first, p)?;
        }
        let (value, rg) = tape.with_nodes(|nodes| {
            let base = nodes[first.id].value.shape();
            if axis >= base.len() {
                return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::dim("concat", format!("part {s:?} does not match {base:?} off axis {axis}")));
                }
                total += s[axis];
            }
            let mut out_shape = base.to_vec();
            out_shape[axis] = total;
            let (outer, _, inner) = split_axis(&out_shape, axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let block = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            Ok::<_, Error>((Tensor::from_parts(out_shape, data), rg))
        })?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", x.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), x.into_data());
        self.unary("reshape", value, Op::Reshape { x: self.id })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        self.unary("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose { x: self.id })
    }

    /// Cross-correlation of `[N,H,W,C_in]` with a `[k,k,C_in,C_out]` kernel.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        same_tape("conv2d", self, &kernel)?;
        let (value, geom, rg) = self.tape.with_nodes(|nodes| {
            let (x, kern) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let g = conv_geom(x.shape(), kern.shape(), stride, padding)?;
            let (xd, kd) = (x.data(), kern.data());
            let mut out = vec![0.0; g.n * g.oh * g.ow * g.cout];
            g.for_each_tap(|o, xo, ko| {
                let row = &mut out[o..o + g.cout];
                for ci in 0..g.cin {
                    let xv = xd[xo + ci];
                    let krow = &kd[ko + ci * g.cout..ko + (ci + 1) * g.cout];
                    for (r, &kv) in row.iter_mut().zip(krow) {
                        *r += xv * kv;
                    }
                }
            });
            let rg = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad;
            Ok::<_, Error>((Tensor::from_parts(vec![g.n, g.oh, g.ow, g.cout], out), g, rg))
        })?;
        check_finite("conv2d", value.data())?;
        Ok(self.tape.push(value, Op::Conv2d { x: self.id, kernel: kernel.id, geom }, rg))
    }

    /// Nearest-neighbour upsampling of an `[H,W,C]` map by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim(
                "upsample_nearest",
                format!("expects [H,W,C] and factor >= 1, got {s:?} x{factor}"),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((y / factor) * w + xx / factor) * c;
                let dst = (y * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
        let value = Tensor::from_parts(vec![oh, ow, c], out);
        self.unary("upsample_nearest", value, Op::Upsample { x: self.id, factor })
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("narrow", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, extent, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.unary("narrow", Tensor::from_parts(shape, out), Op::Narrow { x: self.id, axis, start })
    }

    /// Softmax-weighted sum of the rows of `values` (`[P, C]`) under
    /// `scores` (`[P]`), returning `[C]`.
    ///
    /// Evaluated as `Σ e_p v_p / Σ e_p` with `e = exp(s - max s)`, so equal
    /// scores reproduce the row mean bit-for-bit.
    pub fn softmax_pool(&self, values: Var<'t>) -> Result<Var<'t>> {
        same_tape("softmax_pool", self, &values)?;
        let (value, rg) = self.tape.with_nodes(|nodes| {
            let (s, v) = (&nodes[self.id].value, &nodes[values.id].value);
            let p = s.len();
            if s.rank() != 1 || v.rank() != 2 || v.shape()[0] != p {
                return Err(Error::dim("softmax_pool", format!("scores {:?} vs values {:?}", s.shape(), v.shape())));
            }
            let c = v.shape()[1];
            let e = stable_exp(s.data());
            let total: f64 = e.iter().sum();
            let mut out = vec![0.0; c];
            for (row, &ep) in v.data().chunks(c).zip(&e) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += ep * x;
                }
            }
            for o in &mut out {
                *o /= total;
            }
            let rg = nodes[self.id].requires_grad || nodes[values.id].requires_grad;
            Ok::<_, Error>((Tensor::from_parts(vec![c], out), rg))
        })?;
        check_finite("softmax_pool", value.data())?;
        let op = Op::SoftmaxPool { scores: self.id, values: values.id };
        Ok(self.tape.push(value, op, rg))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp passes no
    /// gradient.
    pub fn bce(&self, target: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::dim("bce", format!("prediction {:?} vs target {:?}", p.shape(), target.shape())));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!("bce target {bad} is not 0 or 1")));
        }
        if self.tape.tracks_kinks() {
            let margin = p
                .data()
                .iter()
                .map(|&v| (v - BCE_EPS).abs().min((1.0 - BCE_EPS - v).abs()))
                .fold(f64::INFINITY, f64::min);
            let inside: Vec<bool> = p.data().iter().map(|&v| v > BCE_EPS && v < 1.0 - BCE_EPS).collect();
            self.tape.note_kinks(margin, inside);
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let node = Op::Bce { p: self.id, target: target.data().to_vec() };
        self.unary("bce", Tensor::scalar(loss), node)
    }
}

fn stable_exp(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|&x| (x - max).exp()).collect()
}

/// Max-subtracted softmax of a slice.
pub fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    let e = stable_exp(scores);
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Propagates the output gradient `g` of node `id` into its inputs.
pub(crate) fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                // dA = G·Bᵀ
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let brow = &bv.data()[p * m..(p + 1) * m];
                        da[i * k + p] = g[i * m..(i + 1) * m].iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, *a, da);
            }
            if wants(*b) {
                // dB = Aᵀ·G
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    for p in 0..k {
                        let aval = av.data()[i * k + p];
                        let row = &mut db[p * m..(p + 1) * m];
                        for (r, &gv) in row.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *r += aval * gv;
                        }
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Binary { kind, a, b } => {
            let out_shape = node.value.shape();
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (ma, mb) = (broadcast_map(av.shape(), out_shape), broadcast_map(bv.shape(), out_shape));
            if wants(*a) {
                let mut da = vec![0.0; av.len()];
                for (o, (&i, &j)) in ma.iter().zip(&mb).enumerate() {
                    da[i] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[o],
                        BinaryKind::Mul => g[o] * bv.data()[j],
                    };
                }
                accumulate(grads, *a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; bv.len()];
                for (o, (&i, &j)) in ma.iter().zip(&mb).enumerate() {
                    db[j] += match kind {
                        BinaryKind::Add => g[o],
                        BinaryKind::Sub => -g[o],
                        BinaryKind::Mul => g[o] * av.data()[i],
                    };
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Scale { x, factor } => {
            if wants(*x) {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
        }
        Op::Relu { x } => {
            if wants(*x) {
                let xv = nodes[*x].value.data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect());
            }
        }
        Op::Sigmoid { x } => {
            if wants(*x) {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect());
            }
        }
        Op::Softmax { x, axis } => {
            if wants(*x) {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Reduce { x, kind, map, argmax, count } => {
            if wants(*x) {
                let mut dx = vec![0.0; map.len()];
                match kind {
                    ReduceKind::Sum => {
                        for (i, &o) in map.iter().enumerate() {
                            dx[i] = g[o];
                        }
                    }
                    ReduceKind::Mean => {
                        let c = *count as f64;
                        for (i, &o) in map.iter().enumerate() {
                            dx[i] = g[o] / c;
                        }
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] += g[o];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for &p in parts {
                let extent = nodes[p].value.shape()[*axis];
                let block = extent * inner;
                if wants(p) {
                    let mut dp = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dp.extend_from_slice(&g[base..base + block]);
                    }
                    accumulate(grads, p, dp);
                }
                offset += block;
            }
        }
        Op::Reshape { x } => {
            if wants(*x) {
                accumulate(grads, *x, g.to_vec());
            }
        }
        Op::Transpose { x } => {
            if wants(*x) {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Conv2d { x, kernel, geom } => {
            let gm = *geom;
            if wants(*x) {
                let kd = nodes[*kernel].value.data();
                let mut dx = vec![0.0; nodes[*x].value.len()];
                gm.for_each_tap(|o, xo, ko| {
                    let grow = &g[o..o + gm.cout];
                    for ci in 0..gm.cin {
                        let krow = &kd[ko + ci * gm.cout..ko + (ci + 1) * gm.cout];
                        dx[xo + ci] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                accumulate(grads, *x, dx);
            }
            if wants(*kernel) {
                let xd = nodes[*x].value.data();
                let mut dk = vec![0.0; nodes[*kernel].value.len()];
                gm.for_each_tap(|o, xo, ko| {
                    let grow = &g[o..o + gm.cout];
                    for ci in 0..gm.cin {
                        let xv = xd[xo + ci];
                        let row = &mut dk[ko + ci * gm.cout..ko + (ci + 1) * gm.cout];
                        for (r, &gv) in row.iter_mut().zip(grow) {
                            *r += xv * gv;
                        }
                    }
                });
                accumulate(grads, *kernel, dk);
            }
        }
        Op::Upsample { x, factor } => {
            if wants(*x) {
                let s = nodes[*x].value.shape();
                let (w, c) = (s[1], s[2]);
                let (oh, ow) = (s[0] * factor, w * factor);
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = ((y / factor) * w + xx / factor) * c;
                        let src = (y * ow + xx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += g[src + ch];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Narrow { x, axis, start } => {
            if wants(*x) {
                let s = nodes[*x].value.shape();
                let (outer, extent, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::SoftmaxPool { scores, values } => {
            let (s, v) = (&nodes[*scores].value, &nodes[*values].value);
            let c = v.shape()[1];
            let a = softmax_weights(s.data());
            if wants(*values) {
                let mut dv = vec![0.0; v.len()];
                for (row, &ap) in dv.chunks_mut(c).zip(&a) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d = ap * gv;
                    }
                }
                accumulate(grads, *values, dv);
            }
            if wants(*scores) {
                let out = node.value.data();
                let g_out: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                let ds = v
                    .data()
                    .chunks(c)
                    .zip(&a)
                    .map(|(row, &ap)| ap * (row.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() - g_out))
                    .collect();
                accumulate(grads, *scores, ds);
            }
        }
        Op::Bce { p, target } => {
            if wants(*p) {
                let pv = nodes[*p].value.data();
                let n = pv.len() as f64;
                let dp = pv
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| {
                        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            g[0] * (-t / q + (1.0 - t) / (1.0 - q)) / n
                        }
                    })
                    .collect();
                accumulate(grads, *p, dp);
            }
        }
    }
}

/// Output spatial extent of a square conv over a `len`×`len` input.
pub fn conv_output_extent(len: usize, k: usize, stride: usize, padding: Padding) -> Result<usize> {
    let g = conv_geom(&[1, len, len, 1], &[k, k, 1, 1], stride, padding)?;
    Ok(g.oh)
}
