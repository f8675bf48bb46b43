//! Differentiable primitives.
//!
//! Binary elementwise operations broadcast numpy-style; their gradients are
//! summed back to each operand's shape. Reductions and structural operations
//! take explicit axes.

use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tensor::{broadcast_shapes, expand, increment, reduce_to, strides, Tensor};
use crate::Var;

/// Margin kept away from ±1 by [`Var::arccos`].
pub const ARCCOS_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

fn axis_check(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AdError::InvalidShape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let out_shape =
            broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| AdError::ShapeMismatch {
                op: op.name(),
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        let ea = expand(&a, &out_shape);
        let eb = expand(&b, &out_shape);
        if matches!(op, Binary::Div) && eb.data().iter().any(|&x| x == 0.0) {
            return Err(AdError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = ea.zip_map(&eb, |x, y| op.apply(x, y))?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _out: &Tensor| {
            let (a, b) = (&parents[0], &parents[1]);
            let shape = g.shape().to_vec();
            let (ga, gb) = match op {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.map(|x| -x)),
                Binary::Mul => {
                    let ea = expand(a, &shape);
                    let eb = expand(b, &shape);
                    (
                        g.zip_map(&eb, |g, b| g * b).expect("same shape"),
                        g.zip_map(&ea, |g, a| g * a).expect("same shape"),
                    )
                }
                Binary::Div => {
                    let ea = expand(a, &shape);
                    let eb = expand(b, &shape);
                    let ga = g.zip_map(&eb, |g, b| g / b).expect("same shape");
                    let mut gb = g.zip_map(&ea, |g, a| g * a).expect("same shape");
                    for (v, &b) in gb.data_mut().iter_mut().zip(eb.data()) {
                        *v = -*v / (b * b);
                    }
                    (ga, gb)
                }
            };
            vec![
                Some(reduce_to(&ga, a.shape())),
                Some(reduce_to(&gb, b.shape())),
            ]
        };
        Ok(self
            .tape()
            .record(&[self, other], value, Box::new(backward)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `dy/dx = df(x, y)`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let value = self.value().map(f);
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], out: &Tensor| {
            let data = g
                .data()
                .iter()
                .zip(parents[0].data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(
                Tensor::new(g.shape().to_vec(), data).expect("same shape"),
            )]
        };
        self.tape().record(&[self], value, Box::new(backward))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(AdError::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Square root of a non-negative argument; the derivative at zero is taken as zero.
    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x < 0.0) {
            return Err(AdError::Domain {
                op: "sqrt",
                detail: "negative argument".into(),
            });
        }
        Ok(self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + 0.044715 * x * x * x);
                let th = inner.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    /// `arccos` of an argument in `[-1, 1]`, clamped to `[-1 + 1e-9, 1 - 1e-9]`
    /// before evaluation so the derivative stays finite.
    pub fn arccos(self) -> Result<Var<'t>> {
        if self
            .value()
            .data()
            .iter()
            .any(|&x| !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&x))
        {
            return Err(AdError::Domain {
                op: "arccos",
                detail: "argument outside [-1, 1]".into(),
            });
        }
        let lo = -1.0 + ARCCOS_CLAMP;
        let hi = 1.0 - ARCCOS_CLAMP;
        Ok(self.unary(
            move |x| x.clamp(lo, hi).acos(),
            move |x, _| {
                if x > lo && x < hi {
                    -1.0 / (1.0 - x * x).sqrt()
                } else {
                    0.0
                }
            },
        ))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let value = Tensor::scalar(v.sum());
        let backward = |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            vec![Some(Tensor::full(parents[0].shape().to_vec(), g.data()[0]))]
        };
        self.tape().record(&[self], value, Box::new(backward))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(AdError::InvalidShape("mean of an empty tensor".into()));
        }
        Ok(self.sum().scale(1.0 / n as f64))
    }

    /// Sum along `axis`, optionally keeping it as extent one.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        axis_check("sum_axis", v.shape(), axis)?;
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = v.data();
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, out)?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            let src = &parents[0];
            let mut gx = vec![0.0; src.numel()];
            let gd = g.data();
            for o in 0..outer {
                for k in 0..extent {
                    let base = (o * extent + k) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(src.shape().to_vec(), gx).expect("shape"))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        axis_check("mean_axis", &shape, axis)?;
        let n = shape[axis];
        if n == 0 {
            return Err(AdError::InvalidShape("mean over an empty axis".into()));
        }
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` and `[b,m,k]x[k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let mismatch = || AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (batch, m, k, n, shared_rhs) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, true),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n, false),
            ([ba, m, k], [k2, n]) if k == k2 => (*ba, *m, *k, *n, true),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = if shared_rhs { 0 } else { bi * k * n };
            gemm_acc(
                &a.data()[ao..ao + m * k],
                &b.data()[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out_shape = if a.ndim() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = Tensor::new(out_shape, out)?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            let (a, b) = (&parents[0], &parents[1]);
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            let gd = g.data();
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = if shared_rhs { 0 } else { bi * k * n };
                let go = bi * m * n;
                let gblk = &gd[go..go + m * n];
                // dA = G B^T
                let bblk = &b.data()[bo..bo + k * n];
                let gab = &mut ga[ao..ao + m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gblk[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            gab[i * k + p] += gij * bblk[p * n + j];
                        }
                    }
                }
                // dB = A^T G
                let ablk = &a.data()[ao..ao + m * k];
                let gbb = &mut gb[bo..bo + k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ablk[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut gbb[p * n..(p + 1) * n];
                        for (r, &gv) in row.iter_mut().zip(&gblk[i * n..(i + 1) * n]) {
                            *r += aip * gv;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).expect("shape")),
                Some(Tensor::new(b.shape().to_vec(), gb).expect("shape")),
            ]
        };
        Ok(self
            .tape()
            .record(&[self, other], value, Box::new(backward)))
    }

    /// Reorder axes.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(AdError::InvalidShape(format!(
                "permute {axes:?} of shape {shape:?}"
            )));
        }
        let value = permute_tensor(&v, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let backward =
            move |g: &Tensor, _: &[Rc<Tensor>], _: &Tensor| vec![Some(permute_tensor(g, &inverse))];
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(AdError::InvalidShape(
                "transpose needs at least two axes".into(),
            ));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        let backward = |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            vec![Some(
                g.reshape(parents[0].shape().to_vec()).expect("same numel"),
            )]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if broadcast_shapes(v.shape(), shape).as_deref() != Some(shape) {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = expand(&v, shape);
        let backward = |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            vec![Some(reduce_to(g, parents[0].shape()))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        axis_check("slice", v.shape(), axis)?;
        if start >= end || end > v.shape()[axis] {
            return Err(AdError::InvalidShape(format!(
                "slice {start}..{end} of axis {axis} in shape {:?}",
                v.shape()
            )));
        }
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            let mut gx = Tensor::zeros(parents[0].shape().to_vec());
            let gd = g.data();
            let dst = gx.data_mut();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                dst[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Select entries along axis 0. Indices may repeat; gradients accumulate.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() == 0 {
            return Err(AdError::InvalidShape("gather on a rank-0 tensor".into()));
        }
        let rows = v.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AdError::InvalidShape(format!(
                "gather index {bad} out of range {rows}"
            )));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        let indices = indices.to_vec();
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            let mut gx = Tensor::zeros(parents[0].shape().to_vec());
            let dst = gx.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                for (d, s) in dst[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&g.data()[k * row..(k + 1) * row])
                {
                    *d += s;
                }
            }
            vec![Some(gx)]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Trace of a square matrix.
    pub fn trace(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = match v.shape() {
            [a, b] if a == b => *a,
            s => return Err(AdError::InvalidShape(format!("trace of shape {s:?}"))),
        };
        let value = Tensor::scalar((0..n).map(|i| v.data()[i * n + i]).sum());
        let backward = move |g: &Tensor, _: &[Rc<Tensor>], _: &Tensor| {
            let mut gx = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                gx.data_mut()[i * n + i] = g.data()[0];
            }
            vec![Some(gx)]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Cross product along a last axis of extent 3. Operands share a shape.
    pub fn cross(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() || a.shape().last() != Some(&3) {
            return Err(AdError::ShapeMismatch {
                op: "cross",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = Tensor::new(a.shape().to_vec(), cross_rows(a.data(), b.data()))?;
        let backward = |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
            let (a, b) = (&parents[0], &parents[1]);
            // d(a x b)/da applied to g is b x g; for b it is g x a.
            let ga = cross_rows(b.data(), g.data());
            let gb = cross_rows(g.data(), a.data());
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).expect("shape")),
                Some(Tensor::new(b.shape().to_vec(), gb).expect("shape")),
            ]
        };
        Ok(self
            .tape()
            .record(&[self, other], value, Box::new(backward)))
    }

    /// Euclidean norm along the last axis (which is dropped).
    /// The subgradient at the zero vector is zero.
    pub fn norm(self) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&d) = v.shape().last() else {
            return Err(AdError::InvalidShape("norm of a rank-0 tensor".into()));
        };
        let norms: Vec<f64> = v
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let shape = v.shape()[..v.ndim() - 1].to_vec();
        let value = Tensor::new(shape, norms)?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], out: &Tensor| {
            let x = &parents[0];
            let mut gx = vec![0.0; x.numel()];
            for ((xr, gr), (&n, &gn)) in x
                .data()
                .chunks(d)
                .zip(gx.chunks_mut(d))
                .zip(out.data().iter().zip(g.data()))
            {
                if n > 0.0 {
                    for (gi, xi) in gr.iter_mut().zip(xr) {
                        *gi = gn * xi / n;
                    }
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), gx).expect("shape"))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Scale each vector along the last axis to unit length. Zero vectors are an error.
    pub fn normalize(self) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&d) = v.shape().last() else {
            return Err(AdError::InvalidShape("normalize of a rank-0 tensor".into()));
        };
        let mut out = Vec::with_capacity(v.numel());
        for r in v.data().chunks(d) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(AdError::Domain {
                    op: "normalize",
                    detail: "zero-norm vector".into(),
                });
            }
            out.extend(r.iter().map(|x| x / n));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let backward = move |g: &Tensor, parents: &[Rc<Tensor>], out: &Tensor| {
            let x = &parents[0];
            let mut gx = Vec::with_capacity(x.numel());
            for ((xr, yr), gr) in x
                .data()
                .chunks(d)
                .zip(out.data().chunks(d))
                .zip(g.data().chunks(d))
            {
                let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
            }
            vec![Some(Tensor::new(x.shape().to_vec(), gx).expect("shape"))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&d) = v.shape().last() else {
            return Err(AdError::InvalidShape("softmax of a rank-0 tensor".into()));
        };
        let mut out = Vec::with_capacity(v.numel());
        for r in v.data().chunks(d) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|x| x / s));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let backward = move |g: &Tensor, _: &[Rc<Tensor>], out: &Tensor| {
            let mut gx = Vec::with_capacity(out.numel());
            for (yr, gr) in out.data().chunks(d).zip(g.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }

    /// Standardize along the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&d) = v.shape().last() else {
            return Err(AdError::InvalidShape(
                "layer_norm of a rank-0 tensor".into(),
            ));
        };
        let mut out = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / d.max(1));
        for r in v.data().chunks(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(r.iter().map(|x| (x - mean) * is));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let backward = move |g: &Tensor, _: &[Rc<Tensor>], out: &Tensor| {
            let mut gx = Vec::with_capacity(out.numel());
            for ((yr, gr), &is) in out.data().chunks(d).zip(g.data().chunks(d)).zip(&inv_std) {
                let gm = gr.iter().sum::<f64>() / d as f64;
                let gym = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / d as f64;
                gx.extend(yr.iter().zip(gr).map(|(y, g)| is * (g - gm - y * gym)));
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
        };
        Ok(self.tape().record(&[self], value, Box::new(backward)))
    }
}

/// Concatenate along `axis`. All operands must agree on the other extents.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| AdError::InvalidShape("concat of zero operands".into()))?;
    for p in parts {
        first.same_tape(p)?;
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    axis_check("concat", &base, axis)?;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let value = Tensor::new(shape, out)?;
    let backward = move |g: &Tensor, parents: &[Rc<Tensor>], _: &Tensor| {
        let mut grads: Vec<Vec<f64>> = extents
            .iter()
            .map(|e| Vec::with_capacity(outer * e * inner))
            .collect();
        let gd = g.data();
        let mut offset = 0;
        for _ in 0..outer {
            for (gr, &e) in grads.iter_mut().zip(&extents) {
                gr.extend_from_slice(&gd[offset..offset + e * inner]);
                offset += e * inner;
            }
        }
        grads
            .into_iter()
            .zip(parents)
            .map(|(gr, p)| Some(Tensor::new(p.shape().to_vec(), gr).expect("shape")))
            .collect()
    };
    Ok(first.tape().record(parts, value, Box::new(backward)))
}

/// Stack equally shaped operands along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let reshaped = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&reshaped, 0)
}

fn cross_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for (x, y) in a.chunks(3).zip(b.chunks(3)) {
        out.push(x[1] * y[2] - x[2] * y[1]);
        out.push(x[2] * y[0] - x[0] * y[2]);
        out.push(x[0] * y[1] - x[1] * y[0]);
    }
    out
}

fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut index = vec![0usize; new_shape.len()];
    for _ in 0..t.numel() {
        let src: usize = index.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(t.data()[src]);
        increment(&mut index, &new_shape);
    }
    Tensor::new(new_shape, out).expect("permute preserves numel")
}
