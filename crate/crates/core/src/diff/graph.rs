//! Recorded computation with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves copied from a [`ParameterStore`]; [`Graph::backward`] walks the
//! nodes in reverse insertion order, so reductions happen in a fixed order and
//! repeated runs are bitwise identical.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

use super::kernels::{
    gelu_backward, gelu_forward, lane_dot, normalize_rows, normalize_rows_backward, softmax_rows, softmax_rows_backward,
};
use super::params::{ParamId, ParameterStore};
use super::tensor::{matmul_into, Tensor};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis supplies attention tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAxis {
    /// Tokens are pixels (`d = HW`, `l = C`); heads split the channel features.
    Spatial,
    /// Tokens are channels (`d = C`, `l = HW`); heads split the channel tokens.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub axis: TokenAxis,
    pub heads: usize,
    /// Layer-normalize query and key tokens before the dot product.
    pub normalize: bool,
}

struct HeadSaved<R> {
    qn: Vec<R>,
    kn: Vec<R>,
    q_inv: Vec<R>,
    k_inv: Vec<R>,
    v: Vec<R>,
    probs: Vec<R>,
}

struct AttentionSaved<R> {
    q: Var,
    k: Var,
    v: Var,
    log_alpha: Var,
    spec: AttentionSpec,
    geom: AttnGeom,
    heads: Vec<HeadSaved<R>>,
}

enum Op<R> {
    Input,
    Param(ParamId),
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Downsample {
        x: Var,
        w: Var,
        b: Option<Var>,
        packed: Vec<R>,
    },
    Upsample {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<R>,
        inv: Vec<R>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: R,
    },
    Clamp {
        x: Var,
        lo: R,
        hi: R,
    },
    Attention(Box<AttentionSaved<R>>),
    L1 {
        pred: Var,
        target: Var,
    },
    SumAll {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn of(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape<R: Real>(a: &Tensor<R>, b: &Tensor<R>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

#[inline]
fn reflect(p: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if p < 0 {
        -p
    } else if p >= n {
        2 * n - 2 - p
    } else {
        p
    };
    r.clamp(0, n - 1) as usize
}

fn reflect_table(n: usize) -> Vec<[usize; 3]> {
    (0..n)
        .map(|i| {
            let i = i as isize;
            [reflect(i - 1, n), reflect(i, n), reflect(i + 1, n)]
        })
        .collect()
}

/// Rows per attention block: about 64K scores (256 KiB of f32) per slab.
fn block_rows(keys: usize) -> usize {
    (65_536 / keys.max(1)).clamp(8, 4096)
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    bq: usize,
    bk: usize,
    hw: usize,
    c: usize,
    ch: usize,
}

impl AttnGeom {
    /// `(tokens per image, token feature length)` for one head.
    fn token_dims(&self, axis: TokenAxis) -> (usize, usize) {
        match axis {
            TokenAxis::Spatial => (self.hw, self.ch),
            TokenAxis::Channel => (self.ch, self.hw),
        }
    }
}

/// Copies head `h` of a `[B, H, W, C]` buffer into a `[B * tokens, feat]` matrix.
fn gather_head<R: Real>(src: &[R], batch: usize, g: &AttnGeom, axis: TokenAxis, h: usize) -> Vec<R> {
    let (tokens, feat) = g.token_dims(axis);
    let mut out = vec![R::ZERO; batch * tokens * feat];
    let c0 = h * g.ch;
    match axis {
        TokenAxis::Spatial => {
            for (r, dst) in out.chunks_mut(feat).enumerate() {
                let s = r * g.c + c0;
                dst.copy_from_slice(&src[s..s + feat]);
            }
        }
        TokenAxis::Channel => {
            for b in 0..batch {
                for p in 0..g.hw {
                    let s = (b * g.hw + p) * g.c + c0;
                    for cl in 0..g.ch {
                        out[(b * g.ch + cl) * g.hw + p] = src[s + cl];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`gather_head`], accumulating.
fn scatter_head_add<R: Real>(dst: &mut [R], mat: &[R], batch: usize, g: &AttnGeom, axis: TokenAxis, h: usize) {
    let (_, feat) = g.token_dims(axis);
    let c0 = h * g.ch;
    match axis {
        TokenAxis::Spatial => {
            for (r, row) in mat.chunks(feat).enumerate() {
                let s = r * g.c + c0;
                for (d, &v) in dst[s..s + feat].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        TokenAxis::Channel => {
            for b in 0..batch {
                for p in 0..g.hw {
                    let s = (b * g.hw + p) * g.c + c0;
                    for cl in 0..g.ch {
                        dst[s + cl] += mat[(b * g.ch + cl) * g.hw + p];
                    }
                }
            }
        }
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.needs(*v))
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is tracked (read it back from [`Gradients::of`]).
    pub fn input_with_grad(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf holding a copy of a stored parameter; tracked iff the parameter is trainable.
    pub fn param(&mut self, store: &ParameterStore<R>, id: ParamId) -> Var {
        let p = store.get(id);
        let t = Tensor::from_vec(&p.shape, p.values.clone()).expect("store shapes are validated");
        self.push(t, Op::Param(id), p.trainable)
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let cin = xv.last_dim();
        if wv.shape().len() != 2 || wv.shape()[0] != cin {
            return Err(shape_err!(
                "pointwise weight {:?} does not map {} input channels",
                wv.shape(),
                cin
            ));
        }
        let cout = wv.shape()[1];
        let rows = xv.rows();
        let mut out = vec![R::ZERO; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(shape_err!("pointwise bias has {} entries, need {}", bv.len(), cout));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { R::ONE } else { R::ZERO };
        matmul_into(
            &mut out,
            xv.data(),
            wv.data(),
            rows,
            cin,
            cout,
            false,
            false,
            R::ONE,
            beta,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = cout;
        let needs = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Pointwise { x, w, b }, needs))
    }

    /// 3x3 depthwise convolution with reflect padding; weight `[3, 3, C]`.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (bn, h, wd, c) = xv.dims4()?;
        let wv = self.value(w);
        if wv.shape() != [3, 3, c] {
            return Err(shape_err!("depthwise weight {:?}, expected [3, 3, {c}]", wv.shape()));
        }
        let mut out = vec![R::ZERO; xv.len()];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != c {
                return Err(shape_err!("depthwise bias has {} entries, need {c}", bv.len()));
            }
            for row in out.chunks_mut(c) {
                row.copy_from_slice(bv.data());
            }
        }
        let ry = reflect_table(h);
        let rx = reflect_table(wd);
        let (xs, ws) = (xv.data(), wv.data());
        for bi in 0..bn {
            let base = bi * h * wd;
            for i in 0..h {
                for j in 0..wd {
                    let o = (base + i * wd + j) * c;
                    let dst = &mut out[o..o + c];
                    for (ki, &si) in ry[i].iter().enumerate() {
                        for (kj, &sj) in rx[j].iter().enumerate() {
                            let s = (base + si * wd + sj) * c;
                            let kw = &ws[(ki * 3 + kj) * c..(ki * 3 + kj + 1) * c];
                            for ((d, &xv), &wv) in dst.iter_mut().zip(&xs[s..s + c]).zip(kw) {
                                *d += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Depthwise { x, w, b }, needs))
    }

    /// 2x2 stride-2 convolution; weight `[4 * Cin, Cout]` ordered `(dy, dx, c)`.
    pub fn downsample(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (bn, h, wd, c) = xv.dims4()?;
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(shape_err!("downsample needs even spatial dims, got {h}x{wd}"));
        }
        let wv = self.value(w);
        if wv.shape().len() != 2 || wv.shape()[0] != 4 * c {
            return Err(shape_err!(
                "downsample weight {:?}, expected [{}, _]",
                wv.shape(),
                4 * c
            ));
        }
        let cout = wv.shape()[1];
        let (oh, ow) = (h / 2, wd / 2);
        let rows = bn * oh * ow;
        let mut packed = vec![R::ZERO; rows * 4 * c];
        let xs = xv.data();
        for bi in 0..bn {
            for i in 0..oh {
                for j in 0..ow {
                    let r = (bi * oh + i) * ow + j;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let s = ((bi * h + 2 * i + dy) * wd + 2 * j + dx) * c;
                            let d = r * 4 * c + (dy * 2 + dx) * c;
                            packed[d..d + c].copy_from_slice(&xs[s..s + c]);
                        }
                    }
                }
            }
        }
        let mut out = vec![R::ZERO; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(shape_err!("downsample bias has {} entries, need {cout}", bv.len()));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { R::ONE } else { R::ZERO };
        matmul_into(
            &mut out,
            &packed,
            wv.data(),
            rows,
            4 * c,
            cout,
            false,
            false,
            R::ONE,
            beta,
        );
        let needs = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(
            Tensor::from_vec(&[bn, oh, ow, cout], out)?,
            Op::Downsample { x, w, b, packed },
            needs,
        ))
    }

    /// 2x2 stride-2 transposed convolution; weight `[Cin, 4 * Cout]` ordered `(dy, dx, o)`.
    pub fn upsample(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (bn, h, wd, c) = xv.dims4()?;
        let wv = self.value(w);
        if wv.shape().len() != 2 || wv.shape()[0] != c || !wv.shape()[1].is_multiple_of(4) {
            return Err(shape_err!("upsample weight {:?}, expected [{c}, 4 * Cout]", wv.shape()));
        }
        let cout = wv.shape()[1] / 4;
        let rows = bn * h * wd;
        let mut z = vec![R::ZERO; rows * 4 * cout];
        matmul_into(
            &mut z,
            xv.data(),
            wv.data(),
            rows,
            c,
            4 * cout,
            false,
            false,
            R::ONE,
            R::ZERO,
        );
        let bias: Option<Vec<R>> = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != cout {
                    return Err(shape_err!("upsample bias has {} entries, need {cout}", bv.len()));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![R::ZERO; bn * oh * ow * cout];
        for bi in 0..bn {
            for i in 0..h {
                for j in 0..wd {
                    let r = (bi * h + i) * wd + j;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let d = ((bi * oh + 2 * i + dy) * ow + 2 * j + dx) * cout;
                            let s = r * 4 * cout + (dy * 2 + dx) * cout;
                            out[d..d + cout].copy_from_slice(&z[s..s + cout]);
                            if let Some(bias) = &bias {
                                for (o, &bv) in out[d..d + cout].iter_mut().zip(bias) {
                                    *o += bv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(
            Tensor::from_vec(&[bn, oh, ow, cout], out)?,
            Op::Upsample { x, w, b },
            needs,
        ))
    }

    /// Layer normalization over the last axis with optional affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if self.value(p).len() != c {
                    return Err(shape_err!("layer_norm {name} must have {c} entries"));
                }
            }
        }
        let mut xhat = xv.data().to_vec();
        let inv = normalize_rows(&mut xhat, c);
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(gv).for_each(|(o, &g)| *o *= g);
            }
        }
        if let Some(bt) = beta {
            let bv = self.value(bt).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.any_needs(&[Some(x), gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
            needs,
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = gelu_forward(xv.data());
        let t = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Gelu { x }, needs)
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        let len = xv.last_dim();
        if len > 0 {
            softmax_rows(&mut out, len, false);
        }
        let t = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Softmax { x }, needs)
    }

    /// 2-D matrix product `op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[ar, ac], &[br, bc]) = (av.shape(), bv.shape()) else {
            return Err(shape_err!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_into(&mut out, av.data(), bv.data(), m, k, n, ta, tb, R::ONE, R::ZERO);
        let needs = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, needs))
    }

    /// Concatenation along the last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let sa = &av.shape()[..av.shape().len().saturating_sub(1)];
        let sb = &bv.shape()[..bv.shape().len().saturating_sub(1)];
        if sa != sb {
            return Err(shape_err!("concat leading dims {:?} and {:?} differ", sa, sb));
        }
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        shape.push(ca + cb);
        let needs = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { a, b }, needs))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        let needs = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "subtract", |x, y| x - y)?;
        let needs = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "multiply", |x, y| x * y)?;
        let needs = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|&v| v * s).collect()).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, s }, needs)
    }

    /// Clamps to `[lo, hi]`; the gradient passes where the input is inside the interval.
    pub fn clamp(&mut self, x: Var, lo: R, hi: R) -> Var {
        let xv = self.value(x);
        let t =
            Tensor::from_vec(xv.shape(), xv.data().iter().map(|&v| v.max(lo).min(hi)).collect()).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Clamp { x, lo, hi }, needs)
    }

    /// Mean absolute error (scalar).
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape(pv, tv, "l1_loss")?;
        if pv.is_empty() {
            return Err(Error::Empty("l1_loss over an empty tensor".into()));
        }
        let sum: R = pv.data().iter().zip(tv.data()).map(|(&p, &t)| (p - t).abs()).sum();
        let v = sum / R::from_usize(pv.len());
        let needs = self.any_needs(&[Some(pred), Some(target)]);
        Ok(self.push(Tensor::scalar(v), Op::L1 { pred, target }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: R = xv.data().iter().copied().sum::<R>() / R::from_usize(xv.len().max(1));
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, needs)
    }

    /// Multi-head matching attention.
    ///
    /// `q` is `[B, H, W, C]`, `k` and `v` are `[N, H, W, C]`, `log_alpha` has one
    /// entry per head. For each head the query tokens `q_h` attend over all `N`
    /// support images' tokens: `softmax(norm(q_h) norm(k_h)^T / alpha_h) v_h + q_h`.
    /// Every query image attends independently; stacking them only batches the GEMMs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, log_alpha: Var, spec: AttentionSpec) -> Result<Var> {
        let (bq, h, w, c) = self.value(q).dims4()?;
        let (bk, hk, wk, ck) = self.value(k).dims4()?;
        if (hk, wk, ck) != (h, w, c) {
            return Err(shape_err!(
                "key maps {:?} do not match query maps {:?}",
                self.shape(k),
                self.shape(q)
            ));
        }
        same_shape(self.value(k), self.value(v), "attention keys/values")?;
        if spec.heads == 0 || c % spec.heads != 0 {
            return Err(shape_err!("{c} channels are not divisible into {} heads", spec.heads));
        }
        if self.value(log_alpha).len() != spec.heads {
            return Err(shape_err!(
                "log-temperature has {} entries for {} heads",
                self.value(log_alpha).len(),
                spec.heads
            ));
        }
        let geom = AttnGeom {
            bq,
            bk,
            hw: h * w,
            c,
            ch: c / spec.heads,
        };
        let (tokens, feat) = geom.token_dims(spec.axis);
        let (rq, rk) = (bq * tokens, bk * tokens);
        let mut out = vec![R::ZERO; self.value(q).len()];
        let mut heads = Vec::with_capacity(spec.heads);
        for hd in 0..spec.heads {
            let qv = self.value(q).data();
            let mut qn = gather_head(qv, bq, &geom, spec.axis, hd);
            let mut kn = gather_head(self.value(k).data(), bk, &geom, spec.axis, hd);
            let vh = gather_head(self.value(v).data(), bk, &geom, spec.axis, hd);
            let (q_inv, k_inv) = if spec.normalize {
                (normalize_rows(&mut qn, feat), normalize_rows(&mut kn, feat))
            } else {
                (Vec::new(), Vec::new())
            };
            let scale = (-self.value(log_alpha).data()[hd]).exp();
            let mut probs = vec![R::ZERO; rq * rk];
            // residual: the raw (un-normalized) query tokens
            let mut oh = gather_head(self.value(q).data(), bq, &geom, spec.axis, hd);
            // row blocks keep each slab of logits cache-resident through softmax and the value product
            let blk = block_rows(rk);
            for r0 in (0..rq).step_by(blk) {
                let m = blk.min(rq - r0);
                let pb = &mut probs[r0 * rk..(r0 + m) * rk];
                matmul_into(
                    pb,
                    &qn[r0 * feat..(r0 + m) * feat],
                    &kn,
                    m,
                    feat,
                    rk,
                    false,
                    true,
                    scale,
                    R::ZERO,
                );
                softmax_rows(pb, rk, true);
                matmul_into(
                    &mut oh[r0 * feat..(r0 + m) * feat],
                    pb,
                    &vh,
                    m,
                    rk,
                    feat,
                    false,
                    false,
                    R::ONE,
                    R::ONE,
                );
            }
            scatter_head_add(&mut out, &oh, bq, &geom, spec.axis, hd);
            heads.push(HeadSaved {
                qn,
                kn,
                q_inv,
                k_inv,
                v: vh,
                probs,
            });
        }
        let shape = self.shape(q).to_vec();
        let needs = self.any_needs(&[Some(q), Some(k), Some(v), Some(log_alpha)]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                log_alpha,
                spec,
                geom,
                heads,
            })),
            needs,
        ))
    }

    /// Attention probabilities of an attention node, one `[rows, keys]` matrix per head.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Tensor<R>>> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => {
                let (tokens, _) = s.geom.token_dims(s.spec.axis);
                let (rq, rk) = (s.geom.bq * tokens, s.geom.bk * tokens);
                Some(
                    s.heads
                        .iter()
                        .map(|h| Tensor::from_vec(&[rq, rk], h.probs.clone()).expect("sized"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore<R>) -> Result<Gradients<R>> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Ok(grads)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<R>>], v: Var) -> Option<&'g mut Vec<R>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![R::ZERO; len]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<R>>], v: Var, g: &[R]) {
        if let Some(dst) = self.acc(grads, v) {
            dst.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Vec<R>>], b: Option<Var>, dy: &[R], c: usize) {
        if let Some(b) = b {
            if let Some(db) = self.acc(grads, b) {
                for row in dy.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
            }
        }
    }

    fn backward_node(&self, i: usize, dy: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Pointwise { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if let Some(dx) = self.acc(grads, x) {
                    matmul_into(dx, dy, wv.data(), rows, cout, cin, false, true, R::ONE, R::ONE);
                }
                if let Some(dw) = self.acc(grads, w) {
                    matmul_into(dw, xv.data(), dy, cin, rows, cout, true, false, R::ONE, R::ONE);
                }
                self.bias_grad(grads, b, dy, cout);
            }
            &Op::Depthwise { x, w, b } => {
                let xv = self.value(x);
                let (bn, h, wd, c) = xv.dims4()?;
                let ry = reflect_table(h);
                let rx = reflect_table(wd);
                let ws = self.value(w).data();
                if let Some(dx) = self.acc(grads, x) {
                    for bi in 0..bn {
                        let base = bi * h * wd;
                        for i in 0..h {
                            for j in 0..wd {
                                let o = (base + i * wd + j) * c;
                                let g = &dy[o..o + c];
                                for (ki, &si) in ry[i].iter().enumerate() {
                                    for (kj, &sj) in rx[j].iter().enumerate() {
                                        let s = (base + si * wd + sj) * c;
                                        let kw = &ws[(ki * 3 + kj) * c..(ki * 3 + kj + 1) * c];
                                        for ((d, &gv), &wv) in dx[s..s + c].iter_mut().zip(g).zip(kw) {
                                            *d += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, w) {
                    let xs = xv.data();
                    for bi in 0..bn {
                        let base = bi * h * wd;
                        for i in 0..h {
                            for j in 0..wd {
                                let o = (base + i * wd + j) * c;
                                let g = &dy[o..o + c];
                                for (ki, &si) in ry[i].iter().enumerate() {
                                    for (kj, &sj) in rx[j].iter().enumerate() {
                                        let s = (base + si * wd + sj) * c;
                                        let kd = &mut dw[(ki * 3 + kj) * c..(ki * 3 + kj + 1) * c];
                                        for ((d, &gv), &xv) in kd.iter_mut().zip(g).zip(&xs[s..s + c]) {
                                            *d += gv * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.bias_grad(grads, b, dy, c);
            }
            Op::Downsample { x, w, b, packed } => {
                let (x, w, b) = (*x, *w, *b);
                let (bn, h, wd, c) = self.value(x).dims4()?;
                let wv = self.value(w);
                let cout = wv.shape()[1];
                let (oh, ow) = (h / 2, wd / 2);
                let rows = bn * oh * ow;
                if self.needs(x) {
                    let mut dpacked = vec![R::ZERO; rows * 4 * c];
                    matmul_into(
                        &mut dpacked,
                        dy,
                        wv.data(),
                        rows,
                        cout,
                        4 * c,
                        false,
                        true,
                        R::ONE,
                        R::ZERO,
                    );
                    let dx = self.acc(grads, x).expect("checked");
                    for bi in 0..bn {
                        for i in 0..oh {
                            for j in 0..ow {
                                let r = (bi * oh + i) * ow + j;
                                for ddy in 0..2 {
                                    for ddx in 0..2 {
                                        let s = ((bi * h + 2 * i + ddy) * wd + 2 * j + ddx) * c;
                                        let d = r * 4 * c + (ddy * 2 + ddx) * c;
                                        for (a, &g) in dx[s..s + c].iter_mut().zip(&dpacked[d..d + c]) {
                                            *a += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, w) {
                    matmul_into(dw, packed, dy, 4 * c, rows, cout, true, false, R::ONE, R::ONE);
                }
                self.bias_grad(grads, b, dy, cout);
            }
            &Op::Upsample { x, w, b } => {
                let xv = self.value(x);
                let (bn, h, wd, c) = xv.dims4()?;
                let wv = self.value(w);
                let cout = wv.shape()[1] / 4;
                let rows = bn * h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let mut dz = vec![R::ZERO; rows * 4 * cout];
                for bi in 0..bn {
                    for i in 0..h {
                        for j in 0..wd {
                            let r = (bi * h + i) * wd + j;
                            for ddy in 0..2 {
                                for ddx in 0..2 {
                                    let s = ((bi * oh + 2 * i + ddy) * ow + 2 * j + ddx) * cout;
                                    let d = r * 4 * cout + (ddy * 2 + ddx) * cout;
                                    dz[d..d + cout].copy_from_slice(&dy[s..s + cout]);
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, x) {
                    matmul_into(dx, &dz, wv.data(), rows, 4 * cout, c, false, true, R::ONE, R::ONE);
                }
                if let Some(dw) = self.acc(grads, w) {
                    matmul_into(dw, xv.data(), &dz, c, rows, 4 * cout, true, false, R::ONE, R::ONE);
                }
                self.bias_grad(grads, b, dy, cout);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.value(x).last_dim();
                if let Some(g) = gamma {
                    if let Some(dg) = self.acc(grads, g) {
                        for (drow, hrow) in dy.chunks(c).zip(xhat.chunks(c)) {
                            for ((a, &d), &hv) in dg.iter_mut().zip(drow).zip(hrow) {
                                *a += d * hv;
                            }
                        }
                    }
                }
                self.bias_grad(grads, beta, dy, c);
                if self.needs(x) {
                    let dxhat: Vec<R> = match gamma {
                        Some(g) => {
                            let gv = self.value(g).data();
                            dy.chunks(c)
                                .flat_map(|row| row.iter().zip(gv).map(|(&d, &g)| d * g))
                                .collect()
                        }
                        None => dy.to_vec(),
                    };
                    let dx = self.acc(grads, x).expect("checked");
                    normalize_rows_backward(&dxhat, xhat, inv, c, dx);
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.acc(grads, x) {
                    gelu_backward(dx, dy, xv);
                }
            }
            &Op::Softmax { x } => {
                let len = node.value.last_dim();
                let mut d = dy.to_vec();
                softmax_rows_backward(&mut d, node.value.data(), len);
                self.add_into(grads, x, &d);
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if let Some(da) = self.acc(grads, a) {
                    // dA = dC op(B)^T, stored transposed when `ta`
                    if ta {
                        matmul_into(da, bv.data(), dy, k, n, m, tb, true, R::ONE, R::ONE);
                    } else {
                        matmul_into(da, dy, bv.data(), m, n, k, false, !tb, R::ONE, R::ONE);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    if tb {
                        matmul_into(db, dy, av.data(), n, m, k, true, ta, R::ONE, R::ONE);
                    } else {
                        matmul_into(db, av.data(), dy, k, m, n, !ta, false, R::ONE, R::ONE);
                    }
                }
            }
            &Op::Concat { a, b } => {
                let ca = self.value(a).last_dim();
                let cb = self.value(b).last_dim();
                if let Some(da) = self.acc(grads, a) {
                    for (d, row) in da.chunks_mut(ca).zip(dy.chunks(ca + cb)) {
                        d.iter_mut().zip(&row[..ca]).for_each(|(x, &g)| *x += g);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for (d, row) in db.chunks_mut(cb).zip(dy.chunks(ca + cb)) {
                        d.iter_mut().zip(&row[ca..]).for_each(|(x, &g)| *x += g);
                    }
                }
            }
            &Op::Add { a, b } => {
                self.add_into(grads, a, dy);
                self.add_into(grads, b, dy);
            }
            &Op::Sub { a, b } => {
                self.add_into(grads, a, dy);
                if let Some(db) = self.acc(grads, b) {
                    db.iter_mut().zip(dy).for_each(|(x, &g)| *x -= g);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &g), &o) in da.iter_mut().zip(dy).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &g), &o) in db.iter_mut().zip(dy).zip(av) {
                        *d += g * o;
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(dy).for_each(|(d, &g)| *d += g * s);
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        if v >= lo && v <= hi {
                            *d += g;
                        }
                    }
                }
            }
            &Op::L1 { pred, target } => {
                let (pv, tv) = (self.value(pred).data(), self.value(target).data());
                let scale = dy[0] / R::from_usize(pv.len());
                let sign = |p: R, t: R| {
                    if p > t {
                        scale
                    } else if p < t {
                        -scale
                    } else {
                        R::ZERO
                    }
                };
                if let Some(dp) = self.acc(grads, pred) {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(tv) {
                        *d += sign(p, t);
                    }
                }
                if let Some(dt) = self.acc(grads, target) {
                    for ((d, &p), &t) in dt.iter_mut().zip(pv).zip(tv) {
                        *d -= sign(p, t);
                    }
                }
            }
            &Op::SumAll { x } => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            &Op::Mean { x } => {
                let n = R::from_usize(self.value(x).len().max(1));
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|d| *d += dy[0] / n);
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, dy, grads),
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved<R>, dy: &[R], grads: &mut [Option<Vec<R>>]) {
        let g = &s.geom;
        let axis = s.spec.axis;
        let (tokens, feat) = g.token_dims(axis);
        let (rq, rk) = (g.bq * tokens, g.bk * tokens);
        let (need_q, need_k, need_v, need_a) = (
            self.needs(s.q),
            self.needs(s.k),
            self.needs(s.v),
            self.needs(s.log_alpha),
        );
        let mut dq_total = if need_q {
            Some(vec![R::ZERO; self.value(s.q).len()])
        } else {
            None
        };
        let mut dk_total = if need_k {
            Some(vec![R::ZERO; self.value(s.k).len()])
        } else {
            None
        };
        let mut dv_total = if need_v {
            Some(vec![R::ZERO; self.value(s.v).len()])
        } else {
            None
        };
        let mut dalpha = vec![R::ZERO; s.spec.heads];
        let blk = block_rows(rk);
        let mut dp = vec![R::ZERO; blk * rk];
        for (hd, hs) in s.heads.iter().enumerate() {
            let doh = gather_head(dy, g.bq, g, axis, hd);
            if let Some(dq) = dq_total.as_mut() {
                scatter_head_add(dq, &doh, g.bq, g, axis, hd);
            }
            let scale = (-self.value(s.log_alpha).data()[hd]).exp();
            let mut dvh = vec![R::ZERO; if need_v { rk * feat } else { 0 }];
            let need_scores = need_q || need_k || need_a;
            let mut dqn = vec![R::ZERO; if need_scores { rq * feat } else { 0 }];
            let mut dkn = vec![R::ZERO; if need_k { rk * feat } else { 0 }];
            for r0 in (0..rq).step_by(blk) {
                let m = blk.min(rq - r0);
                let pb = &hs.probs[r0 * rk..(r0 + m) * rk];
                let db = &doh[r0 * feat..(r0 + m) * feat];
                if need_v {
                    matmul_into(&mut dvh, pb, db, rk, m, feat, true, false, R::ONE, R::ONE);
                }
                if !need_scores {
                    continue;
                }
                let dpb = &mut dp[..m * rk];
                matmul_into(dpb, db, &hs.v, m, feat, rk, false, true, R::ONE, R::ZERO);
                softmax_rows_backward(dpb, pb, rk);
                matmul_into(
                    &mut dqn[r0 * feat..(r0 + m) * feat],
                    dpb,
                    &hs.kn,
                    m,
                    rk,
                    feat,
                    false,
                    false,
                    scale,
                    R::ZERO,
                );
                if need_k {
                    let qb = &hs.qn[r0 * feat..(r0 + m) * feat];
                    matmul_into(&mut dkn, dpb, qb, rk, m, feat, true, false, scale, R::ONE);
                }
            }
            if let Some(dv) = dv_total.as_mut() {
                scatter_head_add(dv, &dvh, g.bk, g, axis, hd);
            }
            if !need_scores {
                continue;
            }
            // d(logits)/d(log_alpha) = -logits, so the temperature gradient is -<qn, dqn>
            dalpha[hd] = -lane_dot(&dqn, &hs.qn);
            if let Some(dq) = dq_total.as_mut() {
                let dqh = if s.spec.normalize {
                    let mut out = vec![R::ZERO; rq * feat];
                    normalize_rows_backward(&dqn, &hs.qn, &hs.q_inv, feat, &mut out);
                    out
                } else {
                    dqn
                };
                scatter_head_add(dq, &dqh, g.bq, g, axis, hd);
            }
            if let Some(dk) = dk_total.as_mut() {
                let dkh = if s.spec.normalize {
                    let mut out = vec![R::ZERO; rk * feat];
                    normalize_rows_backward(&dkn, &hs.kn, &hs.k_inv, feat, &mut out);
                    out
                } else {
                    dkn
                };
                scatter_head_add(dk, &dkh, g.bk, g, axis, hd);
            }
        }
        if let Some(d) = dq_total {
            self.add_into(grads, s.q, &d);
        }
        if let Some(d) = dk_total {
            self.add_into(grads, s.k, &d);
        }
        if let Some(d) = dv_total {
            self.add_into(grads, s.v, &d);
        }
        if need_a {
            self.add_into(grads, s.log_alpha, &dalpha);
        }
    }
}
