use std::collections::HashMap;

use crate::gemm::{gemm, MatRef};
use crate::store::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Relu,
    Elu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        /// Flat index into `b` for every output element when `b` is broadcast.
        b_index: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize),
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize, usize),
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        lanes: (usize, usize, usize),
    },
    Softmax {
        x: Var,
        lanes: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    RowMix {
        x: Var,
        width: usize,
        entries: Vec<(usize, usize, f64)>,
    },
    Take {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Flat index into `b` for each element of `a`'s shape, under right-aligned
/// broadcasting where every `b` dim equals `a`'s or is 1.
fn broadcast_index(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let off = a.len() - b.len();
    let mut bstride = vec![0usize; a.len()];
    let mut acc = 1;
    for i in (0..b.len()).rev() {
        let (da, db) = (a[off + i], b[i]);
        if db == da {
            bstride[off + i] = acc;
        } else if db != 1 {
            return None;
        }
        acc *= db;
    }
    let n: usize = a.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut flat_b = 0usize;
    for _ in 0..n {
        out.push(flat_b);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            flat_b += bstride[d];
            if idx[d] < a[d] {
                break;
            }
            flat_b -= bstride[d] * a[d];
            idx[d] = 0;
        }
    }
    Some(out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls with the same
    /// id return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let b_index = if sa == sb {
            None
        } else {
            Some(broadcast_index(sa, sb).ok_or_else(|| mismatch(name, sa, sb))?)
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = match &b_index {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(ix) => av.iter().zip(ix).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                b_index,
            },
            rg,
        ))
    }

    /// `a + b`; `b` may broadcast into `a`'s shape (right-aligned, dims equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.value(x);
        let f = |v: f64| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Square => v * v,
            UnaryKind::Powf(p) => v.powf(p),
            UnaryKind::Scale(c) => v * c,
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::ClampMin(c) => v.max(c),
        };
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Elu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(UnaryKind::Powf(p), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    /// `max(x, c)`; the gradient passes only where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::ClampMin(c), x)
    }

    // ---- linear algebra --------------------------------------------------

    /// 2-D product `op(a)·op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::new(self.value(a).data(), sa[1], ta),
            MatRef::new(self.value(b).data(), sb[1], tb),
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: (m, k, n),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(mismatch("bmm", sa, sb));
        }
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        let (acols, bcols) = (sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                MatRef::new(&av[t * asz..(t + 1) * asz], acols, ta),
                MatRef::new(&bv[t * bsz..(t + 1) * bsz], bcols, tb),
                0.0,
                &mut out[t * m * n..(t + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                dims: (batch, m, k, n),
            },
            rg,
        ))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_t(a, b, false, false)
    }

    /// `x·w + b` over the last axis of `x`, for `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().ok_or_else(|| mismatch("linear", &shape, &[]))?;
        let rows = self.value(x).len() / din.max(1);
        let x2 = self.reshape(x, &[rows, din])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let dout = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        self.reshape(y, &out_shape)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = lanes(&shape, axis)?;
        let (outer, len, inner) = l;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&xv[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::SumAxis { x, lanes: l }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = lanes(&shape, axis)?;
        let out = softmax_lanes(self.value(x).data(), l);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, lanes: l }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| mismatch("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- convolution -----------------------------------------------------

    /// 2-D convolution of an `[H, W, Cin]` image with a `[k, k, Cin, Cout]`
    /// kernel, zero padding `pad`, optional `[Cout]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d", &sw, self.shape(b)));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let kk = k * k * cin;
        let mut out = vec![0.0; ho * wo * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            ho * wo,
            kk,
            cout,
            MatRef::new(&cols, kk, false),
            MatRef::new(self.value(w).data(), cout, false),
            1.0,
            &mut out,
            cout as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[ho, wo, cout], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    // ---- shape manipulation ----------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(TensorError::BadAxis { axis: 1, rank: r });
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let out = transpose_blocks(self.value(x).data(), batch, rows, cols);
        let mut oshape = shape;
        oshape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = lanes(&first, axis)?;
        let mut total = 0;
        let mut info = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(mismatch("concat", &first, s));
            }
            info.push((p, s[axis]));
            total += s[axis];
        }
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &(p, len) in &info {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut oshape = first;
        oshape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Concat {
                parts: info,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, axis_len, inner) = lanes(&shape, axis)?;
        if start + len > axis_len {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: axis_len,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Narrow {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Sparse linear map over rows: output row `o` is the sum of
    /// `weight · x[i]` over entries `(o, i, weight)`. `x` is viewed as
    /// `[shape[0], rest]`; the output has `rows_out` rows of the same width.
    /// Gathers, bilinear sampling and scatters are all instances.
    pub fn row_mix(
        &mut self,
        x: Var,
        rows_out: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows_in = *shape.first().ok_or_else(|| mismatch("row_mix", &shape, &[]))?;
        let width = shape[1..].iter().product::<usize>();
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows_out * width];
        for &(o, i, wgt) in &entries {
            if o >= rows_out {
                return Err(TensorError::IndexOutOfRange {
                    index: o,
                    len: rows_out,
                });
            }
            if i >= rows_in {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: rows_in,
                });
            }
            let dst = &mut out[o * width..(o + 1) * width];
            for (d, s) in dst.iter_mut().zip(&xv[i * width..(i + 1) * width]) {
                *d += wgt * s;
            }
        }
        let mut oshape = shape;
        oshape[0] = rows_out;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::RowMix { x, width, entries },
            rg,
        ))
    }

    /// Row gather `x[idx[k]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let entries = idx.iter().enumerate().map(|(o, &i)| (o, i, 1.0)).collect();
        self.row_mix(x, idx.len(), entries)
    }

    /// Row scatter-add: output row `idx[k]` accumulates `x[k]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows_out: usize) -> Result<Var> {
        let entries = idx.iter().enumerate().map(|(i, &o)| (o, i, 1.0)).collect();
        self.row_mix(x, rows_out, entries)
    }

    /// 1-D vector of `x`'s elements at flat indices `idx`.
    pub fn take(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            out.push(*xv.get(i).ok_or(TensorError::IndexOutOfRange {
                index: i,
                len: xv.len(),
            })?);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[idx.len()], out)?, Op::Take { x, idx }, rg))
    }

    // ---- composites ------------------------------------------------------

    /// Rows scaled to unit L2 norm (`eps` added under the square root).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let r = self.shape(x).len();
        let sq = self.square(x);
        let ss = self.sum_axis(sq, r - 1)?;
        let ss = self.add_scalar(ss, eps);
        let n = self.sqrt(ss);
        self.div(x, n)
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a, 1e-12)?;
        let bn = self.normalize_rows(b, 1e-12)?;
        self.matmul_t(an, bn, false, true)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                b_index,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bj = |i: usize| b_index.as_ref().map_or(i, |ix| ix[i]);
                if let Some(ai) = acc(*a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    for i in 0..g.len() {
                        ga[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[bj(i)],
                            BinaryKind::Div => g[i] / bv[bj(i)],
                        };
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    for i in 0..g.len() {
                        let j = bj(i);
                        gb[j] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[i],
                            BinaryKind::Div => -g[i] * av[i] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                if let Some(xi) = acc(*x, grads) {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let gx = grads[xi].as_mut().unwrap();
                    for i in 0..g.len() {
                        let (v, y) = (xv[i], yv[i]);
                        gx[i] += g[i]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Relu => {
                                    if v > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Elu => {
                                    if v > 0.0 {
                                        1.0
                                    } else {
                                        y + 1.0
                                    }
                                }
                                UnaryKind::Exp => y,
                                UnaryKind::Log => 1.0 / v,
                                UnaryKind::Sqrt => 0.5 / y,
                                UnaryKind::Abs => v.signum() * (v != 0.0) as u8 as f64,
                                UnaryKind::Square => 2.0 * v,
                                UnaryKind::Powf(p) => p * v.powf(p - 1.0),
                                UnaryKind::Scale(c) => *c,
                                UnaryKind::AddScalar(_) => 1.0,
                                UnaryKind::ClampMin(c) => {
                                    if v > *c {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: (m, k, n),
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let gref = MatRef::new(g, n, false);
                if let Some(ai) = acc(*a, grads) {
                    let bref = MatRef::new(self.value(*b).data(), sb[1], !*tb);
                    let ga = grads[ai].as_mut().unwrap();
                    // d op(a) = g · op(b)^T, written through a's storage layout
                    let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    gemm(m, n, k, gref, bref, 1.0, ga, rs, cs);
                }
                if let Some(bi) = acc(*b, grads) {
                    let aref = MatRef::new(self.value(*a).data(), sa[1], !*ta);
                    let gb = grads[bi].as_mut().unwrap();
                    let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    gemm(k, m, n, aref, gref, 1.0, gb, rs, cs);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                dims: (batch, m, k, n),
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                if let Some(ai) = acc(*a, grads) {
                    let bv = self.value(*b).data();
                    let ga = grads[ai].as_mut().unwrap();
                    let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::new(&g[t * m * n..(t + 1) * m * n], n, false),
                            MatRef::new(&bv[t * bsz..(t + 1) * bsz], sb[2], !*tb),
                            1.0,
                            &mut ga[t * asz..(t + 1) * asz],
                            rs,
                            cs,
                        );
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let av = self.value(*a).data();
                    let gb = grads[bi].as_mut().unwrap();
                    let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::new(&av[t * asz..(t + 1) * asz], sa[2], !*ta),
                            MatRef::new(&g[t * m * n..(t + 1) * m * n], n, false),
                            1.0,
                            &mut gb[t * bsz..(t + 1) * bsz],
                            rs,
                            cs,
                        );
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(xi) = acc(*x, grads) {
                    grads[xi].as_mut().unwrap().iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let s = g[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumAxis {
                x,
                lanes: (outer, len, inner),
            } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..*len {
                            let base = (o * len + k) * inner;
                            for (d, s) in gx[base..base + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                lanes: (outer, len, inner),
            } => {
                if let Some(xi) = acc(*x, grads) {
                    let y = node.value.data();
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..*len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                if let Some(gi) = acc(*gamma, grads) {
                    let gg = grads[gi].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(bi) = acc(*beta, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(xi) = acc(*x, grads) {
                    let gam = self.value(*gamma).data();
                    let gx = grads[xi].as_mut().unwrap();
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            dh[j] = g[r * d + j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * xhat[r * d + j];
                        }
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] +=
                                c * (d as f64 * dh[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let kk = geom.k * geom.k * geom.cin;
                let p = geom.ho * geom.wo;
                let cout = geom.cout;
                if let Some(b) = b {
                    if let Some(bi) = acc(*b, grads) {
                        let gb = grads[bi].as_mut().unwrap();
                        for row in g.chunks(cout) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
                if let Some(wi) = acc(*w, grads) {
                    let gw = grads[wi].as_mut().unwrap();
                    gemm(
                        kk,
                        p,
                        cout,
                        MatRef::new(cols, kk, true),
                        MatRef::new(g, cout, false),
                        1.0,
                        gw,
                        cout as isize,
                        1,
                    );
                }
                if let Some(xi) = acc(*x, grads) {
                    let mut dcols = vec![0.0; p * kk];
                    gemm(
                        p,
                        cout,
                        kk,
                        MatRef::new(g, cout, false),
                        MatRef::new(self.value(*w).data(), cout, true),
                        0.0,
                        &mut dcols,
                        kk as isize,
                        1,
                    );
                    col2im_acc(&dcols, geom, grads[xi].as_mut().unwrap());
                }
            }
            Op::Reshape { x } => {
                if let Some(xi) = acc(*x, grads) {
                    for (d, s) in grads[xi].as_mut().unwrap().iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                if let Some(xi) = acc(*x, grads) {
                    let back = transpose_blocks(g, *batch, *cols, *rows);
                    for (d, s) in grads[xi].as_mut().unwrap().iter_mut().zip(&back) {
                        *d += s;
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(pi) = acc(p, grads) {
                        let gp = grads[pi].as_mut().unwrap();
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (d, s) in gp[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * len * inner;
                        for (d, s) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowMix { x, width, entries } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let w = *width;
                    for &(o, i, wgt) in entries {
                        for (d, s) in gx[i * w..(i + 1) * w].iter_mut().zip(&g[o * w..(o + 1) * w])
                        {
                            *d += wgt * s;
                        }
                    }
                }
            }
            Op::Take { x, idx } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
        }
    }
}

/// Gradients from one [`Graph::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, shaped like `v`'s value.
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(graph.shape(v), g.clone()).expect("gradient shaped like value"))
    }

    /// Gradients for every parameter of `store` pulled into `graph`, indexed
    /// like the store. Unused parameters get `None`.
    pub fn for_params(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for (&id, &v) in &graph.params {
            out[id.index()] = self.get(graph, v);
        }
        out
    }
}

fn softmax_lanes(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - mx).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[at(k)] /= s;
            }
        }
    }
    out
}

fn transpose_blocks(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let sz = rows * cols;
    for t in 0..batch {
        let (src, dst) = (&x[t * sz..(t + 1) * sz], &mut out[t * sz..(t + 1) * sz]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * kk];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let kk = g.k * g.k * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}
