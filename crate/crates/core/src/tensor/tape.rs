//! Operation recording and reverse-mode gradient propagation.

use super::{strides_of, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Affine { x: Var, a: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    LeftMatmul3 { m: Var, x: Var },
    RightMatmul3 { x: Var, n: Var },
    SelectDim1 { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var },
    ConcatDim1(Vec<Var>),
    Permute4 { x: Var, perm: [usize; 4] },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-evaluation record of tensor operations.
///
/// Entries are appended in execution order, so every entry's inputs precede
/// it and one reverse sweep visits each entry exactly once. A tape is meant
/// to live for a single forward/backward evaluation and be dropped.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. `v`; leaves the loss never reaches get a
    /// zero tensor of the leaf's shape.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

/// Output shape of a broadcast binary op. Either side may be a single
/// element (full broadcast); otherwise ranks must match and each dim must
/// agree or be 1 on one side.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize], an: usize, bn: usize) -> Vec<usize> {
    if an == 1 {
        return b.to_vec();
    }
    if bn == 1 {
        return a.to_vec();
    }
    assert_eq!(
        a.len(),
        b.len(),
        "{op}: rank mismatch between shapes {a:?} and {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            assert!(
                da == db || da == 1 || db == 1,
                "{op}: incompatible shapes {a:?} and {b:?}"
            );
            da.max(db)
        })
        .collect()
}

/// Elementwise binary kernel under broadcasting.
fn binary_map(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    if a.shape() == b.shape() {
        for (o, (&x, &y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
            *o = f(x, y);
        }
    } else if a.numel() == 1 {
        let x = a.data()[0];
        for (o, &y) in out.iter_mut().zip(b.iter()) {
            *o = f(x, y);
        }
    } else if b.numel() == 1 {
        let y = b.data()[0];
        for (o, &x) in out.iter_mut().zip(a.iter()) {
            *o = f(x, y);
        }
    } else {
        let rank = out_shape.len();
        let out_strides = strides_of(out_shape);
        let a_str = bcast_strides(a.shape(), out_shape);
        let b_str = bcast_strides(b.shape(), out_shape);
        let ad = a.data();
        let bd = b.data();
        for (i, o) in out.iter_mut().enumerate() {
            let mut ai = 0;
            let mut bi = 0;
            for d in 0..rank {
                let c = (i / out_strides[d]) % out_shape[d];
                ai += c * a_str[d];
                bi += c * b_str[d];
            }
            *o = f(ad[ai], bd[bi]);
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Input strides against a broadcast output shape; broadcast dims get 0.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(&strides)
        .map(|((&d, &od), &s)| if d == od { s } else { 0 })
        .collect()
}

/// Reduces a gradient over the broadcast output back to an input's shape.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target: &[usize], target_numel: usize) -> Tensor {
    if grad_shape == target {
        return Tensor::new(target.to_vec(), grad.to_vec());
    }
    let mut out = vec![0.0; target_numel];
    if target_numel == 1 {
        out[0] = grad.iter().sum();
        return Tensor::new(target.to_vec(), out);
    }
    let rank = grad_shape.len();
    let grad_strides = strides_of(grad_shape);
    let t_str = bcast_strides(target, grad_shape);
    for (i, &g) in grad.iter().enumerate() {
        let mut ti = 0;
        for d in 0..rank {
            let c = (i / grad_strides[d]) % grad_shape[d];
            ti += c * t_str[d];
        }
        out[ti] += g;
    }
    Tensor::new(target.to_vec(), out)
}

/// `c = alpha * op(a) . op(b) + beta * c` for row-major 2D slices, with
/// optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a gradient-requiring leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, av.shape(), bv.shape(), av.numel(), bv.numel());
        let out = binary_map(av, bv, &shape, f);
        let rg = self.rg2(a, b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; on ties the gradient routes to the first input.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary("min", a, b, Op::Min(a, b), f64::min)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.iter().map(|&e| f(e)).collect());
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |e| -e)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |e| e.max(0.0) + (-e.abs()).exp().ln_1p())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |e| e.max(0.0))
    }

    /// `a * x + b` with compile-time constants (not differentiable in a, b).
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, Op::Affine { x, a }, |e| a * e + b)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |e| e.clamp(lo, hi))
    }

    /// Full reduction to a scalar of shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.iter().sum();
        let n = v.numel() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// 2D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        assert!(
            ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[0],
            "matmul: incompatible shapes {ash:?} and {bsh:?}"
        );
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n, 1.0,
            self.nodes[a.0].value.data(), false,
            self.nodes[b.0].value.data(), false,
            0.0, &mut out,
        );
        let rg = self.rg2(a, b);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), rg)
    }

    /// Applies a matrix along dim 1 of a rank-3 tensor:
    /// `m (t_out, t_in) x x (b, t_in, f) -> (b, t_out, f)`.
    pub fn lmat3(&mut self, m: Var, x: Var) -> Var {
        let (msh, xsh) = (self.nodes[m.0].value.shape(), self.nodes[x.0].value.shape());
        assert!(
            msh.len() == 2 && xsh.len() == 3 && msh[1] == xsh[1],
            "lmat3: incompatible shapes {msh:?} and {xsh:?}"
        );
        let (t_out, t_in) = (msh[0], msh[1]);
        let (batch, f) = (xsh[0], xsh[2]);
        let mut out = vec![0.0; batch * t_out * f];
        let md = self.nodes[m.0].value.data();
        let xd = self.nodes[x.0].value.data();
        for bi in 0..batch {
            gemm(
                t_out, t_in, f, 1.0,
                md, false,
                &xd[bi * t_in * f..(bi + 1) * t_in * f], false,
                0.0, &mut out[bi * t_out * f..(bi + 1) * t_out * f],
            );
        }
        let rg = self.rg2(m, x);
        self.push(Tensor::new(vec![batch, t_out, f], out), Op::LeftMatmul3 { m, x }, rg)
    }

    /// Applies a matrix along dim 2 of a rank-3 tensor:
    /// `x (b, t, f) x n (f, g) -> (b, t, g)`.
    pub fn rmat3(&mut self, x: Var, n: Var) -> Var {
        let (xsh, nsh) = (self.nodes[x.0].value.shape(), self.nodes[n.0].value.shape());
        assert!(
            xsh.len() == 3 && nsh.len() == 2 && xsh[2] == nsh[0],
            "rmat3: incompatible shapes {xsh:?} and {nsh:?}"
        );
        let (batch, t, f) = (xsh[0], xsh[1], xsh[2]);
        let g = nsh[1];
        let mut out = vec![0.0; batch * t * g];
        gemm(
            batch * t, f, g, 1.0,
            self.nodes[x.0].value.data(), false,
            self.nodes[n.0].value.data(), false,
            0.0, &mut out,
        );
        let rg = self.rg2(x, n);
        self.push(Tensor::new(vec![batch, t, g], out), Op::RightMatmul3 { x, n }, rg)
    }

    /// Gathers rows along dim 1 of a rank-3 tensor.
    pub fn select_dim1(&mut self, x: Var, idx: &[usize]) -> Var {
        let xsh = self.nodes[x.0].value.shape();
        assert_eq!(xsh.len(), 3, "select_dim1: want rank 3, got {xsh:?}");
        let (batch, t, f) = (xsh[0], xsh[1], xsh[2]);
        assert!(
            idx.iter().all(|&i| i < t),
            "select_dim1: index out of range for {xsh:?}: {idx:?}"
        );
        let k = idx.len();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * k * f];
        for bi in 0..batch {
            for (j, &ti) in idx.iter().enumerate() {
                let src = bi * t * f + ti * f;
                let dst = bi * k * f + j * f;
                out[dst..dst + f].copy_from_slice(&xd[src..src + f]);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::new(vec![batch, k, f], out),
            Op::SelectDim1 { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// 2D convolution with stride 1 and same padding:
    /// `x (b, c, h, w) * w (o, c, kh, kw) + bias (o) -> (b, o, h, w)`.
    /// Kernel dims must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let wsh = self.nodes[w.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        assert!(
            xsh.len() == 4 && wsh.len() == 4 && xsh[1] == wsh[1],
            "conv2d: incompatible shapes x={xsh:?} w={wsh:?}"
        );
        assert!(
            wsh[2] % 2 == 1 && wsh[3] % 2 == 1,
            "conv2d: kernel dims must be odd, got {wsh:?}"
        );
        assert_eq!(bsh, vec![wsh[0]], "conv2d: bias shape {bsh:?} does not match {} filters", wsh[0]);
        let out = super::conv::forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(out, Op::Conv2d { x, w, b }, rg)
    }

    /// Concatenates rank-4 tensors along dim 1.
    pub fn concat_dim1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_dim1: no inputs");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        assert_eq!(first.len(), 4, "concat_dim1: want rank 4, got {first:?}");
        let (batch, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert!(
                s.len() == 4 && s[0] == batch && s[2] == h && s[3] == w,
                "concat_dim1: mismatched shapes {first:?} vs {s:?}"
            );
            c_total += s[1];
        }
        let mut out = vec![0.0; batch * c_total * h * w];
        let plane = h * w;
        for bi in 0..batch {
            let mut c_off = 0;
            for p in parts {
                let s = self.nodes[p.0].value.shape();
                let c = s[1];
                let src = &self.nodes[p.0].value.data()[bi * c * plane..(bi + 1) * c * plane];
                let dst = bi * c_total * plane + c_off * plane;
                out[dst..dst + c * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(
            Tensor::new(vec![batch, c_total, h, w], out),
            Op::ConcatDim1(parts.to_vec()),
            rg,
        )
    }

    /// Permutes the axes of a rank-4 tensor.
    pub fn permute4(&mut self, x: Var, perm: [usize; 4]) -> Var {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xsh.len(), 4, "permute4: want rank 4, got {xsh:?}");
        let mut seen = [false; 4];
        for &p in &perm {
            assert!(p < 4 && !seen[p], "permute4: bad permutation {perm:?}");
            seen[p] = true;
        }
        let out = permute4_data(&self.nodes[x.0].value, perm);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Permute4 { x, perm }, rg)
    }

    /// Reinterprets the elements under a new shape (row-major order kept).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        assert_eq!(
            v.numel(),
            numel,
            "reshape: {:?} -> {:?} changes element count",
            v.shape(),
            shape
        );
        let out = Tensor::new(shape, v.data().to_vec());
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Reshape(x), rg)
    }

    /// Propagates d(loss)/d(node) to every gradient-requiring node below
    /// `loss`. The loss must be a real scalar (complex values never form a
    /// single `Var`, so a complex loss cannot be expressed).
    pub fn backward(&self, loss: Var) -> Gradients {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(
            lv.numel(),
            1,
            "backward: loss must be a real scalar, got shape {:?}",
            lv.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.iter()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Broadcast-aware accumulation: reduces `contrib` (shaped like the op
    /// output) down to the input's shape before adding.
    fn accumulate_bcast(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target = self.nodes[v.0].value.shape();
        let reduced = reduce_to_shape(contrib.data(), contrib.shape(), target, self.nodes[v.0].value.numel());
        self.accumulate(grads, v, reduced);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_bcast(grads, *a, g.clone());
                self.accumulate_bcast(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_bcast(grads, *a, g.clone());
                let neg = Tensor::new(out_shape, g.iter().map(|&e| -e).collect());
                self.accumulate_bcast(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = binary_map(g, bv, &out_shape, |gg, y| gg * y);
                let db = binary_map(g, av, &out_shape, |gg, x| gg * x);
                self.accumulate_bcast(grads, *a, da);
                self.accumulate_bcast(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = binary_map(g, bv, &out_shape, |gg, y| gg / y);
                self.accumulate_bcast(grads, *a, da);
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -a / b^2
                    let av_b = binary_map(av, bv, &out_shape, |x, y| -x / (y * y));
                    let db = binary_map(g, &av_b, &out_shape, |gg, z| gg * z);
                    self.accumulate_bcast(grads, *b, db);
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let take_a = binary_map(av, bv, &out_shape, |x, y| if x <= y { 1.0 } else { 0.0 });
                let da = binary_map(g, &take_a, &out_shape, |gg, t| gg * t);
                let db = binary_map(g, &take_a, &out_shape, |gg, t| gg * (1.0 - t));
                self.accumulate_bcast(grads, *a, da);
                self.accumulate_bcast(grads, *b, db);
            }
            Op::Neg(x) => {
                let dx = Tensor::new(out_shape, g.iter().map(|&e| -e).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let y = &self.nodes[i].value;
                let dx = Tensor::new(out_shape, g.iter().zip(y.iter()).map(|(&gg, &yy)| gg * yy).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(out_shape, g.iter().zip(xv.iter()).map(|(&gg, &xx)| gg / xx).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Sin(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(out_shape, g.iter().zip(xv.iter()).map(|(&gg, &xx)| gg * xx.cos()).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Cos(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(out_shape, g.iter().zip(xv.iter()).map(|(&gg, &xx)| -gg * xx.sin()).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                let y = &self.nodes[i].value;
                let dx = Tensor::new(out_shape, g.iter().zip(y.iter()).map(|(&gg, &yy)| gg / (2.0 * yy)).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let dx = Tensor::new(
                    out_shape,
                    g.iter().zip(y.iter()).map(|(&gg, &yy)| gg * yy * (1.0 - yy)).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    out_shape,
                    g.iter().zip(xv.iter()).map(|(&gg, &xx)| gg * sigmoid(xx)).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    out_shape,
                    g.iter().zip(xv.iter()).map(|(&gg, &xx)| if xx > 0.0 { gg } else { 0.0 }).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Affine { x, a } => {
                let dx = Tensor::new(out_shape, g.iter().map(|&e| a * e).collect());
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    out_shape,
                    g.iter()
                        .zip(xv.iter())
                        .map(|(&gg, &xx)| if xx >= *lo && xx <= *hi { gg } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                let dx = Tensor::new(self.nodes[x.0].value.shape().to_vec(), vec![g.item(); n]);
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let dx = Tensor::new(self.nodes[x.0].value.shape().to_vec(), vec![g.item() / n as f64; n]);
                self.accumulate(grads, *x, dx);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::LeftMatmul3 { m, x } => {
                let (mv, xv) = (&self.nodes[m.0].value, &self.nodes[x.0].value);
                let (t_out, t_in) = (mv.shape()[0], mv.shape()[1]);
                let (batch, f) = (xv.shape()[0], xv.shape()[2]);
                if self.nodes[m.0].requires_grad {
                    let mut dm = vec![0.0; t_out * t_in];
                    for bi in 0..batch {
                        gemm(
                            t_out, f, t_in, 1.0,
                            &g.data()[bi * t_out * f..(bi + 1) * t_out * f], false,
                            &xv.data()[bi * t_in * f..(bi + 1) * t_in * f], true,
                            1.0, &mut dm,
                        );
                    }
                    self.accumulate(grads, *m, Tensor::new(vec![t_out, t_in], dm));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; batch * t_in * f];
                    for bi in 0..batch {
                        gemm(
                            t_in, t_out, f, 1.0,
                            mv.data(), true,
                            &g.data()[bi * t_out * f..(bi + 1) * t_out * f], false,
                            0.0, &mut dx[bi * t_in * f..(bi + 1) * t_in * f],
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![batch, t_in, f], dx));
                }
            }
            Op::RightMatmul3 { x, n } => {
                let (xv, nv) = (&self.nodes[x.0].value, &self.nodes[n.0].value);
                let (batch, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gcols = nv.shape()[1];
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; batch * t * f];
                    gemm(batch * t, gcols, f, 1.0, g.data(), false, nv.data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(vec![batch, t, f], dx));
                }
                if self.nodes[n.0].requires_grad {
                    let mut dn = vec![0.0; f * gcols];
                    gemm(f, batch * t, gcols, 1.0, xv.data(), true, g.data(), false, 0.0, &mut dn);
                    self.accumulate(grads, *n, Tensor::new(vec![f, gcols], dn));
                }
            }
            Op::SelectDim1 { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let (batch, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = idx.len();
                let mut dx = vec![0.0; batch * t * f];
                for bi in 0..batch {
                    for (j, &ti) in idx.iter().enumerate() {
                        let src = bi * k * f + j * f;
                        let dst = bi * t * f + ti * f;
                        for c in 0..f {
                            dx[dst + c] += g.data()[src + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![batch, t, f], dx));
            }
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = super::conv::backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConcatDim1(parts) => {
                let (batch, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let plane = h * w;
                let mut c_off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; batch * c * plane];
                        for bi in 0..batch {
                            let src = bi * c_total * plane + c_off * plane;
                            let dst = bi * c * plane;
                            dp[dst..dst + c * plane].copy_from_slice(&g.data()[src..src + c * plane]);
                        }
                        self.accumulate(grads, *p, Tensor::new(vec![batch, c, h, w], dp));
                    }
                    c_off += c;
                }
            }
            Op::Permute4 { x, perm } => {
                let mut inv = [0usize; 4];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let dx = permute4_data(g, inv);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = Tensor::new(self.nodes[x.0].value.shape().to_vec(), g.data().to_vec());
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn permute4_data(x: &Tensor, perm: [usize; 4]) -> Tensor {
    let s = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let in_strides = strides_of(s);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for (i, &v) in xd.iter().enumerate() {
        let mut oi = 0;
        for d in 0..4 {
            let c = (i / in_strides[perm[d]]) % s[perm[d]];
            oi += c * out_strides[d];
        }
        out[oi] = v;
    }
    Tensor::new(out_shape, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
