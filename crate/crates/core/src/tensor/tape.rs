use indexmap::IndexMap;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaskScale(Var, Vec<f64>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Slice {
        src: Var,
        r0: usize,
        c0: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MeanRows(Var, Option<Vec<bool>>),
    MeanAll(Var),
    SumAll(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    StopGrad,
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `c (+)= op(a) * op(b)` for row-major operands, where `a` is logically
/// `[m x k]` and `b` is `[k x n]`. A transposed flag means the operand is
/// stored as its transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above guarantees every strided access stays
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a 2-D operand, got {other:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// A leaf that does not take gradients.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Binds a parameter as a leaf; repeated calls with one name share a node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.require(name)?;
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m} x {k}] * [{k2} x {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Adds `b` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// Elementwise product with a fixed, non-differentiable array.
    pub fn mask_scale(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(
                "mask_scale",
                format!("mask of {} for {} values", mask.len(), self.value(a).len()),
            ));
        }
        let out = self.value(a).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MaskScale(a, mask), ng))
    }

    /// 1-D cross-correlation of `x [B x C_in x L]` with `w [C_out x C_in x k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, c_in, len) = match *self.shape(x) {
            [bb, c, l] => (bb, c, l),
            ref other => {
                return Err(Error::shape("conv1d", format!("input must be 3-D, got {other:?}")))
            }
        };
        let (c_out, c_in_w, k) = match *self.shape(w) {
            [o, c, k] => (o, c, k),
            ref other => {
                return Err(Error::shape("conv1d", format!("kernel must be 3-D, got {other:?}")))
            }
        };
        if c_in != c_in_w {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels, kernel expects {c_in_w}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be positive"));
        }
        if k == 0 || k > len + 2 * padding {
            return Err(Error::shape(
                "conv1d",
                format!("kernel size {k} exceeds padded length {}", len + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let l_out = (len + 2 * padding - k) / stride + 1;
        let ck = c_in * k;
        let xv = self.value(x);
        let mut cols = vec![0.0; batch * ck * l_out];
        for bi in 0..batch {
            let xb = &xv[bi * c_in * len..(bi + 1) * c_in * len];
            let cb = &mut cols[bi * ck * l_out..(bi + 1) * ck * l_out];
            for c in 0..c_in {
                for j in 0..k {
                    let row = &mut cb[(c * k + j) * l_out..(c * k + j + 1) * l_out];
                    for (t, slot) in row.iter_mut().enumerate() {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *slot = xb[c * len + pos as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * c_out * l_out];
        let wv = self.value(w);
        for bi in 0..batch {
            gemm(
                c_out,
                ck,
                l_out,
                wv,
                false,
                &cols[bi * ck * l_out..],
                false,
                &mut out[bi * c_out * l_out..],
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for (i, v) in out.iter_mut().enumerate() {
                *v += bv[(i / l_out) % c_out];
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            vec![batch, c_out, l_out],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Row-wise softmax of a 2-D operand. `valid`, when given, has one flag
    /// per column; invalid columns get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2("softmax", self.shape(a))?;
        if let Some(m) = valid {
            if m.len() != c {
                return Err(Error::shape("softmax", format!("mask of {} for {c} columns", m.len())));
            }
            if !m.iter().any(|&x| x) {
                return Err(Error::invalid("softmax row is fully masked"));
            }
        }
        let keep = |j: usize| valid.is_none_or(|m| m[j]);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= sum;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![r, c], out, Op::Softmax(a), ng))
    }

    /// Sub-block `[r0..r0+rows, c0..c0+cols]` of a 2-D operand.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.shape(a))?;
        if r0 + rows > r || c0 + cols > c {
            return Err(Error::shape(
                "slice",
                format!("block [{r0}+{rows}, {c0}+{cols}] outside [{r} x {c}]"),
            ));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            out.extend_from_slice(&av[i * c + c0..i * c + c0 + cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(vec![rows, cols], out, Op::Slice { src: a, r0, c0 }, ng))
    }

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    /// 1-D operands are treated as single rows when `axis` is 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::invalid("concat needs parts and an axis of 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| match *self.shape(p) {
                [n] => Ok((1, n)),
                [r, c] => Ok((r, c)),
                ref other => Err(Error::shape("concat", format!("operand {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let one_d = parts.iter().all(|&p| self.shape(p).len() == 1);
        let (shape, out) = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(Error::shape("concat", format!("column counts {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            parts.iter().for_each(|&p| out.extend_from_slice(self.value(p)));
            (vec![rows, c0], out)
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(Error::shape("concat", format!("row counts {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
            let shape = if one_d { vec![cols] } else { vec![r0, cols] };
            (shape, out)
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Mean over the rows of a 2-D operand; `valid` selects which rows count.
    pub fn mean_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.shape(a))?;
        if let Some(m) = valid {
            if m.len() != r {
                return Err(Error::shape("mean_rows", format!("mask of {} for {r} rows", m.len())));
            }
        }
        let keep = |i: usize| valid.is_none_or(|m| m[i]);
        let count = (0..r).filter(|&i| keep(i)).count();
        if count == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| keep(i)) {
            for (o, v) in out.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let ng = self.needs(a);
        Ok(self.push(vec![c], out, Op::MeanRows(a, valid.map(<[bool]>::to_vec)), ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(vec![], vec![m], Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![], vec![s], Op::SumAll(a), ng)
    }

    /// Rows of a 2-D table selected by index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (k, l) = dims2("gather_rows", self.shape(table))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {k} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * l);
        indices
            .iter()
            .for_each(|&i| out.extend_from_slice(&tv[i * l..(i + 1) * l]));
        let ng = self.needs(table);
        Ok(self.push(
            vec![indices.len(), l],
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Same value as `a`, but no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), out, Op::StopGrad, false)
    }

    /// Emits `values` in the forward pass and routes the incoming gradient
    /// unchanged to `input` in the backward pass.
    pub fn straight_through(&mut self, input: Var, values: Vec<f64>) -> Result<Var> {
        if values.len() != self.value(input).len() {
            return Err(Error::shape(
                "straight_through",
                format!("{} values for input of {}", values.len(), self.value(input).len()),
            ));
        }
        let ng = self.needs(input);
        Ok(self.push(self.shape(input).to_vec(), values, Op::StraightThrough(input), ng))
    }

    /// Backpropagates from a scalar output with unit seed.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        self.backward_with(out, &[1.0])
    }

    /// Backpropagates an explicit cotangent for `out`.
    pub fn backward_with(&self, out: Var, cotangent: &[f64]) -> Result<Gradients> {
        if cotangent.len() != self.value(out).len() {
            return Err(Error::shape(
                "backward",
                format!("cotangent of {} for output of {}", cotangent.len(), self.value(out).len()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(cotangent.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if let Some(ga) = self.slot(grads, a) {
                    // dA = dC * B^T
                    gemm(m, n, k, g, false, self.value(b), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB = A^T * dC
                    gemm(k, m, n, self.value(a), true, g, false, gb, true);
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(i, v)| gb[i % n] += v);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for ((x, y), w) in s.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    let av = self.value(a);
                    for ((x, y), w) in s.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
                }
            }
            &Op::Relu(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let av = self.value(a);
                    for ((x, y), v) in s.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::MaskScale(a, mask) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((x, y), m) in s.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            } => self.backprop_conv(node, g, grads, *x, *w, *b, *stride, *padding, cols),
            &Op::Transpose(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let (r, c) = (node.shape[1], node.shape[0]);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(a) | &Op::StraightThrough(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Softmax(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let c = node.shape[1];
                    for (i, (yrow, grow)) in node.value.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                        for j in 0..c {
                            s[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            &Op::Slice { src, r0, c0 } => {
                if let Some(s) = self.slot(grads, src) {
                    let c = self.shape(src)[1];
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    for i in 0..rows {
                        for j in 0..cols {
                            s[(r0 + i) * c + c0 + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if let Some(s) = self.slot(grads, p) {
                            s.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                        }
                        off += n;
                    }
                } else {
                    let rows = if node.shape.len() == 1 { 1 } else { node.shape[0] };
                    let total = g.len() / rows;
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).len() / rows;
                        if let Some(s) = self.slot(grads, p) {
                            for i in 0..rows {
                                for j in 0..c {
                                    s[i * c + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::MeanRows(a, valid) => {
                if let Some(s) = self.slot(grads, *a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let keep = |i: usize| valid.as_ref().is_none_or(|m| m[i]);
                    let count = (0..r).filter(|&i| keep(i)).count() as f64;
                    for i in (0..r).filter(|&i| keep(i)) {
                        for j in 0..c {
                            s[i * c + j] += g[j] / count;
                        }
                    }
                }
            }
            &Op::MeanAll(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let d = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|x| *x += d);
                }
            }
            &Op::SumAll(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Gather { table, indices } => {
                if let Some(s) = self.slot(grads, *table) {
                    let l = self.shape(*table)[1];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..l {
                            s[idx * l + j] += g[row * l + j];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        cols: &[f64],
    ) {
        let (batch, c_in, len) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (c_out, k) = (self.shape(w)[0], self.shape(w)[2]);
        let l_out = node.shape[2];
        let ck = c_in * k;
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                for (i, v) in g.iter().enumerate() {
                    gb[(i / l_out) % c_out] += v;
                }
            }
        }
        if let Some(gw) = self.slot(grads, w) {
            for bi in 0..batch {
                // dW += dOut_b * cols_b^T
                gemm(
                    c_out,
                    l_out,
                    ck,
                    &g[bi * c_out * l_out..],
                    false,
                    &cols[bi * ck * l_out..],
                    true,
                    gw,
                    true,
                );
            }
        }
        if self.needs(x) {
            let wv = self.value(w);
            let mut dcols = vec![0.0; ck * l_out];
            let gx = self.slot(grads, x).expect("needs_grad checked");
            for bi in 0..batch {
                // dcols = W^T * dOut_b
                gemm(ck, c_out, l_out, wv, true, &g[bi * c_out * l_out..], false, &mut dcols, false);
                let gxb = &mut gx[bi * c_in * len..(bi + 1) * c_in * len];
                for c in 0..c_in {
                    for j in 0..k {
                        let row = &dcols[(c * k + j) * l_out..(c * k + j + 1) * l_out];
                        for (t, v) in row.iter().enumerate() {
                            let pos = (t * stride + j) as isize - padding as isize;
                            if pos >= 0 && (pos as usize) < len {
                                gxb[c * len + pos as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every bound parameter into `params`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ParameterSet) -> Result<()> {
        for (name, &v) in &self.params {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("tape parameter {name} not in set")))?;
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
        Ok(())
    }

    /// Parameter names bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn straight_through_routes_gradient_unchanged() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::new(vec![2], vec![0.3, -0.7]).unwrap().with_grad());
        let q = tape.straight_through(z, vec![1.0, 2.0]).unwrap();
        assert_eq!(tape.value(q), &[1.0, 2.0]);
        let grads = tape.backward_with(q, &[0.125, -4.5]).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[0.125, -4.5]);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap().with_grad());
        let s = tape.stop_grad(x);
        let y = tape.mul(x, s).unwrap();
        let total = tape.sum_all(y);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_masked_columns_get_zero_weight() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0]).unwrap();
        let s = tape.softmax_rows(a, Some(&[true, true, false])).unwrap();
        let v = tape.value(s);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-15);
        assert!(tape.softmax_rows(a, Some(&[false, false, false])).is_err());
    }
}
