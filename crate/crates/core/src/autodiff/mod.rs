//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the record in reverse and
//! returns gradients for every trainable leaf. The tape is rebuilt per step.

pub mod adam;

use std::cell::RefCell;

use crate::error::{contract, Result, SfdError};

pub use adam::{Adam, AdamConfig};

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SfdError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Square(Var),
    Abs(Var),
    Silu(Var),
    L1(Var),
    L2(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    /// Row-wise map with a caller-supplied Jacobian: one `out × in` block per row.
    RowMap(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    step: Option<u64>,
}

/// Gradients of trainable leaves produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` for nodes that are not trainable leaves.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(SfdError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// `c (m×n) += op(a) op(b)` where transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents match (m, k, n) and the strides.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose non-finite errors carry the given training step.
    pub fn at_step(step: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            step: Some(step),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(nodes.len() - 1)
    }

    fn checked(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(SfdError::NumericOverflow {
                op: name,
                step: self.step,
            });
        }
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor {
            shape: nodes[v.0].shape.clone(),
            data: nodes[v.0].value.clone(),
        }
    }

    pub fn values(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Leaf tensor. Trainable leaves receive gradients from [`Graph::backward`].
    pub fn leaf(&self, t: Tensor, trainable: bool) -> Result<Var> {
        let Tensor { shape, data } = t;
        let v = self.checked("leaf", shape, data, Op::Leaf, trainable)?;
        self.nodes.borrow_mut()[v.0].trainable = trainable;
        Ok(v)
    }

    pub fn param(&self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Same values, no gradient contribution to anything upstream.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].shape.clone(), nodes[x.0].value.clone())
        };
        self.push(shape, value, Op::Leaf, false)
    }

    fn binary_same(&self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(SfdError::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        Ok((na.shape.clone(), na.needs_grad || nb.needs_grad))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.borrow()[a.0].value.iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.checked("add", shape, v, Op::Add(a, b), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.checked("sub", shape, v, Op::Sub(a, b), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.checked("mul", shape, v, Op::Mul(a, b), ng)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        let (shape, ng) = (self.shape(a), self.needs(a));
        self.checked("scale", shape, v, Op::Scale(a, s), ng)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * x);
        let (shape, ng) = (self.shape(a), self.needs(a));
        self.checked("square", shape, v, Op::Square(a), ng)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::abs);
        let (shape, ng) = (self.shape(a), self.needs(a));
        self.checked("abs", shape, v, Op::Abs(a), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * sigmoid(x));
        let (shape, ng) = (self.shape(a), self.needs(a));
        self.checked("silu", shape, v, Op::Silu(a), ng)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.checked("sum", Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            (v.iter().sum::<f64>(), v.len() as f64)
        };
        let ng = self.needs(a);
        self.checked("mean", Vec::new(), vec![s / n], Op::Mean(a), ng)
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let (_, ng) = self.binary_same("dot", a, b)?;
        let s = self.zip(a, b, |x, y| x * y).iter().sum();
        self.checked("dot", Vec::new(), vec![s], Op::Dot(a, b), ng)
    }

    pub fn l1_norm(&self, a: Var) -> Result<Var> {
        let s = self.map(a, f64::abs).iter().sum();
        let ng = self.needs(a);
        self.checked("l1_norm", Vec::new(), vec![s], Op::L1(a), ng)
    }

    pub fn l2_norm(&self, a: Var) -> Result<Var> {
        let s = self.map(a, |x| x * x).iter().sum::<f64>().sqrt();
        let ng = self.needs(a);
        self.checked("l2_norm", Vec::new(), vec![s], Op::L2(a), ng)
    }

    /// `(n×k) · (k×m)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = shape_2d("matmul", &sa)?;
        let (k2, n) = shape_2d("matmul", &sb)?;
        if k != k2 {
            return Err(SfdError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(
                m,
                k,
                n,
                &nodes[a.0].value,
                k as isize,
                1,
                &nodes[b.0].value,
                n as isize,
                1,
                &mut out,
                0.0,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.checked("matmul", vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// `(n×m) + row` where `row` has `m` elements, broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let (_, m) = shape_2d("add_row", &sa)?;
        let rn: usize = sr.iter().product();
        if rn != m {
            return Err(SfdError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let r = &nodes[row.0].value;
            nodes[a.0]
                .value
                .chunks(m)
                .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
                .collect()
        };
        let ng = self.needs(a) || self.needs(row);
        self.checked("add_row", sa, out, Op::AddRow(a, row), ng)
    }

    /// `(n×m) * col` where `col` has `n` elements, one scale per row.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        let (n, m) = shape_2d("mul_col", &sa)?;
        let cn: usize = sc.iter().product();
        if cn != n {
            return Err(SfdError::ShapeMismatch {
                op: "mul_col",
                lhs: sa,
                rhs: sc,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let c = &nodes[col.0].value;
            nodes[a.0]
                .value
                .chunks(m)
                .zip(c)
                .flat_map(|(chunk, &s)| chunk.iter().map(move |x| x * s))
                .collect()
        };
        let ng = self.needs(a) || self.needs(col);
        self.checked("mul_col", sa, out, Op::MulCol(a, col), ng)
    }

    /// Sum over columns: `(n×m) -> (n×1)`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let (n, m) = shape_2d("row_sum", &sa)?;
        let out = self.nodes.borrow()[a.0]
            .value
            .chunks(m)
            .map(|c| c.iter().sum())
            .collect();
        let ng = self.needs(a);
        self.checked("row_sum", vec![n, 1], out, Op::RowSum(a), ng)
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols of nothing"));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let (n, _) = shape_2d("concat_cols", &shapes[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for s in &shapes {
            let (r, c) = shape_2d("concat_cols", s)?;
            if r != n {
                return Err(SfdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: shapes[0].clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value[i * w..(i + 1) * w]);
                }
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.checked(
            "concat_cols",
            vec![n, total],
            out,
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Row lookup into a `(rows×m)` table.
    pub fn gather_rows(&self, table: Var, index: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        let (rows, m) = shape_2d("gather_rows", &st)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("row index {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(contract("gather_rows with empty index"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            index
                .iter()
                .flat_map(|&i| t[i * m..(i + 1) * m].iter().copied())
                .collect()
        };
        let ng = self.needs(table);
        self.checked(
            "gather_rows",
            vec![index.len(), m],
            out,
            Op::Gather(table, index.to_vec()),
            ng,
        )
    }

    /// Records an externally evaluated row-wise map `y_i = f(x_i)`.
    ///
    /// `output` is `(n×out)`, `jacobians` holds `n` row-major `out×in` blocks of
    /// `∂y_i/∂x_i`.
    pub fn row_map(&self, x: Var, output: Tensor, jacobians: Vec<f64>) -> Result<Var> {
        let sx = self.shape(x);
        let (n, din) = shape_2d("row_map", &sx)?;
        let (n2, dout) = shape_2d("row_map", output.shape())?;
        if n != n2 || jacobians.len() != n * din * dout {
            return Err(SfdError::ShapeMismatch {
                op: "row_map",
                lhs: sx,
                rhs: output.shape().to_vec(),
            });
        }
        if jacobians.iter().any(|v| !v.is_finite()) {
            return Err(SfdError::NumericOverflow {
                op: "row_map",
                step: self.step,
            });
        }
        let ng = self.needs(x);
        let Tensor { shape, data } = output;
        self.checked("row_map", shape, data, Op::RowMap(x, jacobians), ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: &[f64]) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = grads[id].take() else { continue };
            let ns = &nodes[..];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(up);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, ns, *a, &up);
                    acc(&mut grads, ns, *b, &up);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, ns, *a, &up);
                    let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                    acc(&mut grads, ns, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = up.iter().zip(&ns[b.0].value).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = up.iter().zip(&ns[a.0].value).map(|(g, x)| g * x).collect();
                    acc(&mut grads, ns, *a, &ga);
                    acc(&mut grads, ns, *b, &gb);
                }
                Op::Scale(a, s) => {
                    let g: Vec<f64> = up.iter().map(|g| g * s).collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Square(a) => {
                    let g: Vec<f64> = up
                        .iter()
                        .zip(&ns[a.0].value)
                        .map(|(g, x)| 2.0 * g * x)
                        .collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Abs(a) => {
                    let g: Vec<f64> = up
                        .iter()
                        .zip(&ns[a.0].value)
                        .map(|(g, x)| if *x == 0.0 { 0.0 } else { g * x.signum() })
                        .collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Silu(a) => {
                    let g: Vec<f64> = up
                        .iter()
                        .zip(&ns[a.0].value)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Sum(a) => {
                    let g = vec![up[0]; ns[a.0].value.len()];
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Mean(a) => {
                    let n = ns[a.0].value.len();
                    let g = vec![up[0] / n as f64; n];
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = ns[b.0].value.iter().map(|y| up[0] * y).collect();
                    let gb: Vec<f64> = ns[a.0].value.iter().map(|x| up[0] * x).collect();
                    acc(&mut grads, ns, *a, &ga);
                    acc(&mut grads, ns, *b, &gb);
                }
                Op::L1(a) => {
                    let g: Vec<f64> = ns[a.0]
                        .value
                        .iter()
                        .map(|x| if *x == 0.0 { 0.0 } else { up[0] * x.signum() })
                        .collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::L2(a) => {
                    let norm = node.value[0];
                    let g: Vec<f64> = if norm == 0.0 {
                        vec![0.0; ns[a.0].value.len()]
                    } else {
                        ns[a.0].value.iter().map(|x| up[0] * x / norm).collect()
                    };
                    acc(&mut grads, ns, *a, &g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (ns[a.0].shape[0], ns[a.0].shape[1]);
                    let n = ns[b.0].shape[1];
                    if ns[a.0].needs_grad {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &up, n as isize, 1, &ns[b.0].value, 1, n as isize, &mut ga, 0.0);
                        acc(&mut grads, ns, *a, &ga);
                    }
                    if ns[b.0].needs_grad {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, &ns[a.0].value, 1, k as isize, &up, n as isize, 1, &mut gb, 0.0);
                        acc(&mut grads, ns, *b, &gb);
                    }
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, ns, *a, &up);
                    if ns[row.0].needs_grad {
                        let m = ns[row.0].value.len();
                        let mut gr = vec![0.0; m];
                        for chunk in up.chunks(m) {
                            gr.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                        }
                        acc(&mut grads, ns, *row, &gr);
                    }
                }
                Op::MulCol(a, col) => {
                    let m = node.shape[1];
                    let c = &ns[col.0].value;
                    if ns[a.0].needs_grad {
                        let ga: Vec<f64> = up
                            .chunks(m)
                            .zip(c)
                            .flat_map(|(chunk, &s)| chunk.iter().map(move |g| g * s))
                            .collect();
                        acc(&mut grads, ns, *a, &ga);
                    }
                    if ns[col.0].needs_grad {
                        let gc: Vec<f64> = up
                            .chunks(m)
                            .zip(ns[a.0].value.chunks(m))
                            .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                            .collect();
                        acc(&mut grads, ns, *col, &gc);
                    }
                }
                Op::RowSum(a) => {
                    let m = ns[a.0].shape[1];
                    let g: Vec<f64> = up.iter().flat_map(|&g| std::iter::repeat_n(g, m)).collect();
                    acc(&mut grads, ns, *a, &g);
                }
                Op::Concat(parts) => {
                    let n = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = ns[p.0].shape[1];
                        if ns[p.0].needs_grad {
                            let mut g = Vec::with_capacity(n * w);
                            for i in 0..n {
                                g.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                            }
                            acc(&mut grads, ns, *p, &g);
                        }
                        offset += w;
                    }
                }
                Op::Gather(table, index) => {
                    let m = ns[table.0].shape[1];
                    let mut g = vec![0.0; ns[table.0].value.len()];
                    for (row, &i) in index.iter().enumerate() {
                        g[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(&up[row * m..(row + 1) * m])
                            .for_each(|(s, u)| *s += u);
                    }
                    acc(&mut grads, ns, *table, &g);
                }
                Op::RowMap(x, jac) => {
                    let din = ns[x.0].shape[1];
                    let dout = node.shape[1];
                    let n = node.shape[0];
                    let mut g = vec![0.0; n * din];
                    for i in 0..n {
                        let j = &jac[i * din * dout..(i + 1) * din * dout];
                        let u = &up[i * dout..(i + 1) * dout];
                        for c in 0..din {
                            g[i * din + c] = (0..dout).map(|r| u[r] * j[r * din + c]).sum();
                        }
                    }
                    acc(&mut grads, ns, *x, &g);
                }
            }
        }

        let out: Vec<Option<Vec<f64>>> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if n.trainable {
                    Some(grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()]))
                } else {
                    None
                }
            })
            .collect();
        for g in out.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SfdError::NumericOverflow {
                    op: "backward",
                    step: self.step,
                });
            }
        }
        Ok(Gradients { grads: out })
    }
}
