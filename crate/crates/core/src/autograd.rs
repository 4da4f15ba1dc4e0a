//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The graph is a define-by-run tape: every forward operation appends a node
//! recording its inputs, and [`Tensor::backward`] walks the tape in reverse
//! to accumulate gradients. A graph is rebuilt per forward pass and must not
//! be shared across threads (`Rc`-based handles enforce this at compile time).
//!
//! Shapes are plain `Vec<usize>`; a scalar has shape `[]` and one element.
//! Elementwise ops require equal shapes or a scalar on one side. Anything
//! larger (full NumPy-style broadcasting, GPU, convolutions) is out of scope.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// ln(2π), shared by the distribution formulas.
pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { lhs: usize, rhs: usize, bc: Bc },
    Sub { lhs: usize, rhs: usize, bc: Bc },
    Mul { lhs: usize, rhs: usize, bc: Bc },
    Div { lhs: usize, rhs: usize, bc: Bc },
    MinElem { lhs: usize, rhs: usize, bc: Bc },
    MaxElem { lhs: usize, rhs: usize, bc: Bc },
    Neg { src: usize },
    Tanh { src: usize },
    Exp { src: usize },
    Log { src: usize },
    Square { src: usize },
    Scale { src: usize, c: f64 },
    AddConst { src: usize },
    Clamp { src: usize, lo: f64, hi: f64 },
    Matmul { lhs: usize, rhs: usize, m: usize, k: usize, n: usize },
    AddRow { mat: usize, row: usize, rows: usize, cols: usize },
    SubCol { mat: usize, col: usize, rows: usize, cols: usize },
    RepeatRows { row: usize, rows: usize, cols: usize },
    Sum { src: usize },
    Mean { src: usize },
    SumLast { src: usize, last: usize },
    LogSumExpLast { src: usize, last: usize },
    GatherLast { src: usize, indices: Rc<Vec<usize>>, last: usize },
    Concat { parts: Rc<Vec<(usize, usize)>> },
}

/// How a binary elementwise op was broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bc {
    None,
    LhsScalar,
    RhsScalar,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A single differentiation tape. Create one per forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    #[allow(clippy::new_ret_no_self)]
    pub fn new() -> Rc<Graph> {
        Rc::new(Graph {
            nodes: RefCell::new(Vec::new()),
        })
    }

    fn push(self: &Rc<Self>, node: Node) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Tensor {
            graph: Rc::clone(self),
            id,
        }
    }

    /// Creates a leaf tensor. `shape` must multiply out to `data.len()`.
    pub fn tensor(
        self: &Rc<Self>,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "tensor",
                expected: format!("{} elements for shape {:?}", numel, shape),
                got: vec![data.len()],
            });
        }
        Ok(self.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        }))
    }

    /// Constant leaf (no gradient).
    pub fn constant(self: &Rc<Self>, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.tensor(data, shape, false)
    }

    /// Scalar constant, shape `[]`.
    pub fn scalar(self: &Rc<Self>, v: f64) -> Tensor {
        self.push(Node {
            data: vec![v],
            shape: vec![],
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        })
    }

    /// 1-D constant.
    pub fn vector(self: &Rc<Self>, data: Vec<f64>) -> Tensor {
        let shape = vec![data.len()];
        self.push(Node {
            data,
            shape,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        })
    }

    /// 2-D constant from a flat row-major buffer.
    pub fn matrix(self: &Rc<Self>, data: Vec<f64>, rows: usize, cols: usize) -> Result<Tensor> {
        self.constant(data, vec![rows, cols])
    }

    /// Clears the accumulated gradient on every node.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates scalars and 1-D tensors into one 1-D tensor.
    pub fn concat(self: &Rc<Self>, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        let mut requires_grad = false;
        {
            let nodes = self.nodes.borrow();
            for t in parts {
                if !Rc::ptr_eq(&t.graph, self) {
                    return Err(Error::GraphMismatch);
                }
                let node = &nodes[t.id];
                if node.shape.len() > 1 {
                    return Err(Error::BadShape {
                        op: "concat",
                        expected: "scalar or 1-D".into(),
                        got: node.shape.clone(),
                    });
                }
                meta.push((t.id, node.data.len()));
                data.extend_from_slice(&node.data);
                requires_grad |= node.requires_grad;
            }
        }
        let shape = vec![data.len()];
        Ok(self.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op: Op::Concat {
                parts: Rc::new(meta),
            },
        }))
    }
}

/// Handle to a node on a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    graph: Rc<Graph>,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("data", &node.data)
            .finish()
    }
}

macro_rules! binary_op {
    ($name:ident, $variant:ident, $fwd:expr) => {
        pub fn $name(&self, rhs: &Tensor) -> Result<Tensor> {
            self.binary(rhs, stringify!($name), $fwd, |lhs, rhs, bc| Op::$variant {
                lhs,
                rhs,
                bc,
            })
        }
    };
}

impl Tensor {
    pub fn graph(&self) -> &Rc<Graph> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the node's data out.
    pub fn data(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    /// The value of a scalar (or single-element) tensor.
    pub fn value(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        debug_assert_eq!(nodes[self.id].data.len(), 1);
        nodes[self.id].data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// New leaf with the same data, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let (data, shape) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].data.clone(), nodes[self.id].shape.clone())
        };
        self.graph.push(Node {
            data,
            shape,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        })
    }

    fn same_graph(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.graph, &other.graph) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    fn binary(
        &self,
        rhs: &Tensor,
        name: &'static str,
        fwd: fn(f64, f64) -> f64,
        make: fn(usize, usize, Bc) -> Op,
    ) -> Result<Tensor> {
        self.same_graph(rhs)?;
        let (data, shape, requires_grad, bc) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            let bc = if a.shape == b.shape {
                Bc::None
            } else if a.shape.is_empty() {
                Bc::LhsScalar
            } else if b.shape.is_empty() {
                Bc::RhsScalar
            } else {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            if name == "div" {
                for (i, &d) in b.data.iter().enumerate() {
                    if d == 0.0 {
                        return Err(Error::DivisionByZero { index: i });
                    }
                }
            }
            let (data, shape): (Vec<f64>, Vec<usize>) = match bc {
                Bc::None => (
                    a.data
                        .iter()
                        .zip(&b.data)
                        .map(|(&x, &y)| fwd(x, y))
                        .collect(),
                    a.shape.clone(),
                ),
                Bc::LhsScalar => {
                    let x = a.data[0];
                    (b.data.iter().map(|&y| fwd(x, y)).collect(), b.shape.clone())
                }
                Bc::RhsScalar => {
                    let y = b.data[0];
                    (a.data.iter().map(|&x| fwd(x, y)).collect(), a.shape.clone())
                }
            };
            (data, shape, a.requires_grad || b.requires_grad, bc)
        };
        Ok(self.graph.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op: make(self.id, rhs.id, bc),
        }))
    }

    binary_op!(add, Add, |x, y| x + y);
    binary_op!(sub, Sub, |x, y| x - y);
    binary_op!(mul, Mul, |x, y| x * y);
    binary_op!(div, Div, |x, y| x / y);
    binary_op!(min_elem, MinElem, |x: f64, y: f64| x.min(y));
    binary_op!(max_elem, MaxElem, |x: f64, y: f64| x.max(y));

    fn unary(&self, fwd: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let (data, shape, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.data.iter().map(|&x| fwd(x)).collect(),
                a.shape.clone(),
                a.requires_grad,
            )
        };
        self.graph.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, Op::Neg { src: self.id })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh { src: self.id })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp { src: self.id })
    }

    /// Natural log. Errors on any non-positive element rather than producing NaN.
    pub fn log(&self) -> Result<Tensor> {
        {
            let nodes = self.graph.nodes.borrow();
            for (i, &x) in nodes[self.id].data.iter().enumerate() {
                if x <= 0.0 {
                    return Err(Error::NonPositiveLog { value: x, index: i });
                }
            }
        }
        Ok(self.unary(f64::ln, Op::Log { src: self.id }))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, Op::Square { src: self.id })
    }

    /// Multiplies by a constant without putting the constant on the tape.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, Op::Scale { src: self.id, c })
    }

    /// Adds a constant without putting it on the tape.
    pub fn add_const(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, Op::AddConst { src: self.id })
    }

    /// Clamps every element to `[lo, hi]`. Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!(
                "clamp bounds inverted: [{lo}, {hi}]"
            )));
        }
        Ok(self.unary(|x| x.max(lo).min(hi), Op::Clamp { src: self.id, lo, hi }))
    }

    /// Row-major 2-D matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_graph(rhs)?;
        let (data, m, k, n, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (
                matmul_raw(&a.data, &b.data, m, k, n),
                m,
                k,
                n,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(Node {
            data,
            shape: vec![m, n],
            requires_grad,
            grad: None,
            op: Op::Matmul {
                lhs: self.id,
                rhs: rhs.id,
                m,
                k,
                n,
            },
        }))
    }

    /// Adds a `[cols]` row vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.same_graph(row)?;
        let (data, rows, cols, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[row.id];
            if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            (data, rows, cols, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: vec![rows, cols],
            requires_grad,
            grad: None,
            op: Op::AddRow {
                mat: self.id,
                row: row.id,
                rows,
                cols,
            },
        }))
    }

    /// Subtracts a `[rows]` column vector from every row of a `[rows, cols]` matrix.
    pub fn sub_col(&self, col: &Tensor) -> Result<Tensor> {
        self.same_graph(col)?;
        let (data, rows, cols, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[col.id];
            if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[0] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "sub_col",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] -= b.data[r];
                }
            }
            (data, rows, cols, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: vec![rows, cols],
            requires_grad,
            grad: None,
            op: Op::SubCol {
                mat: self.id,
                col: col.id,
                rows,
                cols,
            },
        }))
    }

    /// Tiles a `[cols]` vector into a `[rows, cols]` matrix.
    pub fn repeat_rows(&self, rows: usize) -> Result<Tensor> {
        let (data, cols, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 1 {
                return Err(Error::BadShape {
                    op: "repeat_rows",
                    expected: "1-D".into(),
                    got: a.shape.clone(),
                });
            }
            let cols = a.shape[0];
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                data.extend_from_slice(&a.data);
            }
            (data, cols, a.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: vec![rows, cols],
            requires_grad,
            grad: None,
            op: Op::RepeatRows {
                row: self.id,
                rows,
                cols,
            },
        }))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&self) -> Tensor {
        let (v, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().sum::<f64>(), a.requires_grad)
        };
        self.graph.push(Node {
            data: vec![v],
            shape: vec![],
            requires_grad,
            grad: None,
            op: Op::Sum { src: self.id },
        })
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&self) -> Tensor {
        let (v, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.data.iter().sum::<f64>() / a.data.len() as f64,
                a.requires_grad,
            )
        };
        self.graph.push(Node {
            data: vec![v],
            shape: vec![],
            requires_grad,
            grad: None,
            op: Op::Mean { src: self.id },
        })
    }

    fn split_last(&self, op: &'static str) -> Result<(usize, usize, Vec<usize>)> {
        let nodes = self.graph.nodes.borrow();
        let shape = &nodes[self.id].shape;
        if shape.is_empty() {
            return Err(Error::BadShape {
                op,
                expected: "rank >= 1".into(),
                got: shape.clone(),
            });
        }
        let last = shape[shape.len() - 1];
        let outer: usize = shape[..shape.len() - 1].iter().product();
        Ok((outer, last, shape[..shape.len() - 1].to_vec()))
    }

    /// Sums over the last axis: `[.., d] -> [..]`.
    pub fn sum_last(&self) -> Result<Tensor> {
        let (outer, last, out_shape) = self.split_last("sum_last")?;
        let (data, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let mut data = vec![0.0; outer];
            for (i, v) in data.iter_mut().enumerate() {
                *v = a.data[i * last..(i + 1) * last].iter().sum();
            }
            (data, a.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: out_shape,
            requires_grad,
            grad: None,
            op: Op::SumLast { src: self.id, last },
        }))
    }

    /// Overflow-safe log-sum-exp over the last axis (inputs shifted by their max).
    pub fn log_sum_exp(&self) -> Result<Tensor> {
        let (outer, last, out_shape) = self.split_last("log_sum_exp")?;
        let (data, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let mut data = vec![0.0; outer];
            for (i, v) in data.iter_mut().enumerate() {
                let row = &a.data[i * last..(i + 1) * last];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                *v = m + s.ln();
            }
            (data, a.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: out_shape,
            requires_grad,
            grad: None,
            op: Op::LogSumExpLast { src: self.id, last },
        }))
    }

    /// Picks `t[i, indices[i]]` along the last axis: `[.., d] -> [..]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let (outer, last, out_shape) = self.split_last("gather")?;
        if indices.len() != outer {
            return Err(Error::BadShape {
                op: "gather",
                expected: format!("{outer} indices"),
                got: vec![indices.len()],
            });
        }
        let (data, requires_grad) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let mut data = vec![0.0; outer];
            for (i, v) in data.iter_mut().enumerate() {
                let idx = indices[i];
                if idx >= last {
                    return Err(Error::IndexOutOfRange {
                        index: idx,
                        size: last,
                    });
                }
                *v = a.data[i * last + idx];
            }
            (data, a.requires_grad)
        };
        Ok(self.graph.push(Node {
            data,
            shape: out_shape,
            requires_grad,
            grad: None,
            op: Op::GatherLast {
                src: self.id,
                indices: Rc::new(indices.to_vec()),
                last,
            },
        }))
    }

    /// Accumulates d(self)/d(ancestor) into every requires-grad ancestor.
    /// `self` must be a scalar. Repeated calls without `zero_grad` add up.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.graph.nodes.borrow_mut();
        {
            let root = &nodes[self.id];
            if !root.shape.is_empty() {
                return Err(Error::NonScalarRoot {
                    shape: root.shape.clone(),
                });
            }
        }
        let mut flows: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        flows[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(flow) = flows[id].take() else {
                continue;
            };
            {
                let node = &mut nodes[id];
                if node.requires_grad {
                    let grad = node
                        .grad
                        .get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (g, f) in grad.iter_mut().zip(&flow) {
                        *g += f;
                    }
                }
            }
            let op = nodes[id].op.clone();
            let out_len = flow.len();
            match op {
                Op::Leaf => {}
                Op::Add { lhs, rhs, bc } => {
                    route(&nodes, &mut flows, lhs, bc == Bc::LhsScalar, out_len, |i| {
                        flow[i]
                    });
                    route(&nodes, &mut flows, rhs, bc == Bc::RhsScalar, out_len, |i| {
                        flow[i]
                    });
                }
                Op::Sub { lhs, rhs, bc } => {
                    route(&nodes, &mut flows, lhs, bc == Bc::LhsScalar, out_len, |i| {
                        flow[i]
                    });
                    route(&nodes, &mut flows, rhs, bc == Bc::RhsScalar, out_len, |i| {
                        -flow[i]
                    });
                }
                Op::Mul { lhs, rhs, bc } => {
                    let ld = &nodes[lhs].data;
                    let rd = &nodes[rhs].data;
                    let lval = |i: usize| if bc == Bc::LhsScalar { ld[0] } else { ld[i] };
                    let rval = |i: usize| if bc == Bc::RhsScalar { rd[0] } else { rd[i] };
                    route(&nodes, &mut flows, lhs, bc == Bc::LhsScalar, out_len, |i| {
                        flow[i] * rval(i)
                    });
                    route(&nodes, &mut flows, rhs, bc == Bc::RhsScalar, out_len, |i| {
                        flow[i] * lval(i)
                    });
                }
                Op::Div { lhs, rhs, bc } => {
                    let ld = &nodes[lhs].data;
                    let rd = &nodes[rhs].data;
                    let lval = |i: usize| if bc == Bc::LhsScalar { ld[0] } else { ld[i] };
                    let rval = |i: usize| if bc == Bc::RhsScalar { rd[0] } else { rd[i] };
                    route(&nodes, &mut flows, lhs, bc == Bc::LhsScalar, out_len, |i| {
                        flow[i] / rval(i)
                    });
                    route(&nodes, &mut flows, rhs, bc == Bc::RhsScalar, out_len, |i| {
                        let d = rval(i);
                        -flow[i] * lval(i) / (d * d)
                    });
                }
                Op::MinElem { lhs, rhs, bc } | Op::MaxElem { lhs, rhs, bc } => {
                    let is_min = matches!(op, Op::MinElem { .. });
                    let ld = &nodes[lhs].data;
                    let rd = &nodes[rhs].data;
                    let lval = |i: usize| if bc == Bc::LhsScalar { ld[0] } else { ld[i] };
                    let rval = |i: usize| if bc == Bc::RhsScalar { rd[0] } else { rd[i] };
                    // Strict winner takes the gradient; exact ties split evenly.
                    let weight = |i: usize, left: bool| {
                        let x = lval(i);
                        let y = rval(i);
                        let lhs_wins = if is_min { x < y } else { x > y };
                        let rhs_wins = if is_min { y < x } else { y > x };
                        if lhs_wins {
                            if left {
                                1.0
                            } else {
                                0.0
                            }
                        } else if rhs_wins {
                            if left {
                                0.0
                            } else {
                                1.0
                            }
                        } else {
                            0.5
                        }
                    };
                    route(&nodes, &mut flows, lhs, bc == Bc::LhsScalar, out_len, |i| {
                        flow[i] * weight(i, true)
                    });
                    route(&nodes, &mut flows, rhs, bc == Bc::RhsScalar, out_len, |i| {
                        flow[i] * weight(i, false)
                    });
                }
                Op::Neg { src } => route(&nodes, &mut flows, src, false, out_len, |i| -flow[i]),
                Op::Tanh { src } => {
                    let out = &nodes[id].data;
                    route(&nodes, &mut flows, src, false, out_len, |i| {
                        flow[i] * (1.0 - out[i] * out[i])
                    });
                }
                Op::Exp { src } => {
                    let out = &nodes[id].data;
                    route(&nodes, &mut flows, src, false, out_len, |i| flow[i] * out[i]);
                }
                Op::Log { src } => {
                    let x = &nodes[src].data;
                    route(&nodes, &mut flows, src, false, out_len, |i| flow[i] / x[i]);
                }
                Op::Square { src } => {
                    let x = &nodes[src].data;
                    route(&nodes, &mut flows, src, false, out_len, |i| {
                        flow[i] * 2.0 * x[i]
                    });
                }
                Op::Scale { src, c } => {
                    route(&nodes, &mut flows, src, false, out_len, |i| flow[i] * c)
                }
                Op::AddConst { src } => {
                    route(&nodes, &mut flows, src, false, out_len, |i| flow[i])
                }
                Op::Clamp { src, lo, hi } => {
                    let x = &nodes[src].data;
                    route(&nodes, &mut flows, src, false, out_len, |i| {
                        if x[i] >= lo && x[i] <= hi {
                            flow[i]
                        } else {
                            0.0
                        }
                    });
                }
                Op::Matmul { lhs, rhs, m, k, n } => {
                    if nodes[lhs].requires_grad {
                        // dA = G @ B^T
                        let b = &nodes[rhs].data;
                        let buf = ensure(&mut flows, lhs, m * k);
                        for i in 0..m {
                            for j in 0..k {
                                let mut s = 0.0;
                                for p in 0..n {
                                    s += flow[i * n + p] * b[j * n + p];
                                }
                                buf[i * k + j] += s;
                            }
                        }
                    }
                    if nodes[rhs].requires_grad {
                        // dB = A^T @ G
                        let a = &nodes[lhs].data;
                        let buf = ensure(&mut flows, rhs, k * n);
                        for p in 0..m {
                            for i in 0..k {
                                let av = a[p * k + i];
                                if av != 0.0 {
                                    let frow = &flow[p * n..(p + 1) * n];
                                    let brow = &mut buf[i * n..(i + 1) * n];
                                    for j in 0..n {
                                        brow[j] += av * frow[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AddRow {
                    mat,
                    row,
                    rows,
                    cols,
                } => {
                    route(&nodes, &mut flows, mat, false, out_len, |i| flow[i]);
                    if nodes[row].requires_grad {
                        let buf = ensure(&mut flows, row, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] += flow[r * cols + c];
                            }
                        }
                    }
                }
                Op::SubCol {
                    mat,
                    col,
                    rows,
                    cols,
                } => {
                    route(&nodes, &mut flows, mat, false, out_len, |i| flow[i]);
                    if nodes[col].requires_grad {
                        let buf = ensure(&mut flows, col, rows);
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[r] -= flow[r * cols + c];
                            }
                        }
                    }
                }
                Op::RepeatRows { row, rows, cols } => {
                    if nodes[row].requires_grad {
                        let buf = ensure(&mut flows, row, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] += flow[r * cols + c];
                            }
                        }
                    }
                }
                Op::Sum { src } => {
                    let g = flow[0];
                    route(&nodes, &mut flows, src, false, nodes[src].data.len(), |_| g);
                }
                Op::Mean { src } => {
                    let g = flow[0] / nodes[src].data.len() as f64;
                    route(&nodes, &mut flows, src, false, nodes[src].data.len(), |_| g);
                }
                Op::SumLast { src, last } => {
                    route(&nodes, &mut flows, src, false, nodes[src].data.len(), |i| {
                        flow[i / last]
                    });
                }
                Op::LogSumExpLast { src, last } => {
                    let x = &nodes[src].data;
                    let out = &nodes[id].data;
                    route(&nodes, &mut flows, src, false, nodes[src].data.len(), |i| {
                        flow[i / last] * (x[i] - out[i / last]).exp()
                    });
                }
                Op::GatherLast {
                    src,
                    ref indices,
                    last,
                } => {
                    if nodes[src].requires_grad {
                        let buf = ensure(&mut flows, src, nodes[src].data.len());
                        for (i, &idx) in indices.iter().enumerate() {
                            buf[i * last + idx] += flow[i];
                        }
                    }
                }
                Op::Concat { ref parts } => {
                    let mut offset = 0;
                    for &(part_id, len) in parts.iter() {
                        if nodes[part_id].requires_grad {
                            let buf = ensure(&mut flows, part_id, len);
                            for (j, b) in buf.iter_mut().enumerate() {
                                *b += flow[offset + j];
                            }
                        }
                        offset += len;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds per-output-position gradient contributions into `flows[target]`.
/// When the target was a broadcast scalar, contributions sum into one slot.
fn route(
    nodes: &[Node],
    flows: &mut [Option<Vec<f64>>],
    target: usize,
    scalar_broadcast: bool,
    out_len: usize,
    g: impl Fn(usize) -> f64,
) {
    if !nodes[target].requires_grad {
        return;
    }
    if scalar_broadcast {
        let buf = flows[target].get_or_insert_with(|| vec![0.0; 1]);
        let mut s = 0.0;
        for i in 0..out_len {
            s += g(i);
        }
        buf[0] += s;
    } else {
        let len = nodes[target].data.len();
        debug_assert_eq!(len, out_len);
        let buf = flows[target].get_or_insert_with(|| vec![0.0; len]);
        for (i, b) in buf.iter_mut().enumerate() {
            *b += g(i);
        }
    }
}

fn ensure(flows: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    flows[id].get_or_insert_with(|| vec![0.0; len])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(g: &Rc<Graph>, v: f64) -> Tensor {
        g.tensor(vec![v], vec![], true).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let a = g.vector(vec![1.0, 2.0]);
        let b = g.vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), vec![4.0, 6.0]);
    }

    #[test]
    fn log_sum_exp_two_zeros() {
        let g = Graph::new();
        let x = g.vector(vec![0.0, 0.0]);
        let lse = x.log_sum_exp().unwrap();
        assert!((lse.value() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_overflow_safe() {
        let g = Graph::new();
        let x = g.vector(vec![1000.0, 1000.0]);
        let lse = x.log_sum_exp().unwrap();
        assert!(lse.value().is_finite());
        assert!((lse.value() - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = g.matrix(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let m = g.matrix(vec![1.5, -2.0, 3.0, 0.25], 2, 2).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = scalar_leaf(&g, 3.0);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        let x0 = 0.5;
        let eps = 1e-5;
        let g = Graph::new();
        let x = scalar_leaf(&g, x0);
        let y = x.tanh();
        y.backward().unwrap();
        let ad = x.grad().unwrap()[0];
        let fd = ((x0 + eps).tanh() - (x0 - eps).tanh()) / (2.0 * eps);
        assert!((ad - fd).abs() / fd.abs() < 1e-6);
    }

    #[test]
    fn sum_of_add_gives_unit_grads() {
        let g = Graph::new();
        let a = g.tensor(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let b = g.tensor(vec![4.0, 5.0, 6.0], vec![3], true).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 3]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn backward_accumulates_and_zero_grad_resets() {
        let g = Graph::new();
        let x = scalar_leaf(&g, 2.0);
        let y = x.square();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]); // 2 * dx^2/dx at 2
        g.zero_grad();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_deterministic_across_calls() {
        let g = Graph::new();
        let a = g.tensor(vec![0.3, -0.7, 1.1, 0.2], vec![2, 2], true).unwrap();
        let b = g.tensor(vec![0.5, 0.4, -0.2, 0.9], vec![2, 2], true).unwrap();
        let y = a.matmul(&b).unwrap().tanh().mean();
        y.backward().unwrap();
        let g1 = a.grad().unwrap();
        g.zero_grad();
        y.backward().unwrap();
        let g2 = a.grad().unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let g = Graph::new();
        let a = g.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(
            a.backward(),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.vector(vec![1.0, 2.0]);
        let b = g.vector(vec![1.0, 2.0, 3.0]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_of_non_positive_errors() {
        let g = Graph::new();
        let a = g.vector(vec![1.0, 0.0]);
        assert!(matches!(a.log(), Err(Error::NonPositiveLog { .. })));
        let b = g.vector(vec![-1.0]);
        assert!(matches!(b.log(), Err(Error::NonPositiveLog { .. })));
    }

    #[test]
    fn scalar_broadcast_grad_sums() {
        let g = Graph::new();
        let s = scalar_leaf(&g, 2.0);
        let v = g.vector(vec![1.0, 2.0, 3.0]);
        // y = sum(s * v) => dy/ds = sum(v) = 6
        s.mul(&v).unwrap().sum().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let g = Graph::new();
        let x = g.tensor(vec![-2.0, 0.5, 3.0], vec![3], true).unwrap();
        x.clamp(-1.0, 1.0).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_and_concat_roundtrip_grads() {
        let g = Graph::new();
        let x = g
            .tensor(vec![0.1, 0.9, 0.4, 0.6], vec![2, 2], true)
            .unwrap();
        let picked = x.gather(&[1, 0]).unwrap();
        assert_eq!(picked.data(), vec![0.9, 0.4]);
        picked.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);

        let a = g.tensor(vec![1.0], vec![], true).unwrap();
        let b = g.tensor(vec![2.0, 3.0], vec![2], true).unwrap();
        let c = g.concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.data(), vec![1.0, 2.0, 3.0]);
        c.scale(2.0).sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn gather_index_out_of_range() {
        let g = Graph::new();
        let x = g.matrix(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert!(matches!(
            x.gather(&[0, 2]),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let g = Graph::new();
        let a = g.vector(vec![1.0]);
        let b = g.vector(vec![0.0]);
        assert!(matches!(a.div(&b), Err(Error::DivisionByZero { .. })));
    }

    #[test]
    fn graphs_do_not_mix() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.vector(vec![1.0]);
        let b = g2.vector(vec![1.0]);
        assert!(matches!(a.add(&b), Err(Error::GraphMismatch)));
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let g = Graph::new();
        let x = scalar_leaf(&g, 3.0);
        let d = x.square().detach();
        let y = d.mul(&x).unwrap();
        y.backward().unwrap();
        // y = detach(x^2) * x, so dy/dx = 9, not 27.
        assert_eq!(x.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn matmul_grads_match_manual() {
        let g = Graph::new();
        let a = g.tensor(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let b = g.tensor(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2], true).unwrap();
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // d(sum(AB))/dA = ones @ B^T ; /dB = A^T @ ones
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn repeat_rows_and_add_row_grads() {
        let g = Graph::new();
        let row = g.tensor(vec![1.0, -1.0], vec![2], true).unwrap();
        let tiled = row.repeat_rows(3).unwrap();
        assert_eq!(tiled.shape(), vec![3, 2]);
        tiled.sum().backward().unwrap();
        assert_eq!(row.grad().unwrap(), vec![3.0, 3.0]);

        g.zero_grad();
        let mat = g.matrix(vec![0.0; 6], 3, 2).unwrap();
        let bias = g.tensor(vec![0.5, 0.25], vec![2], true).unwrap();
        mat.add_row(&bias).unwrap().sum().backward().unwrap();
        assert_eq!(bias.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn sub_col_grads() {
        let g = Graph::new();
        let mat = g.matrix(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let col = g.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
        let out = mat.sub_col(&col).unwrap();
        assert_eq!(out.data(), vec![0.0, 1.0, 1.0, 2.0]);
        out.sum().backward().unwrap();
        assert_eq!(col.grad().unwrap(), vec![-2.0, -2.0]);
    }
}
