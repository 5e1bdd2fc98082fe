//! Define-by-run recording of primitive operations.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm};
use super::EngineError;
use crate::tensor::{ParameterSet, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Tanh,
    Softplus,
    Square,
    Sqrt,
}

impl Unary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => kernels::tanh(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Square => x * x,
            Unary::Sqrt => libm::sqrt(x),
        }
    }

    /// First and second derivative at `x`, given the output `y = f(x)`.
    /// `None` where the primitive is not twice differentiable.
    pub(crate) fn derivatives(self, x: f64, y: f64) -> Option<(f64, f64)> {
        match self {
            Unary::Tanh => {
                let d1 = 1.0 - y * y;
                Some((d1, -2.0 * y * d1))
            }
            Unary::Softplus => {
                let s = kernels::sigmoid(x);
                Some((s, s * (1.0 - s)))
            }
            Unary::Square => Some((2.0 * x, 2.0)),
            Unary::Sqrt => (x > 0.0).then(|| (0.5 / y, -0.25 / (y * y * y))),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input(String),
    Constant,
    /// `x · w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Multiplication by a one-element variable.
    ScaleBy {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    Offset(Var, f64),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    /// `[n, m] → [n, 1]`.
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(u, _) => u.name(),
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Constant => Vec::new(),
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Unary(_, x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x)
            | Op::Reshape(x) => vec![*x],
            Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
}

/// A computation record: an append-only, topologically ordered list of
/// primitive operations together with their forward values.
///
/// Every operation only refers to earlier nodes, so the record is acyclic by
/// construction. A graph is single-owner; independent graphs may be built and
/// differentiated concurrently.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

pub(crate) fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64, EngineError> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(EngineError::NotScalar {
                node: v.0,
                shape: n.shape.clone(),
            });
        }
        Ok(n.value[0])
    }

    /// Declares a named input. Names must be unique within a graph.
    pub fn input(&mut self, name: &str, value: &Tensor) -> Result<Var, EngineError> {
        if self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Input(existing) if existing == name))
        {
            return Err(EngineError::DuplicateInput(name.to_string()));
        }
        self.leaf(Op::Input(name.to_string()), value)
    }

    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(Op::Constant, value).expect("constants are validated tensors")
    }

    /// Row-major `rows × cols` constant.
    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, EngineError> {
        let t = Tensor::matrix(rows, cols, data).map_err(|e| EngineError::Shape {
            op: "constant",
            node: self.nodes.len(),
            detail: e.to_string(),
        })?;
        self.leaf(Op::Constant, &t)
    }

    fn leaf(&mut self, op: Op, value: &Tensor) -> Result<Var, EngineError> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value: value.data().to_vec(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Result<Var, EngineError> {
        let node = self.nodes.len();
        let (shape, value) = self.forward(&op, node)?;
        self.nodes.push(Node { op, shape, value });
        Ok(Var(node))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Mul(a, b))
    }

    /// `s · x` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, EngineError> {
        self.push(Op::ScaleBy { x, s })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.push(Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.push(Op::Offset(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Unary(Unary::Tanh, x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Unary(Unary::Softplus, x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Unary(Unary::Square, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Unary(Unary::Sqrt, x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::Mean(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var, EngineError> {
        self.push(Op::RowSum(x))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, EngineError> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, EngineError> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var, EngineError> {
        self.push(Op::GatherRows { x, index })
    }

    /// Reinterprets `x` with a new shape holding the same number of values.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let node = self.nodes.len();
        let want: usize = shape.iter().product();
        let have = self.nodes[x.0].value.len();
        if want != have || shape.contains(&0) {
            return Err(EngineError::Shape {
                op: "reshape",
                node,
                detail: format!("cannot view {have} values as {shape:?}"),
            });
        }
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            op: Op::Reshape(x),
            shape: shape.to_vec(),
            value,
        });
        Ok(Var(node))
    }

    /// Re-evaluates the recorded operations with new input values.
    ///
    /// Every declared input must be present in `inputs` with its recorded
    /// shape. Constants keep their recorded values.
    pub fn replay(&mut self, inputs: &ParameterSet) -> Result<(), EngineError> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| EngineError::MissingInput(name.clone()))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(EngineError::Shape {
                            op: "input",
                            node: i,
                            detail: format!(
                                "input `{name}` has shape {:?}, program expects {:?}",
                                t.shape(),
                                self.nodes[i].shape
                            ),
                        });
                    }
                    if !t.is_finite() {
                        return Err(EngineError::NonFinite { op: "input", node: i });
                    }
                    self.nodes[i].value.copy_from_slice(t.data());
                }
                Op::Reshape(x) => {
                    let v = self.nodes[x.0].value.clone();
                    self.nodes[i].value = v;
                }
                op => {
                    let op = op.clone();
                    let (shape, value) = self.forward(&op, i)?;
                    if shape != self.nodes[i].shape {
                        return Err(EngineError::Shape {
                            op: op.name(),
                            node: i,
                            detail: format!(
                                "replayed shape {shape:?} differs from recorded {:?}",
                                self.nodes[i].shape
                            ),
                        });
                    }
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(())
    }

    fn forward(&self, op: &Op, node: usize) -> Result<(Vec<usize>, Vec<f64>), EngineError> {
        let name = op.name();
        let shape_err = |detail: String| EngineError::Shape { op: name, node, detail };
        let val = |v: &Var| &self.nodes[v.0].value;
        let shp = |v: &Var| self.nodes[v.0].shape.as_slice();
        for v in op.inputs() {
            if v.0 >= node {
                return Err(shape_err(format!("refers to node {} not yet recorded", v.0)));
            }
        }
        let out = match op {
            Op::Input(_) | Op::Constant => unreachable!("leaves are not re-evaluated"),
            Op::Affine { x, w, b } => {
                let (n, i) =
                    matrix_dims(shp(x)).ok_or_else(|| shape_err(format!("lhs must be a matrix, got {:?}", shp(x))))?;
                let (wi, o) = matrix_dims(shp(w))
                    .ok_or_else(|| shape_err(format!("weight must be a matrix, got {:?}", shp(w))))?;
                if wi != i {
                    return Err(shape_err(format!(
                        "lhs {:?} incompatible with weight {:?}",
                        shp(x),
                        shp(w)
                    )));
                }
                let mut y = vec![0.0; n * o];
                gemm(n, i, o, val(x), false, val(w), false, 0.0, &mut y);
                if let Some(b) = b {
                    if val(b).len() != o || shp(b).len() != 1 {
                        return Err(shape_err(format!("bias {:?} must be [{o}]", shp(b))));
                    }
                    kernels::add_row_bias(&mut y, val(b));
                }
                (vec![n, o], y)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                if shp(a) != shp(b) {
                    return Err(shape_err(format!("operands {:?} and {:?}", shp(a), shp(b))));
                }
                let y = val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(p, q)| match op {
                        Op::Add(..) => p + q,
                        Op::Sub(..) => p - q,
                        _ => p * q,
                    })
                    .collect();
                (shp(a).to_vec(), y)
            }
            Op::ScaleBy { x, s } => {
                if val(s).len() != 1 {
                    return Err(shape_err(format!("scale factor must have one value, got {:?}", shp(s))));
                }
                let c = val(s)[0];
                (shp(x).to_vec(), val(x).iter().map(|v| c * v).collect())
            }
            Op::Scale(x, c) => (shp(x).to_vec(), val(x).iter().map(|v| c * v).collect()),
            Op::Offset(x, c) => (shp(x).to_vec(), val(x).iter().map(|v| c + v).collect()),
            Op::Unary(u, x) => (shp(x).to_vec(), val(x).iter().map(|&v| u.apply(v)).collect()),
            Op::Sum(x) => (Vec::new(), vec![val(x).iter().sum()]),
            Op::Mean(x) => {
                let xs = val(x);
                (Vec::new(), vec![xs.iter().sum::<f64>() / xs.len() as f64])
            }
            Op::RowSum(x) => {
                let (r, c) =
                    matrix_dims(shp(x)).ok_or_else(|| shape_err(format!("expects a matrix, got {:?}", shp(x))))?;
                let y = val(x).chunks_exact(c).map(|row| row.iter().sum()).collect();
                (vec![r, 1], y)
            }
            Op::ConcatCols(xs) => {
                if xs.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let mut rows = None;
                let mut widths = Vec::with_capacity(xs.len());
                for x in xs {
                    let (r, c) = matrix_dims(shp(x))
                        .ok_or_else(|| shape_err(format!("operand {:?} is not a matrix", shp(x))))?;
                    if *rows.get_or_insert(r) != r {
                        return Err(shape_err(format!("row counts differ: {:?}", shp(x))));
                    }
                    widths.push(c);
                }
                let rows = rows.unwrap_or(0);
                let total: usize = widths.iter().sum();
                let mut y = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (x, &c) in xs.iter().zip(&widths) {
                        y.extend_from_slice(&val(x)[r * c..(r + 1) * c]);
                    }
                }
                (vec![rows, total], y)
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) =
                    matrix_dims(shp(x)).ok_or_else(|| shape_err(format!("expects a matrix, got {:?}", shp(x))))?;
                if start >= end || *end > c {
                    return Err(shape_err(format!("columns {start}..{end} out of 0..{c}")));
                }
                let mut y = Vec::with_capacity(r * (end - start));
                for row in val(x).chunks_exact(c) {
                    y.extend_from_slice(&row[*start..*end]);
                }
                (vec![r, end - start], y)
            }
            Op::GatherRows { x, index } => {
                let (r, c) =
                    matrix_dims(shp(x)).ok_or_else(|| shape_err(format!("expects a matrix, got {:?}", shp(x))))?;
                if index.is_empty() {
                    return Err(shape_err("empty row index".into()));
                }
                let mut y = Vec::with_capacity(index.len() * c);
                for &i in index {
                    if i >= r {
                        return Err(shape_err(format!("row {i} out of 0..{r}")));
                    }
                    y.extend_from_slice(&val(x)[i * c..(i + 1) * c]);
                }
                (vec![index.len(), c], y)
            }
            Op::Reshape(_) => unreachable!("reshape is recorded directly"),
        };
        if out.1.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite { op: name, node });
        }
        Ok(out)
    }
}
