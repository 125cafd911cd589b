//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense `f64` matrix. Operations append nodes; nothing is
//! evaluated lazily. Forward-mode tangents (input Jacobians) are built from the
//! same primitive ops, so reverse-mode over a graph that contains them yields
//! the mixed second derivatives needed to train through a Jacobian.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Result, TsnetError};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    AddScalarNode(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    SumCols(NodeId),
    RepeatRows(NodeId, usize),
    TileRows(NodeId, usize),
    GroupSum(NodeId, usize),
    Flatten(NodeId),
    SelectRows(NodeId, usize, usize),
    LogSumExp(NodeId),
    SoftmaxRows(NodeId),
    BlockMatMulNT(NodeId, NodeId, usize),
    BlockMatMul(NodeId, NodeId, usize),
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulCol(..) => "mul_col",
            Op::AddScalarNode(..) => "add_scalar_node",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum_all",
            Op::SumCols(..) => "sum_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::GroupSum(..) => "group_sum",
            Op::Flatten(..) => "flatten",
            Op::SelectRows(..) => "select_rows",
            Op::LogSumExp(..) => "logsumexp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::BlockMatMulNT(..) => "block_matmul_nt",
            Op::BlockMatMul(..) => "block_matmul",
            Op::Detach => "detach",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`], the same expression the backward pass uses.
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TsnetError::shape(
                op,
                format!("operands {:?} and {:?} differ", sa, sb),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TsnetError::shape(
                "matmul",
                format!("inner dimensions {:?} x {:?}", sa, sb),
            ));
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(TsnetError::shape(
                "add_row",
                format!("bias {:?} does not broadcast over {:?}", sb, sa),
            ));
        }
        let v = self.value(a) + self.value(bias);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(v, Op::AddRow(a, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a) / self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    /// `a ⊙ v` with an `r x 1` column broadcast over columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc.1 != 1 || sc.0 != sa.0 {
            return Err(TsnetError::shape(
                "mul_col",
                format!("column {:?} does not broadcast over {:?}", sc, sa),
            ));
        }
        let v = self.value(a) * self.value(col);
        let rg = self.rg(&[a, col]);
        Ok(self.push(v, Op::MulCol(a, col), rg))
    }

    /// `a + s` where `s` is a `1 x 1` node.
    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(TsnetError::shape("add_scalar_node", "scalar operand is not 1x1"));
        }
        let sv = self.scalar(s);
        let v = self.value(a).mapv(|x| x + sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(v, Op::AddScalarNode(a, s), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).mapv(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Repeats every row `k` times consecutively: row `i*k + j` is row `i`.
    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut v = Array2::zeros((r * k, c));
        for i in 0..r {
            for j in 0..k {
                v.row_mut(i * k + j).assign(&src.row(i));
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::RepeatRows(a, k), rg)
    }

    /// Stacks `k` copies of the whole matrix: row `j*r + i` is row `i`.
    pub fn tile_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut v = Array2::zeros((r * k, c));
        for j in 0..k {
            v.slice_mut(s![j * r..(j + 1) * r, ..]).assign(src);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::TileRows(a, k), rg)
    }

    /// Sums contiguous groups of `k` rows: `(n*k) x c -> n x c`.
    pub fn group_sum(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if k == 0 || r % k != 0 {
            return Err(TsnetError::shape(
                "group_sum",
                format!("{} rows not divisible into groups of {}", r, k),
            ));
        }
        let src = self.value(a);
        let mut v = Array2::zeros((r / k, c));
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            for j in 0..k {
                row += &src.row(i * k + j);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::GroupSum(a, k), rg))
    }

    /// Row-major flatten into a column: `r x c -> (r*c) x 1`.
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let data: Vec<f64> = src.iter().copied().collect();
        let n = data.len();
        let v = Array2::from_shape_vec((n, 1), data).expect("flatten shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Flatten(a), rg)
    }

    pub fn select_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if start + len > r {
            return Err(TsnetError::shape(
                "select_rows",
                format!("rows {}..{} out of {}", start, start + len, r),
            ));
        }
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SelectRows(a, start, len), rg))
    }

    /// `log Σ exp(a)` over every entry, as a `1 x 1` node.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let m = src.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        let s: f64 = src.iter().map(|&x| (x - m).exp()).sum();
        let v = Array2::from_elem((1, 1), m + s.ln());
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSumExp(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    fn check_blocks(&self, a: NodeId, b: NodeId, t: usize, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if t == 0 || sa.0 != sb.0 || sa.0 % t != 0 {
            return Err(TsnetError::shape(
                op,
                format!("operands {:?} and {:?} with block {}", sa, sb, t),
            ));
        }
        Ok(())
    }

    /// Per-block `A_b B_bᵀ` over contiguous blocks of `t` rows:
    /// `(n*t) x d, (n*t) x d -> (n*t) x t`.
    pub fn block_matmul_nt(&mut self, a: NodeId, b: NodeId, t: usize) -> Result<NodeId> {
        self.check_blocks(a, b, t, "block_matmul_nt")?;
        if self.shape(a).1 != self.shape(b).1 {
            return Err(TsnetError::shape("block_matmul_nt", "column counts differ"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.nrows() / t;
        let mut v = Array2::zeros((n * t, t));
        for blk in 0..n {
            let r = blk * t..(blk + 1) * t;
            let prod = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]).t());
            v.slice_mut(s![r, ..]).assign(&prod);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::BlockMatMulNT(a, b, t), rg))
    }

    /// Per-block `A_b V_b`: `(n*t) x t, (n*t) x d -> (n*t) x d`.
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, t: usize) -> Result<NodeId> {
        self.check_blocks(a, b, t, "block_matmul")?;
        if self.shape(a).1 != t {
            return Err(TsnetError::shape("block_matmul", "left operand must be (n*t) x t"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.nrows() / t;
        let d = bv.ncols();
        let mut v = Array2::zeros((n * t, d));
        for blk in 0..n {
            let r = blk * t..(blk + 1) * t;
            let prod = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]));
            v.slice_mut(s![r, ..]).assign(&prod);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::BlockMatMul(a, b, t), rg))
    }

    /// Identity on values, blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    /// Reverse-mode sweep from a `1 x 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(TsnetError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.value.iter().any(|x| !x.is_finite()) {
                return Err(TsnetError::Numeric {
                    node: i,
                    op: node.op.name(),
                    phase: "forward",
                });
            }
        }

        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TsnetError::Numeric {
                    node: idx,
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |grads: &mut [Option<Mat>], id: NodeId, d: Mat| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;

        match node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(grads, a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    acc(grads, b, val(a).t().dot(g));
                }
            }
            Op::AddRow(a, bias) => {
                acc(grads, a, g.clone());
                if needs(bias) {
                    acc(grads, bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, a, g.clone());
                if needs(b) {
                    acc(grads, b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(grads, a, g * val(b));
                }
                if needs(b) {
                    acc(grads, b, g * val(a));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    acc(grads, a, g / val(b));
                }
                if needs(b) {
                    // d(a/b)/db = -(a/b)/b
                    let mut d = g * out;
                    d /= val(b);
                    acc(grads, b, -d);
                }
            }
            Op::MulCol(a, col) => {
                if needs(a) {
                    acc(grads, a, g * val(col));
                }
                if needs(col) {
                    let d = (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(grads, col, d);
                }
            }
            Op::AddScalarNode(a, s) => {
                acc(grads, a, g.clone());
                if needs(s) {
                    acc(grads, s, Array2::from_elem((1, 1), g.sum()));
                }
            }
            Op::Scale(a, c) => acc(grads, a, g * c),
            Op::Offset(a) => acc(grads, a, g.clone()),
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(grads, a, d);
            }
            Op::Exp(a) => acc(grads, a, g * out),
            Op::Ln(a) => acc(grads, a, g / val(a)),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 0.5 / y);
                acc(grads, a, d);
            }
            Op::Square(a) => {
                let mut d = g * val(a);
                d *= 2.0;
                acc(grads, a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                acc(grads, a, d);
            }
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                acc(grads, a, Array2::from_elem(val(a).dim(), gv));
            }
            Op::SumCols(a) => {
                let (r, c) = val(a).dim();
                let mut d = Array2::zeros((r, c));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.fill(g[[i, 0]]);
                }
                acc(grads, a, d);
            }
            Op::RepeatRows(a, k) => {
                let (r, c) = val(a).dim();
                let mut d = Array2::zeros((r, c));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    for j in 0..k {
                        row += &g.row(i * k + j);
                    }
                }
                acc(grads, a, d);
            }
            Op::TileRows(a, k) => {
                let (r, c) = val(a).dim();
                let mut d = Array2::zeros((r, c));
                for j in 0..k {
                    d += &g.slice(s![j * r..(j + 1) * r, ..]);
                }
                acc(grads, a, d);
            }
            Op::GroupSum(a, k) => {
                let (r, c) = val(a).dim();
                let mut d = Array2::zeros((r, c));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.assign(&g.row(i / k));
                }
                acc(grads, a, d);
            }
            Op::Flatten(a) => {
                let dim = val(a).dim();
                let d = Array2::from_shape_vec(dim, g.iter().copied().collect())
                    .expect("flatten gradient shape");
                acc(grads, a, d);
            }
            Op::SelectRows(a, start, len) => {
                let mut d = Array2::zeros(val(a).dim());
                d.slice_mut(s![start..start + len, ..]).assign(g);
                acc(grads, a, d);
            }
            Op::LogSumExp(a) => {
                let lse = out[[0, 0]];
                let gv = g[[0, 0]];
                acc(grads, a, val(a).mapv(|x| gv * (x - lse).exp()));
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                let dots = d.sum_axis(Axis(1));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yi = out.row(i);
                    Zip::from(&mut row).and(&yi).for_each(|dv, &y| *dv -= y * dots[i]);
                }
                acc(grads, a, d);
            }
            Op::BlockMatMulNT(a, b, t) => {
                let (av, bv) = (val(a), val(b));
                let n = av.nrows() / t;
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for blk in 0..n {
                    let r = blk * t..(blk + 1) * t;
                    let gb = g.slice(s![r.clone(), ..]);
                    da.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&bv.slice(s![r.clone(), ..])));
                    db.slice_mut(s![r.clone(), ..])
                        .assign(&gb.t().dot(&av.slice(s![r, ..])));
                }
                acc(grads, a, da);
                acc(grads, b, db);
            }
            Op::BlockMatMul(a, b, t) => {
                let (av, bv) = (val(a), val(b));
                let n = av.nrows() / t;
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for blk in 0..n {
                    let r = blk * t..(blk + 1) * t;
                    let gb = g.slice(s![r.clone(), ..]);
                    da.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&bv.slice(s![r.clone(), ..]).t()));
                    db.slice_mut(s![r.clone(), ..])
                        .assign(&av.slice(s![r, ..]).t().dot(&gb));
                }
                acc(grads, a, da);
                acc(grads, b, db);
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like its value when no path reached it.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Mat {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(graph.shape(id)))
    }

    /// Concatenates the row-major gradients of `ids` into one flat vector.
    pub fn flatten(&self, graph: &Graph, ids: &[NodeId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match self.get(id) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, graph.value(id).len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sigmoid_derivative_identity() {
        assert_eq!(sigmoid_prime(0.0), 0.25);
        for i in -50..=50 {
            let x = i as f64 * 0.37;
            let s = sigmoid(x);
            assert!((sigmoid_prime(x) - s * (1.0 - s)).abs() <= 1e-15);
        }
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0]]);
        assert!(matches!(g.backward(a), Err(TsnetError::Contract(_))));
    }

    #[test]
    fn nan_reports_offending_node() {
        let mut g = Graph::new();
        let a = g.leaf(array![[-1.0]]);
        let l = g.ln(a);
        let s = g.sum_all(l);
        match g.backward(s) {
            Err(TsnetError::Numeric { node, op, .. }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "ln");
            }
            other => panic!("expected numeric error, got {:?}", other.err()),
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        // f(x) = sum( sqrt(exp(x)) * sigmoid(x) / (1 + x^2) + ln(x + 3) )
        let build = |x0: f64, g: &mut Graph| {
            let x = g.leaf(array![[x0]]);
            let e = g.exp(x);
            let r = g.sqrt(e);
            let s = g.sigmoid(x);
            let num = g.mul(r, s).unwrap();
            let sq = g.square(x);
            let den = g.offset(sq, 1.0);
            let q = g.div(num, den).unwrap();
            let lx = g.offset(x, 3.0);
            let l = g.ln(lx);
            let tot = g.add(q, l).unwrap();
            (x, g.sum_all(tot))
        };
        for &x0 in &[-1.3, 0.0, 0.7, 2.1] {
            let mut g = Graph::new();
            let (x, loss) = build(x0, &mut g);
            let grads = g.backward(loss).unwrap();
            let analytic = grads.get(x).unwrap()[[0, 0]];
            let numeric = fd_scalar(
                |v| {
                    let mut g = Graph::new();
                    let (_, l) = build(v, &mut g);
                    g.scalar(l)
                },
                x0,
            );
            assert!((analytic - numeric).abs() < 1e-7, "{analytic} vs {numeric}");
        }
    }

    #[test]
    fn block_ops_and_softmax_gradients() {
        // loss = sum( softmax_rows(Q Kᵀ) V ⊙ W ) over 2 blocks of 3 tokens
        let q0 = Array2::from_shape_fn((6, 2), |(i, j)| 0.1 * (i as f64) - 0.3 * (j as f64) + 0.2);
        let k0 = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.7 + j as f64).sin());
        let v0 = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.3 - j as f64).cos());
        let w0 = Array2::from_shape_fn((6, 2), |(i, j)| 1.0 + 0.1 * (i * 2 + j) as f64);
        let eval = |q: &Mat, k: &Mat, v: &Mat| -> (f64, Vec<Mat>) {
            let mut g = Graph::new();
            let (qn, kn, vn) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let w = g.constant(w0.clone());
            let sc = g.block_matmul_nt(qn, kn, 3).unwrap();
            let a = g.softmax_rows(sc);
            let o = g.block_matmul(a, vn, 3).unwrap();
            let m = g.mul(o, w).unwrap();
            let l = g.sum_all(m);
            let gr = g.backward(l).unwrap();
            (
                g.scalar(l),
                vec![
                    gr.get_or_zeros(&g, qn),
                    gr.get_or_zeros(&g, kn),
                    gr.get_or_zeros(&g, vn),
                ],
            )
        };
        let (_, analytic) = eval(&q0, &k0, &v0);
        let h = 1e-6;
        let inputs = [q0.clone(), k0.clone(), v0.clone()];
        for which in 0..3 {
            for idx in 0..12 {
                let (r, c) = (idx / 2, idx % 2);
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[which][[r, c]] += h;
                minus[which][[r, c]] -= h;
                let fp = eval(&plus[0], &plus[1], &plus[2]).0;
                let fm = eval(&minus[0], &minus[1], &minus[2]).0;
                let num = (fp - fm) / (2.0 * h);
                let an = analytic[which][[r, c]];
                assert!((num - an).abs() < 1e-7, "input {which} ({r},{c}): {an} vs {num}");
            }
        }
    }

    #[test]
    fn reshaping_ops_are_adjoint_pairs() {
        let a0 = array![[1.0, 2.0], [3.0, 4.0]];
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let rep = g.repeat_rows(a, 3);
        assert_eq!(g.value(rep).row(2), a0.row(0));
        assert_eq!(g.value(rep).row(3), a0.row(1));
        let til = g.tile_rows(a, 2);
        assert_eq!(g.value(til).row(2), a0.row(0));
        let gs = g.group_sum(rep, 3).unwrap();
        assert_eq!(g.value(gs), &(&a0 * 3.0));
        let fl = g.flatten(a);
        assert_eq!(g.value(fl).column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let sel = g.select_rows(til, 1, 2).unwrap();
        assert_eq!(g.value(sel), &array![[3.0, 4.0], [1.0, 2.0]]);

        let w = g.constant(array![[1.0], [10.0], [100.0], [1000.0]]);
        let fw = g.mul(fl, w).unwrap();
        let l = g.sum_all(fw);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 10.0], [100.0, 1000.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(array![[2.0]]);
        let d = g.detach(a);
        let p = g.mul(a, d).unwrap();
        let l = g.sum_all(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 2.0);
    }
}
