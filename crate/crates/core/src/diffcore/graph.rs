use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    SliceCols { src: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Conv1d { input: NodeId, weight: NodeId, bias: NodeId },
    MeanLast(NodeId),
    Reshape { src: NodeId, shape: Vec<usize> },
    Dropout { src: NodeId, p: f64, seed: u64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanLast(_) => "mean_last",
            Op::Reshape { .. } => "reshape",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::MeanLast(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::Reshape { src, .. } | Op::Dropout { src, .. } => {
                vec![*src]
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::Conv1d {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    /// Dropout keeps its mask here after evaluation.
    aux: Option<Tensor>,
    requires_grad: bool,
}

/// Define-then-run computation graph.
///
/// Nodes are appended in construction order, which is always a valid
/// topological order. [`Graph::forward`] evaluates lazily up to a root and
/// caches every intermediate value; [`Graph::backward`] then walks the tape in
/// reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    training: bool,
}

/// Gradients of a scalar root with respect to nodes and parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, shapes: &[&Tensor]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// Whether `b` can be combined elementwise with `a`: equal shapes, a single
/// element, or a row vector broadcast over the rows of a matrix.
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() == b.shape() || b.len() == 1 {
        return true;
    }
    if a.rank() != 2 {
        return false;
    }
    let cols = a.shape()[1];
    b.len() == cols && (b.shape() == [cols] || b.shape() == [1, cols])
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = b.len();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % n]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Sums a broadcast gradient back down to the shape of `b`.
fn reduce_to(grad: &Tensor, b: &Tensor) -> Tensor {
    if grad.shape() == b.shape() {
        return grad.clone();
    }
    let n = b.len();
    let mut out = vec![0.0; n];
    for (i, g) in grad.data().iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(b.shape().to_vec(), out).expect("shape of b")
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// `a^T * g` for `a: [m,k]`, `g: [m,n]`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    let (ad, gd) = (a.data(), g.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("matmul_tn shape")
}

/// `g * b^T` for `g: [m,n]`, `b: [k,n]`.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    let (gd, bd) = (g.data(), b.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out).expect("matmul_nt shape")
}

fn conv_pad(kernel: usize) -> usize {
    (kernel - 1) / 2
}

fn conv1d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (b, cin, t) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kernel) = (weight.shape()[0], weight.shape()[2]);
    let pad = conv_pad(kernel) as isize;
    let (x, w, bi) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; b * cout * t];
    for n in 0..b {
        for o in 0..cout {
            let orow = &mut out[(n * cout + o) * t..(n * cout + o + 1) * t];
            orow.fill(bi[o]);
            for c in 0..cin {
                let xrow = &x[(n * cin + c) * t..(n * cin + c + 1) * t];
                for j in 0..kernel {
                    let wv = w[(o * cin + c) * kernel + j];
                    let shift = j as isize - pad;
                    for (tt, ov) in orow.iter_mut().enumerate() {
                        let src = tt as isize + shift;
                        if src >= 0 && (src as usize) < t {
                            *ov += wv * xrow[src as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, t], out).expect("conv shape")
}

impl Graph {
    /// A graph in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in training mode: dropout masks are sampled.
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            aux: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Some(value))
    }

    /// Node for parameter `id`. Repeated calls return the same node, so
    /// gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = self.push(Op::Param, Some(p.value.clone()));
        self.nodes[node.0].requires_grad = p.trainable;
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    /// Elementwise product (with row broadcasting of `b`).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor), None)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c), None)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a), None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a), None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a), None)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a), None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), None)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), None)
    }

    /// Row sums of a matrix: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a), None)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { src, start, end }, None)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()), None)
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()), None)
    }

    /// Cross-correlation over the last axis with symmetric zero padding that
    /// keeps the length: `input [B, Cin, T]`, `weight [Cout, Cin, K]`,
    /// `bias [Cout]` gives `[B, Cout, T]`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
            },
            None,
        )
    }

    /// Mean over the last axis: `[B, C, T] -> [B, C]`.
    pub fn mean_last(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanLast(a), None)
    }

    pub fn reshape(&mut self, src: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { src, shape }, None)
    }

    /// Inverted dropout with drop probability `p`. Identity outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, src: NodeId, p: f64, rng: &mut R) -> NodeId {
        if !self.training || p <= 0.0 {
            return src;
        }
        let seed = rng.next_u64();
        self.push(Op::Dropout { src, p, seed }, None)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// One step of a standard four-gate LSTM cell.
    ///
    /// `x: [B, I]`, `h, c: [B, H]`, `w_x: [I, 4H]`, `w_h: [H, 4H]`,
    /// `b: [4H]`. Gate order in the packed weights is input, forget,
    /// candidate, output. Returns `(h', c')`.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        b: NodeId,
        hidden: usize,
    ) -> (NodeId, NodeId) {
        let xw = self.matmul(x, w_x);
        let hw = self.matmul(h, w_h);
        let pre = self.add(xw, hw);
        let gates = self.add(pre, b);
        let i_pre = self.slice_cols(gates, 0, hidden);
        let f_pre = self.slice_cols(gates, hidden, 2 * hidden);
        let g_pre = self.slice_cols(gates, 2 * hidden, 3 * hidden);
        let o_pre = self.slice_cols(gates, 3 * hidden, 4 * hidden);
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c);
        let ig = self.mul(i, g);
        let c_next = self.add(fc, ig);
        let c_act = self.tanh(c_next);
        let h_next = self.mul(o, c_act);
        (h_next, c_next)
    }

    /// Cached value of a node, if it has been evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parents are evaluated before children")
    }

    /// Evaluates every pending node up to and including `root`.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor, DiffError> {
        if root.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(root.0));
        }
        for idx in 0..=root.0 {
            if self.nodes[idx].value.is_some() {
                continue;
            }
            let (value, aux) = self.eval_node(idx)?;
            self.nodes[idx].value = Some(value);
            self.nodes[idx].aux = aux;
        }
        Ok(self.val(root))
    }

    fn eval_node(&self, idx: usize) -> Result<(Tensor, Option<Tensor>), DiffError> {
        let op = &self.nodes[idx].op;
        let name = op.name();
        let out = match op {
            Op::Leaf | Op::Param => unreachable!("leaves carry their value"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(name, &[a, b]));
                }
                matmul(a, b)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if !broadcastable(a, b) {
                    return Err(mismatch(name, &[a, b]));
                }
                match op {
                    Op::Add(..) => zip_broadcast(a, b, |x, y| x + y),
                    Op::Sub(..) => zip_broadcast(a, b, |x, y| x - y),
                    _ => zip_broadcast(a, b, |x, y| x * y),
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.val(*a).map(|x| x * f)
            }
            Op::AddScalar(a, c) => {
                let c = *c;
                self.val(*a).map(|x| x + c)
            }
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Log(a) => self.val(*a).map(f64::ln),
            Op::Square(a) => self.val(*a).map(|x| x * x),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(mismatch(name, &[a]));
                }
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::SumCols(a) => {
                let a = self.val(*a);
                if a.rank() != 2 {
                    return Err(mismatch(name, &[a]));
                }
                let rows = a.shape()[0];
                let data = (0..rows).map(|r| a.row(r).iter().sum()).collect();
                Tensor::new(vec![rows, 1], data)?
            }
            Op::SliceCols { src, start, end } => {
                let a = self.val(*src);
                if a.rank() != 2 || start > end || *end > a.shape()[1] {
                    return Err(mismatch(name, &[a]));
                }
                let rows = a.shape()[0];
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&a.row(r)[*start..*end]);
                }
                Tensor::new(vec![rows, end - start], data)?
            }
            Op::ConcatCols(parts) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let rows = tensors.first().map(|t| t.shape()[0]).unwrap_or(0);
                if tensors.is_empty()
                    || tensors.iter().any(|t| t.rank() != 2 || t.shape()[0] != rows)
                {
                    return Err(mismatch(name, &tensors));
                }
                let cols: usize = tensors.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new(vec![rows, cols], data)?
            }
            Op::ConcatRows(parts) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let cols = tensors.first().map(|t| t.shape().get(1).copied().unwrap_or(0));
                let Some(cols) = cols else {
                    return Err(mismatch(name, &tensors));
                };
                if tensors.iter().any(|t| t.rank() != 2 || t.shape()[1] != cols) {
                    return Err(mismatch(name, &tensors));
                }
                let rows: usize = tensors.iter().map(|t| t.shape()[0]).sum();
                let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(vec![rows, cols], data)?
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => {
                let (x, w, b) = (self.val(*input), self.val(*weight), self.val(*bias));
                if x.rank() != 3
                    || w.rank() != 3
                    || w.shape()[1] != x.shape()[1]
                    || w.shape()[2] == 0
                    || b.len() != w.shape()[0]
                {
                    return Err(mismatch(name, &[x, w, b]));
                }
                conv1d(x, w, b)
            }
            Op::MeanLast(a) => {
                let a = self.val(*a);
                if a.rank() != 3 || a.shape()[2] == 0 {
                    return Err(mismatch(name, &[a]));
                }
                let (b, c, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let data = a
                    .data()
                    .chunks(t)
                    .map(|row| row.iter().sum::<f64>() / t as f64)
                    .collect();
                Tensor::new(vec![b, c], data)?
            }
            Op::Reshape { src, shape } => {
                let a = self.val(*src);
                a.clone()
                    .reshaped(shape.clone())
                    .map_err(|_| mismatch(name, &[a]))?
            }
            Op::Dropout { src, p, seed } => {
                let a = self.val(*src);
                let keep = 1.0 - p;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mask_data: Vec<f64> = (0..a.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = Tensor::new(a.shape().to_vec(), mask_data)?;
                let out = zip_broadcast(a, &mask, |x, m| x * m);
                return Ok((out, Some(mask)));
            }
        };
        Ok((out, None))
    }

    /// Reverse-mode pass from a scalar root that has been evaluated.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, DiffError> {
        let root_val = self
            .value(root)
            .ok_or(DiffError::NotEvaluated(root.0))?;
        if root_val.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.value.is_none() {
                return Err(DiffError::NotEvaluated(idx));
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = self
            .param_nodes
            .iter()
            .filter_map(|(pid, nid)| {
                let g = grads.get(nid.0)?.as_ref()?;
                Some((*pid, g.clone()))
            })
            .collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let send = |id: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let out = node.value.as_ref().expect("evaluated");
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    send(*a, matmul_nt(g, self.val(*b)), grads);
                }
                if needs(*b) {
                    send(*b, matmul_tn(self.val(*a), g), grads);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, g.clone(), grads);
                }
                if needs(*b) {
                    send(*b, reduce_to(g, self.val(*b)), grads);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    send(*a, g.clone(), grads);
                }
                if needs(*b) {
                    send(*b, reduce_to(&g.map(|x| -x), self.val(*b)), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    send(*a, zip_broadcast(g, bv, |x, y| x * y), grads);
                }
                if needs(*b) {
                    let full = zip_broadcast(g, av, |x, y| x * y);
                    send(*b, reduce_to(&full, bv), grads);
                }
            }
            Op::Scale(a, f) => {
                if needs(*a) {
                    let f = *f;
                    send(*a, g.map(|x| x * f), grads);
                }
            }
            Op::AddScalar(a, _) => {
                if needs(*a) {
                    send(*a, g.clone(), grads);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    send(*a, zip_broadcast(g, out, |gv, y| gv * (1.0 - y * y)), grads);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    send(*a, zip_broadcast(g, out, |gv, y| gv * y * (1.0 - y)), grads);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    send(*a, zip_broadcast(g, out, |gv, y| gv * y), grads);
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    send(*a, zip_broadcast(g, self.val(*a), |gv, x| gv / x), grads);
                }
            }
            Op::Square(a) => {
                if needs(*a) {
                    send(*a, zip_broadcast(g, self.val(*a), |gv, x| 2.0 * gv * x), grads);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if needs(*a) {
                    let av = self.val(*a);
                    let mut gv = g.data()[0];
                    if matches!(node.op, Op::Mean(_)) {
                        gv /= av.len() as f64;
                    }
                    send(*a, Tensor::filled(av.shape(), gv), grads);
                }
            }
            Op::SumCols(a) => {
                if needs(*a) {
                    let av = self.val(*a);
                    let cols = av.shape()[1];
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v, cols))
                        .collect();
                    send(*a, Tensor::new(av.shape().to_vec(), data).unwrap(), grads);
                }
            }
            Op::SliceCols { src, start, end } => {
                if needs(*src) {
                    let sv = self.val(*src);
                    let (rows, cols) = (sv.shape()[0], sv.shape()[1]);
                    let width = end - start;
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        data[r * cols + start..r * cols + end]
                            .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                    }
                    send(*src, Tensor::new(sv.shape().to_vec(), data).unwrap(), grads);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let w = pv.shape()[1];
                    if needs(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        send(*p, Tensor::new(pv.shape().to_vec(), data).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    if needs(*p) {
                        let slice = g.data()[offset..offset + pv.len()].to_vec();
                        send(*p, Tensor::new(pv.shape().to_vec(), slice).unwrap(), grads);
                    }
                    offset += pv.len();
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let (bsz, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kernel) = (w.shape()[0], w.shape()[2]);
                let pad = conv_pad(kernel) as isize;
                let gd = g.data();
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; cout];
                for n in 0..bsz {
                    for o in 0..cout {
                        let grow = &gd[(n * cout + o) * t..(n * cout + o + 1) * t];
                        db[o] += grow.iter().sum::<f64>();
                        for c in 0..cin {
                            let xoff = (n * cin + c) * t;
                            for j in 0..kernel {
                                let widx = (o * cin + c) * kernel + j;
                                let wv = w.data()[widx];
                                let shift = j as isize - pad;
                                let mut acc = 0.0;
                                for (tt, &gv) in grow.iter().enumerate() {
                                    let src = tt as isize + shift;
                                    if src >= 0 && (src as usize) < t {
                                        let s = xoff + src as usize;
                                        acc += gv * x.data()[s];
                                        dx[s] += gv * wv;
                                    }
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                if needs(*input) {
                    send(*input, Tensor::new(x.shape().to_vec(), dx).unwrap(), grads);
                }
                if needs(*weight) {
                    send(*weight, Tensor::new(w.shape().to_vec(), dw).unwrap(), grads);
                }
                if needs(*bias) {
                    let bshape = self.val(*bias).shape().to_vec();
                    send(*bias, Tensor::new(bshape, db).unwrap(), grads);
                }
            }
            Op::MeanLast(a) => {
                if needs(*a) {
                    let av = self.val(*a);
                    let t = av.shape()[2];
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v / t as f64, t))
                        .collect();
                    send(*a, Tensor::new(av.shape().to_vec(), data).unwrap(), grads);
                }
            }
            Op::Reshape { src, .. } => {
                if needs(*src) {
                    let shape = self.val(*src).shape().to_vec();
                    send(*src, g.clone().reshaped(shape).unwrap(), grads);
                }
            }
            Op::Dropout { src, .. } => {
                if needs(*src) {
                    let mask = node.aux.as_ref().expect("mask stored at forward");
                    send(*src, zip_broadcast(g, mask, |x, m| x * m), grads);
                }
            }
        }
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
