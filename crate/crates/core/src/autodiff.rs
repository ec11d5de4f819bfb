//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward step appends a node holding its operation, shape, and
//! value; `backward` replays the tape once in reverse, scattering adjoints.
//! Only the operations the encoder, recurrent unit, and losses need are
//! implemented, and the three losses are fused nodes so their clamping and
//! pair enumeration stay in one place. Scalars are length-1 vectors;
//! matrices appear only as leaves (parameters) consumed by `matvec` and
//! `row`.

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Row of a matrix leaf.
    Row { of: usize, row: usize },
    /// Matrix leaf times vector.
    MatVec { m: usize, v: usize },
    Add { a: usize, b: usize },
    SumList { terms: Vec<usize> },
    /// Vector times scalar node.
    Scale { v: usize, s: usize },
    ScaleConst { v: usize, c: f64 },
    /// Elementwise product.
    Mul { a: usize, b: usize },
    OneMinus { v: usize },
    Relu { v: usize },
    Sigmoid { v: usize },
    Tanh { v: usize },
    Dot { a: usize, b: usize },
    StackScalars { parts: Vec<usize> },
    Index { v: usize, at: usize },
    Softmax { v: usize },
    Concat { parts: Vec<usize> },
    /// Elementwise product with a constant mask (dropout).
    MulMask { v: usize, mask: Vec<f64> },
    /// Summed binary cross-entropy against constant targets.
    Bce { scores: usize, targets: Vec<f64> },
    /// Pairwise hinge between positive and negative targets, divided by
    /// the vector length.
    Margin { scores: usize, targets: Vec<f64> },
    /// sum_ij ddi[i][j] * s_i * s_j over ordered pairs (dense symmetric
    /// matrix, zero diagonal).
    DdiPenalty { scores: usize, ddi: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf_vec(&mut self, data: Vec<f64>) -> NodeId {
        let rows = data.len();
        self.push(rows, 1, data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.leaf_vec(vec![0.0; len])
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Adjoint of a node after `backward`. Empty slice before any backward
    /// pass.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    fn vec_len(&self, id: NodeId) -> usize {
        let n = &self.nodes[id.0];
        debug_assert_eq!(n.cols, 1, "expected a vector node");
        n.rows
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn row(&mut self, of: NodeId, row: usize) -> NodeId {
        let (rows, cols) = (self.nodes[of.0].rows, self.nodes[of.0].cols);
        assert!(matches!(self.nodes[of.0].op, Op::Leaf), "row lookup needs a leaf matrix");
        assert!(row < rows, "row {row} out of {rows}");
        let value = self.nodes[of.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(cols, 1, value, Op::Row { of: of.0, row })
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (rows, cols) = (self.nodes[m.0].rows, self.nodes[m.0].cols);
        assert!(matches!(self.nodes[m.0].op, Op::Leaf), "matvec needs a leaf matrix");
        assert_eq!(cols, self.vec_len(v), "matvec shape mismatch");
        let x = &self.nodes[v.0].value;
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.nodes[m.0].value[i * cols..(i + 1) * cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        self.push(rows, 1, out, Op::MatVec { m: m.0, v: v.0 })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.vec_len(a);
        assert_eq!(n, self.vec_len(b), "add shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(n, 1, value, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sum_list(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "sum of nothing");
        let n = self.vec_len(terms[0]);
        let mut value = vec![0.0; n];
        for &t in terms {
            assert_eq!(n, self.vec_len(t), "sum shape mismatch");
            for (acc, x) in value.iter_mut().zip(&self.nodes[t.0].value) {
                *acc += x;
            }
        }
        self.push(n, 1, value, Op::SumList { terms: terms.iter().map(|t| t.0).collect() })
    }

    pub fn scale(&mut self, v: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.vec_len(s), 1, "scale factor must be scalar");
        let c = self.nodes[s.0].value[0];
        let value = self.nodes[v.0].value.iter().map(|x| x * c).collect();
        self.push(self.vec_len(v), 1, value, Op::Scale { v: v.0, s: s.0 })
    }

    pub fn scale_const(&mut self, v: NodeId, c: f64) -> NodeId {
        let value = self.nodes[v.0].value.iter().map(|x| x * c).collect();
        self.push(self.vec_len(v), 1, value, Op::ScaleConst { v: v.0, c })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.vec_len(a);
        assert_eq!(n, self.vec_len(b), "mul shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(n, 1, value, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn one_minus(&mut self, v: NodeId) -> NodeId {
        let value = self.nodes[v.0].value.iter().map(|x| 1.0 - x).collect();
        self.push(self.vec_len(v), 1, value, Op::OneMinus { v: v.0 })
    }

    pub fn relu(&mut self, v: NodeId) -> NodeId {
        // NaN must survive rectification (f64::max would eat it), otherwise
        // a diverged upstream value comes out of the head looking healthy.
        let value = self
            .nodes[v.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
            .collect();
        self.push(self.vec_len(v), 1, value, Op::Relu { v: v.0 })
    }

    pub fn sigmoid_node(&mut self, v: NodeId) -> NodeId {
        let value = self.nodes[v.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(self.vec_len(v), 1, value, Op::Sigmoid { v: v.0 })
    }

    pub fn tanh(&mut self, v: NodeId) -> NodeId {
        let value = self.nodes[v.0].value.iter().map(|x| x.tanh()).collect();
        self.push(self.vec_len(v), 1, value, Op::Tanh { v: v.0 })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.vec_len(a);
        assert_eq!(n, self.vec_len(b), "dot shape mismatch");
        let value: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(1, 1, vec![value], Op::Dot { a: a.0, b: b.0 })
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let value = parts
            .iter()
            .map(|&p| {
                debug_assert_eq!(self.vec_len(p), 1);
                self.nodes[p.0].value[0]
            })
            .collect();
        self.push(parts.len(), 1, value, Op::StackScalars { parts: parts.iter().map(|p| p.0).collect() })
    }

    pub fn index(&mut self, v: NodeId, at: usize) -> NodeId {
        assert!(at < self.vec_len(v), "index out of range");
        let value = vec![self.nodes[v.0].value[at]];
        self.push(1, 1, value, Op::Index { v: v.0, at })
    }

    /// Numerically stable softmax over a vector node.
    pub fn softmax(&mut self, v: NodeId) -> NodeId {
        let x = &self.nodes[v.0].value;
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&e| (e - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = exps.into_iter().map(|e| e / z).collect();
        self.push(self.vec_len(v), 1, value, Op::Softmax { v: v.0 })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for &p in parts {
            self.vec_len(p);
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = value.len();
        self.push(n, 1, value, Op::Concat { parts: parts.iter().map(|p| p.0).collect() })
    }

    pub fn mul_mask(&mut self, v: NodeId, mask: Vec<f64>) -> NodeId {
        let n = self.vec_len(v);
        assert_eq!(n, mask.len(), "mask shape mismatch");
        let value = self.nodes[v.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push(n, 1, value, Op::MulMask { v: v.0, mask })
    }

    /// Summed binary cross-entropy, scores clamped away from 0 and 1.
    pub fn bce_loss(&mut self, scores: NodeId, targets: &[f64]) -> NodeId {
        let n = self.vec_len(scores);
        assert_eq!(n, targets.len(), "target shape mismatch");
        let mut total = 0.0;
        for (&s, &t) in self.nodes[scores.0].value.iter().zip(targets) {
            let s = s.clamp(CLAMP, 1.0 - CLAMP);
            total -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
        }
        self.push(1, 1, vec![total], Op::Bce { scores: scores.0, targets: targets.to_vec() })
    }

    /// Multi-label margin: sum over (positive, negative) pairs of
    /// max(0, 1 - (s_pos - s_neg)), divided by the vector length.
    pub fn margin_loss(&mut self, scores: NodeId, targets: &[f64]) -> NodeId {
        let n = self.vec_len(scores);
        assert_eq!(n, targets.len(), "target shape mismatch");
        let s = &self.nodes[scores.0].value;
        let mut total = 0.0;
        for (i, &ti) in targets.iter().enumerate() {
            if ti < 0.5 {
                continue;
            }
            for (j, &tj) in targets.iter().enumerate() {
                if tj < 0.5 {
                    total += (1.0 - (s[i] - s[j])).max(0.0);
                }
            }
        }
        let value = total / n as f64;
        self.push(1, 1, vec![value], Op::Margin { scores: scores.0, targets: targets.to_vec() })
    }

    /// Interaction penalty over raw scores: sum over ordered pairs of
    /// ddi[i][j] * s_i * s_j.
    pub fn ddi_loss(&mut self, scores: NodeId, ddi: &[f64]) -> NodeId {
        let n = self.vec_len(scores);
        assert_eq!(n * n, ddi.len(), "interaction matrix shape mismatch");
        let s = &self.nodes[scores.0].value;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += ddi[i * n + j] * s[i] * s[j];
            }
        }
        self.push(1, 1, vec![total], Op::DdiPenalty { scores: scores.0, ddi: ddi.to_vec() })
    }

    /// Adjoint of `root` (a scalar node) with respect to every node.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[root.0][0] = 1.0;
        for idx in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut self.grads[idx]);
            if g.iter().all(|&x| x == 0.0) {
                self.grads[idx] = g;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Row { of, row } => {
                    let cols = self.nodes[*of].cols;
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*of][row * cols + k] += gk;
                    }
                }
                Op::MatVec { m, v } => {
                    let cols = self.nodes[*m].cols;
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..cols {
                            self.grads[*m][i * cols + j] += gi * self.nodes[*v].value[j];
                            self.grads[*v][j] += gi * self.nodes[*m].value[i * cols + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*a][k] += gk;
                        self.grads[*b][k] += gk;
                    }
                }
                Op::SumList { terms } => {
                    for &t in terms {
                        for (k, gk) in g.iter().enumerate() {
                            self.grads[t][k] += gk;
                        }
                    }
                }
                Op::Scale { v, s } => {
                    let c = self.nodes[*s].value[0];
                    let mut ds = 0.0;
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*v][k] += gk * c;
                        ds += gk * self.nodes[*v].value[k];
                    }
                    self.grads[*s][0] += ds;
                }
                Op::ScaleConst { v, c } => {
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*v][k] += gk * c;
                    }
                }
                Op::Mul { a, b } => {
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*a][k] += gk * self.nodes[*b].value[k];
                        self.grads[*b][k] += gk * self.nodes[*a].value[k];
                    }
                }
                Op::OneMinus { v } => {
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*v][k] -= gk;
                    }
                }
                Op::Relu { v } => {
                    for (k, gk) in g.iter().enumerate() {
                        if self.nodes[*v].value[k] > 0.0 {
                            self.grads[*v][k] += gk;
                        }
                    }
                }
                Op::Sigmoid { v } => {
                    for (k, gk) in g.iter().enumerate() {
                        let y = self.nodes[idx].value[k];
                        self.grads[*v][k] += gk * y * (1.0 - y);
                    }
                }
                Op::Tanh { v } => {
                    for (k, gk) in g.iter().enumerate() {
                        let y = self.nodes[idx].value[k];
                        self.grads[*v][k] += gk * (1.0 - y * y);
                    }
                }
                Op::Dot { a, b } => {
                    let gs = g[0];
                    for k in 0..self.nodes[*a].value.len() {
                        self.grads[*a][k] += gs * self.nodes[*b].value[k];
                        self.grads[*b][k] += gs * self.nodes[*a].value[k];
                    }
                }
                Op::StackScalars { parts } => {
                    for (k, &p) in parts.iter().enumerate() {
                        self.grads[p][0] += g[k];
                    }
                }
                Op::Index { v, at } => {
                    self.grads[*v][*at] += g[0];
                }
                Op::Softmax { v } => {
                    let y = &self.nodes[idx].value;
                    let inner: f64 = g.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*v][k] += y[k] * (gk - inner);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        for k in 0..len {
                            self.grads[p][k] += g[offset + k];
                        }
                        offset += len;
                    }
                }
                Op::MulMask { v, mask } => {
                    for (k, gk) in g.iter().enumerate() {
                        self.grads[*v][k] += gk * mask[k];
                    }
                }
                Op::Bce { scores, targets } => {
                    let gs = g[0];
                    for (k, &t) in targets.iter().enumerate() {
                        let s = self.nodes[*scores].value[k];
                        if !(CLAMP..=1.0 - CLAMP).contains(&s) {
                            continue;
                        }
                        self.grads[*scores][k] += gs * (-(t / s) + (1.0 - t) / (1.0 - s));
                    }
                }
                Op::Margin { scores, targets } => {
                    let gs = g[0] / targets.len() as f64;
                    let s = &self.nodes[*scores].value;
                    for (i, &ti) in targets.iter().enumerate() {
                        if ti < 0.5 {
                            continue;
                        }
                        for (j, &tj) in targets.iter().enumerate() {
                            if tj < 0.5 && 1.0 - (s[i] - s[j]) > 0.0 {
                                self.grads[*scores][i] -= gs;
                                self.grads[*scores][j] += gs;
                            }
                        }
                    }
                }
                Op::DdiPenalty { scores, ddi } => {
                    let gs = g[0];
                    let n = self.nodes[*scores].value.len();
                    let s = &self.nodes[*scores].value;
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += (ddi[i * n + j] + ddi[j * n + i]) * s[j];
                        }
                        self.grads[*scores][i] += gs * acc;
                    }
                }
            }
            self.grads[idx] = g;
        }
    }
}

/// Finite-difference gradient checking used by the numeric test suites.
pub mod check {
    use super::{NodeId, Tape};

    pub const PERTURBATION: f64 = 1e-4;
    pub const TOLERANCE: f64 = 1e-3;

    /// A parameter block: shape plus flat data.
    #[derive(Clone)]
    pub struct Block {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl Block {
        pub fn vector(data: &[f64]) -> Block {
            Block { rows: data.len(), cols: 1, data: data.to_vec() }
        }

        pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Block {
            assert_eq!(rows * cols, data.len());
            Block { rows, cols, data: data.to_vec() }
        }
    }

    fn forward(blocks: &[Block], build: &impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> (Tape, Vec<NodeId>, NodeId) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = blocks
            .iter()
            .map(|b| tape.leaf_matrix(b.rows, b.cols, b.data.clone()))
            .collect();
        let root = build(&mut tape, &leaves);
        (tape, leaves, root)
    }

    /// Checks the analytic gradient of `build`'s scalar output against
    /// central finite differences at every coordinate of every block.
    pub fn assert_grads_match(blocks: &[Block], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let (mut tape, leaves, root) = forward(blocks, &build);
        tape.backward(root);
        let analytic: Vec<Vec<f64>> =
            leaves.iter().map(|&l| tape.grad(l).to_vec()).collect();
        for (bi, block) in blocks.iter().enumerate() {
            for k in 0..block.data.len() {
                let mut plus = blocks.to_vec();
                plus[bi].data[k] += PERTURBATION;
                let mut minus = blocks.to_vec();
                minus[bi].data[k] -= PERTURBATION;
                let (tp, _, rp) = forward(&plus, &build);
                let (tm, _, rm) = forward(&minus, &build);
                let numeric = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * PERTURBATION);
                let a = analytic[bi][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    rel <= TOLERANCE,
                    "block {bi} entry {k}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }
}
