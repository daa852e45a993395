//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass: leaves are registered, ops
//! append nodes in execution order, and [`Tape::backward`] replays the nodes
//! in exact reverse order, accumulating vector-Jacobian products into the
//! gradient slot of every node that needs one. Single-owner, single-threaded.

use crate::error::{Error, Result};
use crate::tensor::{debug_check_finite, kernels, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a `[m×k]` · b `[k×n]`
    Matmul { a: VarId, b: VarId },
    /// Elementwise add; `b` may be `[1×n]` against `[m×n]` (and vice versa).
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    ScalarMul { a: VarId, c: f32 },
    Relu { a: VarId },
    Log { a: VarId },
    Exp { a: VarId },
    Mean { a: VarId },
    Sum { a: VarId },
    SoftmaxRows { a: VarId },
    CrossEntropy { logits: VarId, labels: Vec<usize> },
    /// Teacher rows are plain data: gradients cannot flow into them.
    SoftCrossEntropy { logits: VarId, targets: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> VarId {
        debug_check_finite(&data, "tape op");
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf; gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Register raw data as a leaf.
    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, needs_grad)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: VarId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward pass, if any flowed to `id`.
    pub fn grad(&self, id: VarId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Detached copy of a recorded value (no tape participation).
    pub fn value(&self, id: VarId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node data matches node shape")
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn numel(&self, id: VarId) -> usize {
        self.nodes[id.0].data.len()
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, ng))
    }

    fn broadcast_shapes(&self, a: VarId, b: VarId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // Broadcasting is limited to a leading-1 extent: [1,n] against [m,n].
        if sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1] {
            if sa[0] == 1 {
                return Ok(sb.to_vec());
            }
            if sb[0] == 1 {
                return Ok(sa.to_vec());
            }
        }
        Err(Error::dim(format!("{what}: incompatible shapes {sa:?}, {sb:?}")))
    }

    fn binary_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        shape: Vec<usize>,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> VarId {
        let numel: usize = shape.iter().product();
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(f(da[i % da.len()], db[i % db.len()]));
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(op, shape, out, ng)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.broadcast_shapes(a, b, "add")?;
        Ok(self.binary_elementwise(a, b, shape, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.broadcast_shapes(a, b, "sub")?;
        Ok(self.binary_elementwise(a, b, shape, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f32) -> VarId {
        let out: Vec<f32> = self.data(a).iter().map(|&v| c * v).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::ScalarMul { a, c }, shape, out, ng)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = kernels::relu(self.data(a));
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Relu { a }, shape, out, ng)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let out: Vec<f32> = self.data(a).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Log { a }, shape, out, ng)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let out: Vec<f32> = self.data(a).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Exp { a }, shape, out, ng)
    }

    /// Mean over all elements, as a `[1]` scalar.
    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.numel(a);
        let v = (kernels::sum_f64(self.data(a)) / n as f64) as f32;
        let ng = self.needs(a);
        self.push(Op::Mean { a }, vec![1], vec![v], ng)
    }

    /// Sum over all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = kernels::sum_f64(self.data(a)) as f32;
        let ng = self.needs(a);
        self.push(Op::Sum { a }, vec![1], vec![v], ng)
    }

    /// Softmax over the last axis of a rank-2 value.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("softmax_rows on shape {shape:?}")));
        }
        let out = kernels::softmax_rows(self.data(a), shape[0], shape[1]);
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, shape, out, ng))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
        }
        let lse = kernels::log_sum_exp_rows(self.data(logits), b, c);
        let mut acc = 0f64;
        for (r, &y) in labels.iter().enumerate() {
            acc += (lse[r] - self.data(logits)[r * c + y]) as f64;
        }
        let v = (acc / b as f64) as f32;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![v],
            ng,
        ))
    }

    /// Mean over the batch of `−Σ_c target_c · log softmax(logits)_c`.
    ///
    /// Targets are plain probability rows (already detached); each row must
    /// sum to 1 within 1e-4.
    pub fn soft_cross_entropy(&mut self, logits: VarId, targets: &Tensor) -> Result<VarId> {
        let shape = self.shape(logits).to_vec();
        if targets.shape() != shape {
            return Err(Error::dim(format!(
                "soft_cross_entropy: logits {shape:?} vs targets {:?}",
                targets.shape()
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        for r in 0..b {
            let s = kernels::sum_f64(targets.row(r));
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::domain(format!(
                    "target row {r} sums to {s}, expected 1 within 1e-4"
                )));
            }
        }
        let lse = kernels::log_sum_exp_rows(self.data(logits), b, c);
        let mut acc = 0f64;
        for (r, &row_lse) in lse.iter().enumerate() {
            let zrow = &self.data(logits)[r * c..(r + 1) * c];
            let trow = targets.row(r);
            let mut row_acc = 0f64;
            for (&t, &z) in trow.iter().zip(zrow) {
                row_acc += t as f64 * (row_lse - z) as f64;
            }
            acc += row_acc;
        }
        let v = (acc / b as f64) as f32;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
            },
            vec![1],
            vec![v],
            ng,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every `needs_grad`
    /// node reachable from `loss` are accumulated (`+=` on repeated use).
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.seed_grad(loss, 1.0);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx);
        }
        Ok(())
    }

    fn seed_grad(&mut self, id: VarId, v: f32) {
        let n = self.numel(id);
        self.nodes[id.0].grad = Some(vec![v; n]);
    }

    fn add_grad(&mut self, id: VarId, g: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].data.len();
        let slot = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        debug_assert_eq!(slot.len(), g.len());
        for (dst, src) in slot.iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Add a gradient that may need reducing over a broadcast leading-1 axis.
    fn add_grad_reduced(&mut self, id: VarId, g: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].data.len();
        if numel == g.len() {
            self.add_grad(id, g);
            return;
        }
        // g is [m×n], target is [1×n]: sum over rows in f64.
        let n = numel;
        let mut reduced = vec![0f64; n];
        for (i, &v) in g.iter().enumerate() {
            reduced[i % n] += v as f64;
        }
        let reduced: Vec<f32> = reduced.iter().map(|&v| v as f32).collect();
        self.add_grad(id, &reduced);
    }

    fn backward_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let g = self.nodes[idx].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let da = kernels::matmul_nt(&g, self.data(b), m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_tn(self.data(a), &g, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad_reduced(a, &g);
                self.add_grad_reduced(b, &g);
            }
            Op::Sub { a, b } => {
                self.add_grad_reduced(a, &g);
                let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                self.add_grad_reduced(b, &neg);
            }
            Op::ScalarMul { a, c } => {
                let da: Vec<f32> = g.iter().map(|&v| c * v).collect();
                self.add_grad(a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f32> = self.data(a)
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Log { a } => {
                let da: Vec<f32> = self.data(a).iter().zip(&g).map(|(&x, &gv)| gv / x).collect();
                self.add_grad(a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<f32> = self.nodes[idx]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(&ex, &gv)| gv * ex)
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Mean { a } => {
                let n = self.numel(a);
                let gv = g[0] / n as f32;
                let da = vec![gv; n];
                self.add_grad(a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.numel(a)];
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows { a } => {
                let shape = self.shape(a).to_vec();
                let (rows, cols) = (shape[0], shape[1]);
                let p = &self.nodes[idx].data;
                let mut da = vec![0f32; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0f64;
                    for c in 0..cols {
                        dot += (g[base + c] * p[base + c]) as f64;
                    }
                    for c in 0..cols {
                        da[base + c] = p[base + c] * (g[base + c] - dot as f32);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::CrossEntropy { logits, labels } => {
                let shape = self.shape(logits).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let p = kernels::softmax_rows(self.data(logits), b, c);
                let scale = g[0] / b as f32;
                let mut dz = p;
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * c + y] -= 1.0;
                }
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                self.add_grad(logits, &dz);
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let shape = self.shape(logits).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let p = kernels::softmax_rows(self.data(logits), b, c);
                let scale = g[0] / b as f32;
                let mut dz = vec![0f32; b * c];
                for r in 0..b {
                    let base = r * c;
                    let s = kernels::sum_f64(&targets[base..base + c]) as f32;
                    for cc in 0..c {
                        dz[base + cc] = (p[base + cc] * s - targets[base + cc]) * scale;
                    }
                }
                self.add_grad(logits, &dz);
            }
        }
    }
}
