use super::kernels::{gelu, gelu_grad, gemm, inverse_perm, permute, softmax_rows};
use super::{numel, Tensor};
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    MulScalar { a: Var, s: f64 },
    Exp { a: Var },
    LogClamped { a: Var, eps: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxTemp { a: Var, tau: f64 },
    SliceRows { a: Var, start: usize, row_len: usize },
    PrependToken { x: Var, token: Var, batch: usize, tokens: usize, dim: usize },
    TakeToken { x: Var, index: usize, batch: usize, tokens: usize, dim: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed ops. Each node's operands precede it.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Usage(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        match self.nodes[v.0].value.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::Numerical(format!(
                "{context}: non-finite value at flat index {i}"
            ))),
            None => Ok(()),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(dim_err(format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n, false, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err(format!("batch_matmul inner {k} vs {kb}")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for t in 0..batch {
            gemm(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            ng,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        (self.shape(a).to_vec(), out, self.ng(&[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (s, v, ng) = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(s, v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (s, v, ng) = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(s, v, Op::Sub { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (s, v, ng) = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(s, v, Op::Mul { a, b }, ng))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, row, position table).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!("add_broadcast {sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len();
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let s = sa.to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, out, Op::AddBroadcast { a, b }, ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(s, out, op, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::MulScalar { a, s }, |x| x * s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp { a }, f64::exp)
    }

    /// `log(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("log_clamped eps must be > 0, got {eps}")));
        }
        Ok(self.unary(a, Op::LogClamped { a, eps }, |x| x.max(eps).ln()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu { a }, gelu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Mean { a }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err(format!("transpose needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let (out, _) = permute(self.value(a), &[rows, cols], &[1, 0]);
        let ng = self.ng(&[a]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape { a }, ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(format!("permute {perm:?} of {s:?}")));
        }
        let (out, shape) = permute(self.value(a), s, perm);
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| dim_err("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(format!(
                "layer_norm gamma {:?} beta {:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let s = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(s, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Temperature softmax over the last axis.
    pub fn softmax_temp(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
        }
        let k = *self.shape(a).last().ok_or_else(|| dim_err("softmax on scalar".into()))?;
        if k < 2 {
            return Err(dim_err(format!("softmax needs at least 2 classes, got {k}")));
        }
        let out = softmax_rows(self.value(a), k, tau);
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(s, out, Op::SoftmaxTemp { a, tau }, ng))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(dim_err(format!("slice_rows {start}..{} of {s:?}", start + len)));
        }
        let row_len: usize = s[1..].iter().product();
        let out = self.value(a)[start * row_len..(start + len) * row_len].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::SliceRows { a, start, row_len }, ng))
    }

    /// `[B,T,D]` with a shared `[D]` token inserted at position 0 → `[B,T+1,D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            return Err(dim_err(format!("prepend_token {s:?} with {:?}", self.shape(token))));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let (xv, tv) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity(batch * (tokens + 1) * dim);
        for b in 0..batch {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[b * tokens * dim..(b + 1) * tokens * dim]);
        }
        let ng = self.ng(&[x, token]);
        Ok(self.push(
            vec![batch, tokens + 1, dim],
            out,
            Op::PrependToken { x, token, batch, tokens, dim },
            ng,
        ))
    }

    /// Token `index` of every sequence: `[B,T,D]` → `[B,D]`.
    pub fn take_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(dim_err(format!("take_token {index} of {s:?}")));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let o = (b * tokens + index) * dim;
            out.extend_from_slice(&xv[o..o + dim]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![batch, dim], out, Op::TakeToken { x, index, batch, tokens, dim }, ng))
    }

    /// Reverse pass from a scalar. Only leaves that require grad keep their
    /// gradients in the result; intermediates are freed as the walk proceeds.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // keep only leaf gradients
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let need = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if need(*a) {
                    let ga = acc!(*a);
                    gemm(g, &nodes[b.0].value, ga, *m, *n, *k, false, true);
                }
                if need(*b) {
                    let gb = acc!(*b);
                    gemm(&nodes[a.0].value, g, gb, *k, *m, *n, true, false);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb, so) = (m * k, k * n, m * n);
                if need(*a) {
                    let ga = acc!(*a);
                    for t in 0..*batch {
                        let (gt, bt) = (&g[t * so..(t + 1) * so], &bv[t * sb..(t + 1) * sb]);
                        let out = &mut ga[t * sa..(t + 1) * sa];
                        if *trans_b {
                            gemm(gt, bt, out, *m, *n, *k, false, false);
                        } else {
                            gemm(gt, bt, out, *m, *n, *k, false, true);
                        }
                    }
                }
                if need(*b) {
                    let gb = acc!(*b);
                    for t in 0..*batch {
                        let (gt, at) = (&g[t * so..(t + 1) * so], &av[t * sa..(t + 1) * sa]);
                        let out = &mut gb[t * sb..(t + 1) * sb];
                        if *trans_b {
                            // d(b)[n×k] = gᵀ[n×m] · a[m×k]
                            gemm(gt, at, out, *n, *m, *k, true, false);
                        } else {
                            // d(b)[k×n] = aᵀ[k×m] · g[m×n]
                            gemm(at, gt, out, *k, *m, *n, true, false);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if need(*a) {
                    add_into(acc!(*a), g);
                }
                if need(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::Sub { a, b } => {
                if need(*a) {
                    add_into(acc!(*a), g);
                }
                if need(*b) {
                    for (o, &x) in acc!(*b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if need(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if need(*a) {
                    add_into(acc!(*a), g);
                }
                if need(*b) {
                    let gb = acc!(*b);
                    let inner = gb.len();
                    for chunk in g.chunks_exact(inner) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::MulScalar { a, s } => {
                for (o, &x) in acc!(*a).iter_mut().zip(g) {
                    *o += x * s;
                }
            }
            Op::Exp { a } => {
                for ((o, &x), &y) in acc!(*a).iter_mut().zip(g).zip(&node.value) {
                    *o += x * y;
                }
            }
            Op::LogClamped { a, eps } => {
                let av = &nodes[a.0].value;
                for ((o, &x), &v) in acc!(*a).iter_mut().zip(g).zip(av) {
                    if v > *eps {
                        *o += x / v;
                    }
                }
            }
            Op::Relu { a } => {
                let av = &nodes[a.0].value;
                for ((o, &x), &v) in acc!(*a).iter_mut().zip(g).zip(av) {
                    if v > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &nodes[a.0].value;
                for ((o, &x), &v) in acc!(*a).iter_mut().zip(g).zip(av) {
                    *o += x * gelu_grad(v);
                }
            }
            Op::Sum { a } => {
                let s = g[0];
                for o in acc!(*a).iter_mut() {
                    *o += s;
                }
            }
            Op::Mean { a } => {
                let ga = acc!(*a);
                let s = g[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += s;
                }
            }
            Op::Transpose { a, rows, cols } => {
                let (back, _) = permute(g, &[*cols, *rows], &[1, 0]);
                add_into(acc!(*a), &back);
            }
            Op::Reshape { a } => add_into(acc!(*a), g),
            Op::Permute { a, perm } => {
                let (back, _) = permute(g, &node.shape, &inverse_perm(perm));
                add_into(acc!(*a), &back);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.shape[node.shape.len() - 1];
                let gv = &nodes[gamma.0].value;
                if need(*gamma) {
                    let gg = acc!(*gamma);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if need(*beta) {
                    let gb = acc!(*beta);
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                }
                if need(*x) {
                    let gx = acc!(*x);
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxTemp { a, tau } => {
                let k = node.shape[node.shape.len() - 1];
                let ga = acc!(*a);
                for ((yr, gr), out) in node
                    .value
                    .chunks_exact(k)
                    .zip(g.chunks_exact(k))
                    .zip(ga.chunks_exact_mut(k))
                {
                    let dotp: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                    for j in 0..k {
                        out[j] += yr[j] * (gr[j] - dotp) / tau;
                    }
                }
            }
            Op::SliceRows { a, start, row_len } => {
                let ga = acc!(*a);
                add_into(&mut ga[start * row_len..start * row_len + g.len()], g);
            }
            Op::PrependToken { x, token, batch, tokens, dim } => {
                let stride = (tokens + 1) * dim;
                if need(*token) {
                    let gt = acc!(*token);
                    for b in 0..*batch {
                        add_into(gt, &g[b * stride..b * stride + dim]);
                    }
                }
                if need(*x) {
                    let gx = acc!(*x);
                    for b in 0..*batch {
                        add_into(
                            &mut gx[b * tokens * dim..(b + 1) * tokens * dim],
                            &g[b * stride + dim..(b + 1) * stride],
                        );
                    }
                }
            }
            Op::TakeToken { x, index, batch, tokens, dim } => {
                let gx = acc!(*x);
                for b in 0..*batch {
                    let o = (b * tokens + index) * dim;
                    add_into(&mut gx[o..o + dim], &g[b * dim..(b + 1) * dim]);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
