//! Reverse-mode gradient tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] traverses the
//! recorded nodes exactly once in reverse execution order and accumulates
//! gradients into every node reachable from a parameter created with
//! `requires_grad`. Arrays are immutable once written by an op; a tape and
//! its arrays belong to one worker.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: Real },
    AddScalar { a: TensorId },
    Exp { a: TensorId },
    Gelu { a: TensorId },
    SoftmaxRows { a: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    EmbedLookup { table: TensorId, ids: Vec<u32> },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, len: usize },
    SumAll { a: TensorId },
    CrossEntropySum { logits: TensorId, targets: Vec<u32> },
    DropoutMask { a: TensorId, mask: Vec<Real> },
}

/// Saved forward-pass intermediates needed by some backward rules.
#[derive(Debug)]
enum Aux {
    None,
    Ln { xhat: Vec<Real>, inv_std: Vec<Real> },
    Ce { probs: Vec<Real> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    aux: Aux,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// erf-based standard normal CDF.
pub fn norm_cdf(x: Real) -> Real {
    0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real)
}

/// Standard normal density.
pub fn norm_pdf(x: Real) -> Real {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    ((-0.5 * (x as f64) * (x as f64)).exp() * INV_SQRT_2PI) as Real
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. this node. Zero-filled for
    /// parameters the loss never reached.
    pub fn grad(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Aux, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, aux, requires_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    /// Register an input array. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, Aux::None, requires_grad)
    }

    /// Register a constant (no gradient tracking).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, Aux::None, self.rg2(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.at(i, j);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::Transpose { a }, Aux::None, rg)
    }

    fn elementwise2(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{name} operands differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<Real> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, Aux::None, self.rg2(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: Real) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<Real> = va.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Scale { a, c }, Aux::None, rg)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: Real) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<Real> = va.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::AddScalar { a }, Aux::None, rg)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<Real> = va.data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Exp { a }, Aux::None, rg)
    }

    /// Gaussian error linear unit, exact erf form: `x * Phi(x)`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<Real> = va.data().iter().map(|&x| x * norm_cdf(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Gelu { a }, Aux::None, rg)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &va.data()[r * n..(r + 1) * n];
            softmax_into(row, &mut data[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![m, n], data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::SoftmaxRows { a }, Aux::None, rg)
    }

    /// Row-wise layer normalization followed by the affine (gain, bias) map.
    /// The normalized axis must have length >= 2.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: Real,
    ) -> Result<TensorId> {
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        if n < 2 {
            return Err(Error::Contract(format!(
                "layer_norm requires normalized axis length >= 2, got {n}"
            )));
        }
        if vg.len() != n || vb.len() != n {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias length {}/{} does not match width {n}",
                vg.len(),
                vb.len()
            )));
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let rg = self.rg2(x, gain) || self.nodes[bias.0].requires_grad;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, Aux::Ln { xhat, inv_std }, rg))
    }

    /// Row lookup: `table` is [vocab, d], output is [ids.len(), d].
    pub fn embed_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let vt = &self.nodes[table.0].value;
        let (v, d) = (vt.rows(), vt.cols());
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::Input(format!(
                    "token id {id} at position {pos} is outside the embedding table ({v} rows)"
                )));
            }
        }
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&vt.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::EmbedLookup { table, ids: ids.to_vec() }, Aux::None, rg))
    }

    /// Stack parts vertically. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let n = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != n {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    n,
                    v.cols()
                )));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * n);
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
            rg |= self.nodes[p.0].requires_grad;
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, Aux::None, rg))
    }

    /// Stack parts horizontally. All parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != m {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {}",
                    m,
                    v.rows()
                )));
            }
            total_cols += v.cols();
        }
        let mut data = vec![0.0; m * total_cols];
        let mut rg = false;
        let mut col0 = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for r in 0..m {
                data[r * total_cols + col0..r * total_cols + col0 + c]
                    .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
            col0 += c;
            rg |= self.nodes[p.0].requires_grad;
        }
        let value = Tensor::new(vec![m, total_cols], data)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, Aux::None, rg))
    }

    /// Column slice `[.., start..start+len]`.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut data = vec![0.0; m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data()[r * n + start..r * n + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start, len }, Aux::None, rg))
    }

    /// Sum of all elements; result has shape `[1]`.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: Real = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll { a }, Aux::None, rg)
    }

    /// Summed token cross-entropy: `-sum_t log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy_sum(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let vl = &self.nodes[logits.0].value;
        let (m, n) = (vl.rows(), vl.cols());
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy_sum got {} target rows for {} logit rows",
                targets.len(),
                m
            )));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= n {
                return Err(Error::Input(format!(
                    "target id {t} at row {r} is outside vocabulary width {n}"
                )));
            }
            let row = &vl.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<Real>().ln();
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
            loss -= row[t as usize] - lse;
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum { logits, targets: targets.to_vec() },
            Aux::Ce { probs },
            rg,
        ))
    }

    /// Elementwise multiply by a fixed inverted-dropout mask (entries are
    /// either 0 or `1/(1-rate)`), produced by the caller's RNG.
    pub fn dropout_mask(&mut self, a: TensorId, mask: Vec<Real>) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        if mask.len() != va.len() {
            return Err(Error::Shape(format!(
                "dropout mask length {} does not match tensor length {}",
                mask.len(),
                va.len()
            )));
        }
        let data: Vec<Real> = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::DropoutMask { a, mask }, Aux::None, rg))
    }

    /// Largest deviation of any recorded softmax row sum from 1.
    pub fn max_softmax_row_sum_error(&self) -> Real {
        let mut worst: Real = 0.0;
        for node in &self.nodes {
            if let Op::SoftmaxRows { .. } = node.op {
                let v = &node.value;
                let (m, n) = (v.rows(), v.cols());
                for r in 0..m {
                    let s: Real = v.data()[r * n..(r + 1) * n].iter().sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[Real]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi += c;
        }
    }

    /// Reverse traversal from a scalar loss. Populates `grad` on every
    /// reachable node with `requires_grad`; a second call on the same tape
    /// is rejected.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // constant loss: all gradients are zero
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let dy = match self.nodes[idx].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Ops only reference earlier nodes, so this split is safe.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let (m, k) = (va.rows(), va.cols());
                    let n = vb.cols();
                    if self.nodes[a.0].requires_grad {
                        // dA = dC . B^T
                        let mut bt = vec![0.0; k * n];
                        for p in 0..k {
                            for j in 0..n {
                                bt[j * k + p] = vb.at(p, j);
                            }
                        }
                        let mut da = vec![0.0; m * k];
                        matmul_raw(&dy, &bt, m, n, k, &mut da);
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T . dC
                        let mut at = vec![0.0; k * m];
                        for i in 0..m {
                            for p in 0..k {
                                at[p * m + i] = va.at(i, p);
                            }
                        }
                        let mut db = vec![0.0; k * n];
                        matmul_raw(&at, &dy, k, m, n, &mut db);
                        self.add_grad(b, &db);
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let v = &self.nodes[idx].value;
                    let (m, n) = (v.rows(), v.cols()); // output dims
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = dy[i * n + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &dy);
                    self.add_grad(b, &dy);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &dy);
                    let neg: Vec<Real> = dy.iter().map(|&g| -g).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let vb = &self.nodes[b.0].value;
                        let da: Vec<Real> = dy.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let db: Vec<Real> = dy.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let da: Vec<Real> = dy.iter().map(|&g| g * c).collect();
                    self.add_grad(a, &da);
                }
                Op::AddScalar { a } => {
                    let a = *a;
                    self.add_grad(a, &dy);
                }
                Op::Exp { a } => {
                    let a = *a;
                    let y = self.nodes[idx].value.data().to_vec();
                    let da: Vec<Real> = dy.iter().zip(&y).map(|(&g, &v)| g * v).collect();
                    self.add_grad(a, &da);
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let x = self.nodes[a.0].value.data().to_vec();
                    let da: Vec<Real> = dy
                        .iter()
                        .zip(&x)
                        .map(|(&g, &v)| g * (norm_cdf(v) + v * norm_pdf(v)))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let s = self.nodes[idx].value.clone();
                    let (m, n) = (s.rows(), s.cols());
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = &s.data()[r * n..(r + 1) * n];
                        let grow = &dy[r * n..(r + 1) * n];
                        let dot: Real = srow.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                        for j in 0..n {
                            da[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (xhat, inv_std) = match &self.nodes[idx].aux {
                        Aux::Ln { xhat, inv_std } => (xhat.clone(), inv_std.clone()),
                        _ => unreachable!(),
                    };
                    let vg = self.nodes[gain.0].value.clone();
                    let v = &self.nodes[idx].value;
                    let (m, n) = (v.rows(), v.cols());
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; m * n];
                        for r in 0..m {
                            let grow = &dy[r * n..(r + 1) * n];
                            let xrow = &xhat[r * n..(r + 1) * n];
                            let u: Vec<Real> =
                                grow.iter().zip(vg.data()).map(|(&g, &gn)| g * gn).collect();
                            let mean_u: Real = u.iter().sum::<Real>() / n as Real;
                            let mean_ux: Real =
                                u.iter().zip(xrow).map(|(&ui, &xi)| ui * xi).sum::<Real>()
                                    / n as Real;
                            for j in 0..n {
                                dx[r * n + j] = inv_std[r] * (u[j] - mean_u - xrow[j] * mean_ux);
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                    if self.nodes[gain.0].requires_grad {
                        let mut dg = vec![0.0; n];
                        for r in 0..m {
                            for j in 0..n {
                                dg[j] += dy[r * n + j] * xhat[r * n + j];
                            }
                        }
                        self.add_grad(gain, &dg);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; n];
                        for r in 0..m {
                            for j in 0..n {
                                db[j] += dy[r * n + j];
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    if self.nodes[table.0].requires_grad {
                        let d = self.nodes[idx].value.cols();
                        let vlen = self.nodes[table.0].value.len();
                        let mut dt = vec![0.0; vlen];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id as usize * d + j] += dy[r * d + j];
                            }
                        }
                        self.add_grad(table, &dt);
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let n = self.nodes[idx].value.cols();
                    let mut row0 = 0;
                    for p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        let seg = dy[row0 * n..(row0 + pr) * n].to_vec();
                        self.add_grad(p, &seg);
                        row0 += pr;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let v = &self.nodes[idx].value;
                    let (m, total) = (v.rows(), v.cols());
                    let mut col0 = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut seg = vec![0.0; m * pc];
                        for r in 0..m {
                            seg[r * pc..(r + 1) * pc]
                                .copy_from_slice(&dy[r * total + col0..r * total + col0 + pc]);
                        }
                        self.add_grad(p, &seg);
                        col0 += pc;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.rows(), va.cols());
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + len]
                            .copy_from_slice(&dy[r * len..(r + 1) * len]);
                    }
                    self.add_grad(a, &da);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let len = self.nodes[a.0].value.len();
                    let da = vec![dy[0]; len];
                    self.add_grad(a, &da);
                }
                Op::CrossEntropySum { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let probs = match &self.nodes[idx].aux {
                        Aux::Ce { probs } => probs.clone(),
                        _ => unreachable!(),
                    };
                    let n = self.nodes[logits.0].value.cols();
                    let g = dy[0];
                    let mut dl = probs;
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * n + t as usize] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= g;
                    }
                    self.add_grad(logits, &dl);
                }
                Op::DropoutMask { a, mask } => {
                    let a = *a;
                    let da: Vec<Real> = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.add_grad(a, &da);
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one slice into an output slice.
pub fn softmax_into(row: &[Real], out: &mut [Real]) {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<Real>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![0.3, -1.2, 0.7, 0.1], vec![1.4, 0.2, -0.5, 0.9], vec![-0.8, 0.6, 1.1, -0.3]]), true);
        let b_rows = vec![vec![0.5, -0.4], vec![1.2, 0.3], vec![-0.7, 0.8], vec![0.2, -1.1]];
        let b = tape.constant(t2(&b_rows));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let grad = tape.grad(a);
        // d(sum(AB))/dA = ones(3x2) . B^T: row i of grad = column sums of B^T rows = row sums of B
        for r in 0..3 {
            for c in 0..4 {
                let expect: Real = b_rows[c].iter().sum();
                assert!((grad.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![0.0, 0.0]]));
        let s = tape.softmax_rows(a);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(t2(&[vec![1000.0, 0.0]]));
        let s = tape.softmax_rows(b);
        let v = tape.value(s);
        assert!(v.data()[0] > 1.0 - 1e-12 && v.data()[1] < 1e-12);
        assert!(v.all_finite());
    }

    #[test]
    fn softmax_reference_values() {
        // Direct evaluation: e^1, e^2, e^3 normalized.
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0, 3.0]]));
        let s = tape.softmax_rows(a);
        let v = tape.value(s);
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_9, 0.665_240_955_774_821_6];
        for (got, want) in v.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        let sum: Real = v.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gelu_reference_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![0.0, 1.0, -10.0]]));
        let g = tape.gelu(a);
        let v = tape.value(g);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - 0.841_344_746_068_543).abs() < 1e-9);
        assert!(v.data()[2].abs() < 1e-9);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let bias = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());

        // constant vector absorbed by eps
        let c = tape.constant(t2(&[vec![3.0, 3.0]]));
        let out = tape.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // [1,3] with eps=0: mean 2, population std 1
        let x = tape.constant(t2(&[vec![1.0, 3.0]]));
        let out = tape.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(tape.value(out).data(), &[-1.0, 1.0]);

        // gain=0 broadcasts the bias
        let g0 = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b7 = tape.constant(Tensor::new(vec![2], vec![7.0, -2.0]).unwrap());
        let out = tape.layer_norm(x, g0, b7, 0.0).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -2.0]);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let x = tape.constant(t2(&[vec![5.0]]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, -2.0, 3.0]]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_second_pass() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn unreached_parameter_grad_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let y = tape.leaf(t2(&[vec![5.0]]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).data(), &[0.0]);
    }

    #[test]
    fn embed_lookup_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.embed_lookup(table, &[1, 9]).unwrap_err().to_string();
        assert!(err.contains("9") && err.contains("position 1"), "{err}");
    }

    #[test]
    fn embed_lookup_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]), true);
        let e = tape.embed_lookup(table, &[1, 1]).unwrap();
        let loss = tape.sum_all(e);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(&[vec![0.2, -0.4, 1.0], vec![0.0, 0.0, 0.0]]));
        let ce = tape.cross_entropy_sum(logits, &[2, 0]).unwrap();
        let row0: Vec<Real> = vec![0.2, -0.4, 1.0];
        let lse0 = row0.iter().map(|&x| x.exp()).sum::<Real>().ln();
        let expect = -(1.0 - lse0) + -(0.0 - (3.0 as Real).ln());
        assert!((tape.value(ce).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let b = tape.leaf(t2(&[vec![3.0, 4.0]]), true);
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 2]);
        let right = tape.slice_cols(cat, 1, 1).unwrap();
        assert_eq!(tape.value(right).data(), &[2.0, 4.0]);
        let loss = tape.sum_all(right);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[0.0, 1.0]);
        assert_eq!(tape.grad(b).data(), &[0.0, 1.0]);
    }

    #[test]
    fn dropout_mask_scales_and_routes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0, 3.0]]), true);
        let out = tape.dropout_mask(x, vec![2.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 0.0, 6.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 0.0, 2.0]);
    }
}
