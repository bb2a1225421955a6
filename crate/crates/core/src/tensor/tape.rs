//! Recording tape for reverse-mode differentiation.
//!
//! The op set is fixed: exactly what the toy transformer forward needs.
//! Nodes are recorded in topological order (operands always precede their
//! consumers) and backward walks the tape once in reverse. Tapes are
//! single-use and not thread-safe; tensors handed out are immutable.

use std::collections::BTreeMap;

use super::kernels as k;
use super::Tensor;
use crate::error::Error;
use crate::Result;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Parameter name -> gradient tensor of identical shape.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarMul { a: NodeId, s: f64 },
    Transpose { a: NodeId },
    RowSoftmax { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    Silu { a: NodeId },
    Gelu { a: NodeId },
    EmbeddingGather { table: NodeId, ids: Vec<u32> },
    CausalMask { a: NodeId },
    MeanCrossEntropy { logits: NodeId, targets: Vec<u32>, lse: Vec<f64> },
    ColSlice { a: NodeId, start: usize, len: usize },
    ColConcat { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Set for parameter leaves; keys the gradient map.
    param: Option<String>,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value, param: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a constant (non-parameter) leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Record a named parameter leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
            param: Some(name.to_string()),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, ka) = (ta.rows(), ta.cols());
        let (kb, c) = (tb.rows(), tb.cols());
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner dims {ka} vs {kb} (shapes {:?} x {:?})",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = k::matmul(ta.data(), tb.data(), r, ka, c);
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::ScalarMul { a, s }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let value = Tensor::new(vec![c, r], k::transpose(ta.data(), r, c)).expect("transpose");
        self.push(Op::Transpose { a }, value)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        k::softmax_rows_inplace(&mut data, r, c);
        let value = Tensor::new(vec![r, c], data).expect("softmax");
        self.push(Op::RowSoftmax { a }, value)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.numel() != c {
            return Err(Error::shape(format!(
                "rms_norm gain len {} vs cols {}",
                tg.numel(),
                c
            )));
        }
        let (y, inv_rms) = k::rms_norm(tx.data(), tg.data(), r, c);
        let value = Tensor::new(vec![r, c], y)?;
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, value))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| k::silu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("silu");
        self.push(Op::Silu { a }, value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| k::gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("gelu");
        self.push(Op::Gelu { a }, value)
    }

    /// Gather rows of `table` (vocab x d) by token id.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Input(format!("token id {id} >= vocab {v}")));
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::EmbeddingGather { table, ids: ids.to_vec() }, value))
    }

    /// Mask entries strictly above the diagonal of a square score matrix.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if r != c {
            return Err(Error::shape(format!("causal mask needs square input, got {r}x{c}")));
        }
        let mut data = ta.data().to_vec();
        k::causal_mask_inplace(&mut data, r);
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::CausalMask { a }, value))
    }

    /// Mean cross entropy of the first `targets.len()` logit rows against the
    /// target ids. Produces a scalar node.
    pub fn mean_cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (r, vocab) = (tl.rows(), tl.cols());
        if targets.is_empty() || targets.len() > r {
            return Err(Error::contract(format!(
                "cross entropy wants 1..={r} targets, got {}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!("target id {bad} >= vocab {vocab}")));
        }
        let (loss, lse) = k::mean_cross_entropy(tl.data(), vocab, targets);
        let value = Tensor::scalar(loss);
        Ok(self.push(Op::MeanCrossEntropy { logits, targets: targets.to_vec(), lse }, value))
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(Error::shape(format!("col slice {start}..{} of {c} cols", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::ColSlice { a, start, len }, value))
    }

    pub fn col_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("col_concat of zero parts".to_string()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != r {
                return Err(Error::shape("col_concat row mismatch".to_string()));
            }
            total += tp.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ColConcat { parts: parts.to_vec() }, value))
    }
}

/// All-node gradients from one backward pass.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient of the loss with respect to any node's output, if the node
    /// influences the loss.
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Run reverse-mode accumulation from a scalar loss node over every node of
/// the tape. Each node's backward rule fires exactly once.
pub fn backward(tape: &Tape, loss: NodeId) -> Result<Backward> {
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract(format!(
            "loss must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    grads[loss.0] = Some(Tensor::scalar(1.0));

    // Helper: accumulate `delta` into grads[target], allocating on demand.
    fn acc(grads: &mut [Option<Tensor>], target: NodeId, shape: &[usize], delta: &[f64]) {
        let slot = &mut grads[target.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                let t = Tensor::new(shape.to_vec(), delta.to_vec()).expect("grad shape");
                *slot = Some(t);
            }
        }
    }

    for idx in (0..n).rev() {
        let Some(gy) = grads[idx].take() else { continue };
        let node = &tape.nodes[idx];
        match &node.op {
            Op::Leaf => {
                grads[idx] = Some(gy);
                continue;
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (tape.value(*a), tape.value(*b));
                let (r, kk) = (ta.rows(), ta.cols());
                let c = tb.cols();
                // dA = dC * B^T ; dB = A^T * dC
                let da = k::matmul_nt(gy.data(), tb.data(), r, c, kk);
                let at = k::transpose(ta.data(), r, kk);
                let db = k::matmul(&at, gy.data(), kk, r, c);
                acc(&mut grads, *a, ta.shape(), &da);
                acc(&mut grads, *b, tb.shape(), &db);
            }
            Op::Add { a, b } => {
                let sa = tape.value(*a).shape().to_vec();
                acc(&mut grads, *a, &sa, gy.data());
                let sb = tape.value(*b).shape().to_vec();
                acc(&mut grads, *b, &sb, gy.data());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (tape.value(*a), tape.value(*b));
                let da: Vec<f64> = gy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                let db: Vec<f64> = gy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                acc(&mut grads, *a, ta.shape(), &da);
                acc(&mut grads, *b, tb.shape(), &db);
            }
            Op::ScalarMul { a, s } => {
                let da: Vec<f64> = gy.data().iter().map(|g| g * s).collect();
                let sa = tape.value(*a).shape().to_vec();
                acc(&mut grads, *a, &sa, &da);
            }
            Op::Transpose { a } => {
                let ta = tape.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                // gy has shape c x r
                let da = k::transpose(gy.data(), c, r);
                acc(&mut grads, *a, ta.shape(), &da);
            }
            Op::RowSoftmax { a } => {
                let p = &node.value;
                let (r, c) = (p.rows(), p.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let prow = p.row(i);
                    let grow = &gy.data()[i * c..(i + 1) * c];
                    let dot: f64 = grow.iter().zip(prow).map(|(g, pv)| g * pv).sum();
                    let out = &mut da[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] = prow[j] * (grow[j] - dot);
                    }
                }
                let sa = tape.value(*a).shape().to_vec();
                acc(&mut grads, *a, &sa, &da);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = tape.value(*x);
                let tg = tape.value(*gain);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                for i in 0..r {
                    let xr = tx.row(i);
                    let gr = &gy.data()[i * c..(i + 1) * c];
                    let inv = inv_rms[i];
                    // s = sum_k gy_k * gain_k * x_k
                    let mut s = 0.0;
                    for j in 0..c {
                        s += gr[j] * tg.data()[j] * xr[j];
                    }
                    let coef = s * inv * inv * inv / c as f64;
                    let out = &mut dx[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] = gr[j] * tg.data()[j] * inv - xr[j] * coef;
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                }
                acc(&mut grads, *x, tx.shape(), &dx);
                let sg = tg.shape().to_vec();
                acc(&mut grads, *gain, &sg, &dgain);
            }
            Op::Silu { a } => {
                let ta = tape.value(*a);
                let da: Vec<f64> = gy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * k::silu_grad(x))
                    .collect();
                acc(&mut grads, *a, ta.shape(), &da);
            }
            Op::Gelu { a } => {
                let ta = tape.value(*a);
                let da: Vec<f64> = gy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * k::gelu_grad(x))
                    .collect();
                acc(&mut grads, *a, ta.shape(), &da);
            }
            Op::EmbeddingGather { table, ids } => {
                let tt = tape.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    let src = &gy.data()[t * d..(t + 1) * d];
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                acc(&mut grads, *table, tt.shape(), &dt);
            }
            Op::CausalMask { a } => {
                let ta = tape.value(*a);
                let t = ta.rows();
                let mut da = gy.data().to_vec();
                for i in 0..t {
                    for j in (i + 1)..t {
                        da[i * t + j] = 0.0;
                    }
                }
                acc(&mut grads, *a, ta.shape(), &da);
            }
            Op::MeanCrossEntropy { logits, targets, lse } => {
                let tl = tape.value(*logits);
                let (r, vocab) = (tl.rows(), tl.cols());
                let scale = gy.item() / targets.len() as f64;
                let mut dl = vec![0.0; r * vocab];
                for (t, &tgt) in targets.iter().enumerate() {
                    let row = tl.row(t);
                    let out = &mut dl[t * vocab..(t + 1) * vocab];
                    for j in 0..vocab {
                        out[j] = scale * (row[j] - lse[t]).exp();
                    }
                    out[tgt as usize] -= scale;
                }
                acc(&mut grads, *logits, tl.shape(), &dl);
            }
            Op::ColSlice { a, start, len } => {
                let ta = tape.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let src = &gy.data()[i * len..(i + 1) * len];
                    da[i * c + start..i * c + start + len].copy_from_slice(src);
                }
                acc(&mut grads, *a, ta.shape(), &da);
            }
            Op::ColConcat { parts } => {
                let mut offset = 0;
                let total = node.value.cols();
                let r = node.value.rows();
                for &p in parts {
                    let tp = tape.value(p);
                    let pc = tp.cols();
                    let mut dp = vec![0.0; r * pc];
                    for i in 0..r {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&gy.data()[i * total + offset..i * total + offset + pc]);
                    }
                    acc(&mut grads, p, tp.shape(), &dp);
                    offset += pc;
                }
            }
        }
        grads[idx] = Some(gy);
    }

    Ok(Backward { grads })
}

/// Exact reverse-mode derivatives of `loss` with respect to each named
/// parameter. Errors if `loss` is not scalar or a requested parameter was
/// never recorded as a leaf.
pub fn grad(tape: &Tape, loss: NodeId, params: &[&str]) -> Result<GradMap> {
    let bw = backward(tape, loss)?;
    let mut out = GradMap::new();
    for &name in params {
        let node = tape
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.param.as_deref() == Some(name));
        let Some((idx, node)) = node else {
            return Err(Error::Lookup(format!("parameter {name} not on tape")));
        };
        let g = match bw.node_grad(NodeId(idx)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.value.shape().to_vec()),
        };
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// Backward pass returning both the full per-node gradients and the map for
/// the requested parameters. Used when callers also need gradients at
/// intermediate activations.
pub fn grad_with_nodes(tape: &Tape, loss: NodeId, params: &[&str]) -> Result<(GradMap, Backward)> {
    let bw = backward(tape, loss)?;
    let mut out = GradMap::new();
    for &name in params {
        let node = tape
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.param.as_deref() == Some(name));
        let Some((idx, node)) = node else {
            return Err(Error::Lookup(format!("parameter {name} not on tape")));
        };
        let g = match bw.node_grad(NodeId(idx)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.value.shape().to_vec()),
        };
        out.insert(name.to_string(), g);
    }
    Ok((out, bw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_rows_equal_input() {
        // loss = sum(W * x) with x = [1, 2]^T: dloss/dW rows are all [1, 2].
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0]]);
        let wid = tape.param("w", &w);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let y = tape.matmul(wid, x).unwrap();
        // sum via ones^T y
        let ones = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let loss = tape.matmul(ones, y).unwrap();
        let g = grad(&tape, loss, &["w"]).unwrap();
        assert_eq!(g["w"].data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn quadratic_gradient_is_w() {
        // loss = ||w||^2 / 2  =>  grad = w
        let mut tape = Tape::new();
        let w = Tensor::new(vec![1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let wid = tape.param("w", &w);
        let sq = tape.mul(wid, wid).unwrap();
        let ones = tape.constant(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
        let summed = tape.matmul(sq, ones).unwrap();
        let loss = tape.scalar_mul(summed, 0.5);
        let g = grad(&tape, loss, &["w"]).unwrap();
        assert_eq!(g["w"].data(), w.data());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::zeros(vec![2, 2]));
        assert!(matches!(grad(&tape, w, &["w"]), Err(Error::Contract(_))));
    }

    #[test]
    fn missing_param_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::scalar(1.0));
        assert!(matches!(grad(&tape, w, &["nope"]), Err(Error::Lookup(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[vec![0.3, 0.7], vec![-0.2, 1.1]]);
        let wid = tape.param("w", &w);
        let s = tape.silu(wid);
        let sm = tape.row_softmax(s);
        let ones_l = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let ones_r = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let t1 = tape.matmul(ones_l, sm).unwrap();
        let loss = tape.matmul(t1, ones_r).unwrap();
        let g1 = grad(&tape, loss, &["w"]).unwrap();
        let g2 = grad(&tape, loss, &["w"]).unwrap();
        assert_eq!(g1["w"].data(), g2["w"].data());
    }
}
