use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operations recordable on the tape.
///
/// `Linearized` is an escape hatch for scalar values whose gradient is
/// computed outside the tape (the transport solver supplies dual potentials);
/// the cached tensors are the exact gradients w.r.t. each input.
#[derive(Clone, Debug)]
pub enum PrimitiveKind {
    MatMul,
    AddBias,
    Relu,
    L2Normalize,
    Softmax,
    Log,
    Scale(f64),
    Sum,
    Mean,
    ConcatRows,
    Transpose,
    Mul,
    Add,
    Exp,
    Linearized { grads: Vec<Tensor> },
}

impl PrimitiveKind {
    fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::AddBias => "add_bias",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::L2Normalize => "l2_normalize",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Scale(_) => "scale",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::ConcatRows => "concat_rows",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Linearized { .. } => "linearized",
        }
    }
}

enum NodeOp {
    /// Input tensor; `name` is set for trainable parameters.
    Leaf { name: Option<String> },
    Primitive {
        kind: PrimitiveKind,
        /// Per-op cached locals (row norms for l2_normalize).
        locals: Vec<f64>,
    },
}

struct Node {
    op: NodeOp,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation graph. Node ids are topologically ordered by
/// construction; `backward` walks them in exact reverse creation order.
#[derive(Default)]
pub struct ComputeTape {
    nodes: Vec<Node>,
    gradients: Vec<Option<Tensor>>,
}

impl ComputeTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input (no gradient is collected for it).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: NodeOp::Leaf { name: None },
            inputs: vec![],
            value,
        })
    }

    /// Records a trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Node {
            op: NodeOp::Leaf {
                name: Some(name.to_string()),
            },
            inputs: vec![],
            value,
        })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the most recent `backward` root w.r.t. node `id`.
    pub fn gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.gradients.get(id).and_then(|g| g.as_ref())
    }

    /// Applies one primitive, returning the output node id. Forward values
    /// are the plain mathematical definitions; shape errors name the kind.
    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId> {
        let (value, locals) = self.forward(&kind, inputs)?;
        value.check_finite(kind.name())?;
        Ok(self.push(Node {
            op: NodeOp::Primitive { kind, locals },
            inputs: inputs.to_vec(),
            value,
        }))
    }

    fn shape_err(kind: &PrimitiveKind, shapes: &[&[usize]]) -> Error {
        Error::ShapeMismatch {
            op: kind.name(),
            detail: shapes
                .iter()
                .map(|s| format!("{s:?}"))
                .collect::<Vec<_>>()
                .join(" x "),
        }
    }

    fn forward(&self, kind: &PrimitiveKind, inputs: &[NodeId]) -> Result<(Tensor, Vec<f64>)> {
        let val = |i: usize| &self.nodes[inputs[i]].value;
        let arity_err = || Error::ShapeMismatch {
            op: kind.name(),
            detail: format!("wrong number of inputs: {}", inputs.len()),
        };
        match kind {
            PrimitiveKind::MatMul => {
                if inputs.len() != 2 {
                    return Err(arity_err());
                }
                let (a, b) = (val(0), val(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Self::shape_err(kind, &[a.shape(), b.shape()]));
                }
                Ok((super::matmul(a, b)?, vec![]))
            }
            PrimitiveKind::AddBias => {
                if inputs.len() != 2 {
                    return Err(arity_err());
                }
                let (x, b) = (val(0), val(1));
                if x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1] {
                    return Err(Self::shape_err(kind, &[x.shape(), b.shape()]));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = x.data().to_vec();
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] += b.data()[j];
                    }
                }
                Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::Relu => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                let out = x.data().iter().map(|&v| v.max(0.0)).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::L2Normalize => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; r * c];
                let mut norms = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-150 {
                        return Err(Error::ZeroNorm {
                            context: format!("l2_normalize row {i}"),
                        });
                    }
                    for j in 0..c {
                        out[i * c + j] = row[j] / norm;
                    }
                    norms.push(norm);
                }
                Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
            }
            PrimitiveKind::Softmax => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                Ok((super::softmax_rows(val(0)), vec![]))
            }
            PrimitiveKind::Log => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                for (i, &v) in x.data().iter().enumerate() {
                    if v <= 0.0 {
                        return Err(Error::NonFinite {
                            op: "log".into(),
                            detail: format!("non-positive input {v} at entry {i}"),
                        });
                    }
                }
                let out = x.data().iter().map(|v| v.ln()).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::Scale(c) => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                let out = x.data().iter().map(|v| v * c).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::Sum => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let s: f64 = val(0).data().iter().sum();
                Ok((Tensor::scalar(s), vec![]))
            }
            PrimitiveKind::Mean => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                let s: f64 = x.data().iter().sum();
                Ok((Tensor::scalar(s / x.numel() as f64), vec![]))
            }
            PrimitiveKind::ConcatRows => {
                if inputs.is_empty() {
                    return Err(arity_err());
                }
                let cols = val(0).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for idx in 0..inputs.len() {
                    let t = val(idx);
                    if t.rank() != 2 || t.cols() != cols {
                        return Err(Self::shape_err(kind, &[val(0).shape(), t.shape()]));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Ok((Tensor::new(vec![rows, cols], data)?, vec![]))
            }
            PrimitiveKind::Transpose => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                if x.rank() != 2 {
                    return Err(Self::shape_err(kind, &[x.shape()]));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x.data()[i * c + j];
                    }
                }
                Ok((Tensor::new(vec![c, r], out)?, vec![]))
            }
            PrimitiveKind::Mul | PrimitiveKind::Add => {
                if inputs.len() != 2 {
                    return Err(arity_err());
                }
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(Self::shape_err(kind, &[a.shape(), b.shape()]));
                }
                let out = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| match kind {
                        PrimitiveKind::Mul => x * y,
                        _ => x + y,
                    })
                    .collect();
                Ok((Tensor::new(a.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::Exp => {
                if inputs.len() != 1 {
                    return Err(arity_err());
                }
                let x = val(0);
                let out = x.data().iter().map(|v| v.exp()).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
            }
            PrimitiveKind::Linearized { grads } => {
                if grads.len() != inputs.len() {
                    return Err(Error::ShapeMismatch {
                        op: "linearized",
                        detail: format!(
                            "{} gradient tensors for {} inputs",
                            grads.len(),
                            inputs.len()
                        ),
                    });
                }
                for (g, &inp) in grads.iter().zip(inputs) {
                    if g.shape() != self.nodes[inp].value.shape() {
                        return Err(Self::shape_err(kind, &[g.shape(), self.nodes[inp].value.shape()]));
                    }
                }
                // Value is injected via `linearized()`, which rewrites it.
                Ok((Tensor::scalar(0.0), vec![]))
            }
        }
    }

    /// Records an externally computed scalar with fixed input gradients.
    pub fn linearized(
        &mut self,
        value: f64,
        inputs: &[NodeId],
        grads: Vec<Tensor>,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "linearized".into(),
                detail: format!("value {value}"),
            });
        }
        let id = self.apply(PrimitiveKind::Linearized { grads }, inputs)?;
        self.nodes[id].value = Tensor::scalar(value);
        Ok(id)
    }

    // Ergonomic wrappers over `apply`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::MatMul, &[a, b])
    }
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::AddBias, &[x, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Relu, &[x])
    }
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::L2Normalize, &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Softmax, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Log, &[x])
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(PrimitiveKind::Scale(c), &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Mean, &[x])
    }
    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(PrimitiveKind::ConcatRows, inputs)
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Transpose, &[x])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Mul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Add, &[a, b])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveKind::Exp, &[x])
    }

    /// Reverse pass from a scalar root. Populates per-node gradients; leaves
    /// not reachable from the root keep zero gradients (materialized for
    /// named parameters by `param_gradients`).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_val = &self.nodes[root].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        self.gradients = (0..self.nodes.len()).map(|_| None).collect();
        self.gradients[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let grad = match self.gradients[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &grad)?;
            self.gradients[id] = Some(grad);
        }
        Ok(())
    }

    /// Gradients of all named parameter leaves, zeros where unreachable.
    pub fn param_gradients(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let NodeOp::Leaf { name: Some(name) } = &node.op {
                let g = self
                    .gradient(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.push((name.clone(), g));
            }
        }
        out
    }

    fn accumulate(&mut self, id: NodeId, update: Tensor) {
        match &mut self.gradients[id] {
            Some(existing) => {
                for (e, u) in existing.data_mut().iter_mut().zip(update.data()) {
                    *e += u;
                }
            }
            slot @ None => *slot = Some(update),
        }
    }

    fn propagate(&mut self, id: NodeId, grad: &Tensor) -> Result<()> {
        let inputs = self.nodes[id].inputs.clone();
        let (kind, locals) = match &self.nodes[id].op {
            NodeOp::Leaf { .. } => return Ok(()),
            NodeOp::Primitive { kind, locals } => (kind.clone(), locals.clone()),
        };
        match kind {
            PrimitiveKind::MatMul => {
                let a = self.nodes[inputs[0]].value.clone();
                let b = self.nodes[inputs[1]].value.clone();
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                // dA = G . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = grad.data()[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += g * b.data()[p * n + j];
                        }
                    }
                }
                // dB = A^T . G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * grad.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(inputs[0], Tensor::new(vec![m, k], da)?);
                self.accumulate(inputs[1], Tensor::new(vec![k, n], db)?);
            }
            PrimitiveKind::AddBias => {
                let (r, c) = (grad.shape()[0], grad.shape()[1]);
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += grad.data()[i * c + j];
                    }
                }
                self.accumulate(inputs[0], grad.clone());
                self.accumulate(inputs[1], Tensor::new(vec![c], db)?);
            }
            PrimitiveKind::Relu => {
                let x = &self.nodes[inputs[0]].value;
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(inputs[0], Tensor::new(x.shape().to_vec(), out)?);
            }
            PrimitiveKind::L2Normalize => {
                let y = self.nodes[id].value.clone();
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let norm = locals[i];
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &grad.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(
                    inputs[0],
                    Tensor::new(self.nodes[inputs[0]].value.shape().to_vec(), dx)?,
                );
            }
            PrimitiveKind::Softmax => {
                let s = self.nodes[id].value.clone();
                let (r, c) = (s.rows(), s.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let sr = &s.data()[i * c..(i + 1) * c];
                    let gr = &grad.data()[i * c..(i + 1) * c];
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(
                    inputs[0],
                    Tensor::new(self.nodes[inputs[0]].value.shape().to_vec(), dx)?,
                );
            }
            PrimitiveKind::Log => {
                let x = &self.nodes[inputs[0]].value;
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| g / xv)
                    .collect();
                self.accumulate(inputs[0], Tensor::new(x.shape().to_vec(), out)?);
            }
            PrimitiveKind::Scale(cst) => {
                let x_shape = self.nodes[inputs[0]].value.shape().to_vec();
                let out: Vec<f64> = grad.data().iter().map(|&g| g * cst).collect();
                self.accumulate(inputs[0], Tensor::new(x_shape, out)?);
            }
            PrimitiveKind::Sum => {
                let x_shape = self.nodes[inputs[0]].value.shape().to_vec();
                let g = grad.scalar_value();
                let n: usize = x_shape.iter().product();
                self.accumulate(inputs[0], Tensor::new(x_shape, vec![g; n])?);
            }
            PrimitiveKind::Mean => {
                let x_shape = self.nodes[inputs[0]].value.shape().to_vec();
                let n: usize = x_shape.iter().product();
                let g = grad.scalar_value() / n as f64;
                self.accumulate(inputs[0], Tensor::new(x_shape, vec![g; n])?);
            }
            PrimitiveKind::ConcatRows => {
                let cols = grad.cols();
                let mut offset = 0;
                for &inp in &inputs {
                    let rows = self.nodes[inp].value.rows();
                    let slice =
                        grad.data()[offset * cols..(offset + rows) * cols].to_vec();
                    self.accumulate(inp, Tensor::new(vec![rows, cols], slice)?);
                    offset += rows;
                }
            }
            PrimitiveKind::Transpose => {
                let (r, c) = (grad.shape()[0], grad.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = grad.data()[i * c + j];
                    }
                }
                self.accumulate(inputs[0], Tensor::new(vec![c, r], out)?);
            }
            PrimitiveKind::Mul => {
                let a = self.nodes[inputs[0]].value.clone();
                let b = self.nodes[inputs[1]].value.clone();
                let da: Vec<f64> = grad.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                self.accumulate(inputs[0], Tensor::new(a.shape().to_vec(), da)?);
                self.accumulate(inputs[1], Tensor::new(b.shape().to_vec(), db)?);
            }
            PrimitiveKind::Add => {
                self.accumulate(inputs[0], grad.clone());
                self.accumulate(inputs[1], grad.clone());
            }
            PrimitiveKind::Exp => {
                let y = self.nodes[id].value.clone();
                let out: Vec<f64> = y.data().iter().zip(grad.data()).map(|(&yv, &g)| g * yv).collect();
                self.accumulate(inputs[0], Tensor::new(y.shape().to_vec(), out)?);
            }
            PrimitiveKind::Linearized { grads } => {
                let g = grad.scalar_value();
                for (tensor, &inp) in grads.iter().zip(&inputs) {
                    let scaled: Vec<f64> = tensor.data().iter().map(|&v| v * g).collect();
                    self.accumulate(inp, Tensor::new(tensor.shape().to_vec(), scaled)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = ComputeTape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_vector_errors() {
        let mut tape = ComputeTape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            tape.l2_normalize(x),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = ComputeTape::new();
        let x = tape.param("x", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 7.0]]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.gradient(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = ComputeTape::new();
        let a = tape.param("a", Tensor::vector(vec![2.0]).unwrap());
        let b = tape.param("b", Tensor::vector(vec![3.0]).unwrap());
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        let grads = tape.param_gradients();
        let gb = grads.iter().find(|(n, _)| n == "b").unwrap();
        assert_eq!(gb.1.data(), &[0.0]);
        let _ = b;
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = ComputeTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn matmul_shape_mismatch_names_kind() {
        let mut tape = ComputeTape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut tape = ComputeTape::new();
            let x = tape.leaf(
                Tensor::from_rows(&[vec![0.3, -1.7, 2.9], vec![4.1, 0.01, -0.5]]).unwrap(),
            );
            let w = tape.leaf(Tensor::from_rows(&[vec![1.5, -0.2], vec![0.7, 0.9], vec![-1.1, 0.4]]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let r = tape.relu(h).unwrap();
            let s = tape.softmax(r).unwrap();
            let m = tape.mean(s).unwrap();
            tape.value(m).data().to_vec()
        };
        let first = build();
        let second = build();
        assert_eq!(
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn concat_rows_stacks_and_splits_gradient() {
        let mut tape = ComputeTape::new();
        let a = tape.param("a", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.param("b", Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let scaled = tape.scale(cat, 2.0).unwrap();
        let s = tape.sum(scaled).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.gradient(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(tape.gradient(b).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }
}
