use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Pick(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Append-only tape of primitive applications.
///
/// Nodes are pushed in evaluation order, so the tape is topologically sorted
/// by construction and one reverse sweep visits every node exactly once.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that influenced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain { op, detail: format!("non-finite input value {bad}") });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Log-softmax computed as `x - max - log(sum(exp(x - max)))`.
pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values.iter().map(|v| v - lse).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        let shape = vec![values.len()];
        self.push(Op::Leaf, shape, values)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, Vec::new(), vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape is consistent")
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, `[m,n]x[n]`, `[m]x[m,n]` and
    /// `[n]x[n]` (dot product, scalar result).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mismatch = || Error::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let (shape, value) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if sb[0] != k {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        let brow = &bv[p * n..(p + 1) * n];
                        for (o, &w) in row.iter_mut().zip(brow) {
                            *o += x * w;
                        }
                    }
                }
                (vec![m, n], out)
            }
            (2, 1) => {
                let (m, n) = (sa[0], sa[1]);
                if sb[0] != n {
                    return Err(mismatch());
                }
                let out = (0..m).map(|i| av[i * n..(i + 1) * n].iter().zip(bv).map(|(w, x)| w * x).sum()).collect();
                (vec![m], out)
            }
            (1, 2) => {
                let (m, n) = (sb[0], sb[1]);
                if sa[0] != m {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; n];
                for (p, &x) in av.iter().enumerate() {
                    for (o, &w) in out.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * w;
                    }
                }
                (vec![n], out)
            }
            (1, 1) => {
                if sa[0] != sb[0] {
                    return Err(mismatch());
                }
                let dot = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                (Vec::new(), vec![dot])
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(Op::MatMul(a, b), shape, value))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), shape, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), shape, value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), shape, value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape, value)
    }

    /// Adds vector `v` of width `n` to every row of matrix `m` of shape `[r, n]`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sv = self.shape(v).to_vec();
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Shape { op: "add_row", lhs: sm, rhs: sv });
        }
        let n = sv[0];
        let vv = &self.nodes[v.0].value;
        let value = self.nodes[m.0].value.iter().enumerate().map(|(i, x)| x + vv[i % n]).collect();
        Ok(self.push(Op::AddRow(m, v), sm, value))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        check_finite("exp", self.value(a))?;
        Ok(self.unary(a, Op::Exp(a), f64::exp))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        check_finite("log", self.value(a))?;
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape { op: "concat", lhs: self.shape(parts[0]).to_vec(), rhs: self.shape(p).to_vec() });
            }
            value.extend_from_slice(self.value(p));
        }
        let shape = vec![value.len()];
        Ok(self.push(Op::Concat(parts.to_vec()), shape, value))
    }

    /// Stacks equal-width vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Contract("stack of zero rows".into()));
        };
        let width_shape = self.shape(first).to_vec();
        if width_shape.len() != 1 {
            return Err(Error::Shape { op: "stack", lhs: width_shape.clone(), rhs: vec![0] });
        }
        let mut value = Vec::with_capacity(rows.len() * width_shape[0]);
        for &r in rows {
            same_shape("stack", &width_shape, self.shape(r))?;
            value.extend_from_slice(self.value(r));
        }
        let shape = vec![rows.len(), width_shape[0]];
        Ok(self.push(Op::Stack(rows.to_vec()), shape, value))
    }

    /// Differentiable row lookup, e.g. an embedding.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        if sm.len() != 2 || index >= sm[0] {
            return Err(Error::Contract(format!("row {index} out of range for shape {sm:?}")));
        }
        let n = sm[1];
        let value = self.value(m)[index * n..(index + 1) * n].to_vec();
        Ok(self.push(Op::Row(m, index), vec![n], value))
    }

    /// Selects one element of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 1 || index >= sa[0] {
            return Err(Error::Contract(format!("pick {index} out of range for shape {sa:?}")));
        }
        let value = vec![self.value(a)[index]];
        Ok(self.push(Op::Pick(a, index), Vec::new(), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a), Vec::new(), vec![total])
    }

    /// Sum of same-shaped tensors, accumulated in argument order.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("add_n of zero parts".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut value = vec![0.0; self.value(first).len()];
        for &p in parts {
            same_shape("add_n", &shape, self.shape(p))?;
            for (o, x) in value.iter_mut().zip(self.value(p)) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddN(parts.to_vec()), shape, value))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        if self.shape(a).len() != 1 {
            return Err(Error::Contract(format!("softmax expects a vector, got {:?}", self.shape(a))));
        }
        let value = softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Softmax(a), shape, value))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("log_softmax", self.value(a))?;
        if self.shape(a).len() != 1 {
            return Err(Error::Contract(format!("log_softmax expects a vector, got {:?}", self.shape(a))));
        }
        let value = log_softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::LogSoftmax(a), shape, value))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Vec<f64>, soft: Var) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::Shape { op: "straight_through", lhs: vec![hard.len()], rhs: self.shape(soft).to_vec() });
        }
        let shape = self.shape(soft).to_vec();
        Ok(self.push(Op::StraightThrough(soft), shape, hard))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gi) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gi, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gi: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb) = (shp(*a), shp(*b));
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k, n) = (sa[0], sa[1], sb[1]);
                        accumulate(grads, *a, av.len(), |ga| {
                            for i in 0..m {
                                let grow = &gi[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let brow = &bv[p * n..(p + 1) * n];
                                    ga[i * k + p] += grow.iter().zip(brow).map(|(g, w)| g * w).sum::<f64>();
                                }
                            }
                        });
                        accumulate(grads, *b, bv.len(), |gb| {
                            for i in 0..m {
                                let grow = &gi[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let x = av[i * k + p];
                                    for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                        *o += x * g;
                                    }
                                }
                            }
                        });
                    }
                    (2, 1) => {
                        let (m, n) = (sa[0], sa[1]);
                        accumulate(grads, *a, av.len(), |ga| {
                            for i in 0..m {
                                let g = gi[i];
                                for (o, x) in ga[i * n..(i + 1) * n].iter_mut().zip(bv) {
                                    *o += g * x;
                                }
                            }
                        });
                        accumulate(grads, *b, bv.len(), |gb| {
                            for i in 0..m {
                                let g = gi[i];
                                for (o, w) in gb.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                                    *o += g * w;
                                }
                            }
                        });
                    }
                    (1, 2) => {
                        let (m, n) = (sb[0], sb[1]);
                        accumulate(grads, *a, av.len(), |ga| {
                            for p in 0..m {
                                ga[p] += bv[p * n..(p + 1) * n].iter().zip(gi).map(|(w, g)| w * g).sum::<f64>();
                            }
                        });
                        accumulate(grads, *b, bv.len(), |gb| {
                            for (p, &x) in av.iter().enumerate() {
                                for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *o += x * g;
                                }
                            }
                        });
                    }
                    _ => {
                        let g = gi[0];
                        accumulate(grads, *a, av.len(), |ga| {
                            for (o, y) in ga.iter_mut().zip(bv) {
                                *o += g * y;
                            }
                        });
                        accumulate(grads, *b, bv.len(), |gb| {
                            for (o, x) in gb.iter_mut().zip(av) {
                                *o += g * x;
                            }
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, gi, 1.0);
                add_into(grads, *b, gi, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, gi, 1.0);
                add_into(grads, *b, gi, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, av.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(bv) {
                        *o += g * y;
                    }
                });
                accumulate(grads, *b, bv.len(), |gb| {
                    for ((o, g), x) in gb.iter_mut().zip(gi).zip(av) {
                        *o += g * x;
                    }
                });
            }
            Op::Scale(a, f) => add_into(grads, *a, gi, *f),
            Op::AddRow(m, v) => {
                add_into(grads, *m, gi, 1.0);
                let n = shp(*v)[0];
                accumulate(grads, *v, n, |gv| {
                    for (i, g) in gi.iter().enumerate() {
                        gv[i % n] += g;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accumulate(grads, *a, y.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(y) {
                        *o += g * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(grads, *a, y.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(y) {
                        *o += g * y * (1.0 - y);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                accumulate(grads, *a, y.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(y) {
                        *o += g * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                accumulate(grads, *a, x.len(), |ga| {
                    for ((o, g), x) in ga.iter_mut().zip(gi).zip(x) {
                        *o += g / x;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    add_into(grads, p, &gi[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::Stack(rows) => {
                let n = shp(rows[0])[0];
                for (r, &p) in rows.iter().enumerate() {
                    add_into(grads, p, &gi[r * n..(r + 1) * n], 1.0);
                }
            }
            Op::Row(m, index) => {
                let n = gi.len();
                let total = val(*m).len();
                accumulate(grads, *m, total, |gm| {
                    for (o, g) in gm[index * n..(index + 1) * n].iter_mut().zip(gi) {
                        *o += g;
                    }
                });
            }
            Op::Pick(a, index) => {
                let total = val(*a).len();
                accumulate(grads, *a, total, |ga| ga[*index] += gi[0]);
            }
            Op::Sum(a) => {
                let g = gi[0];
                let total = val(*a).len();
                accumulate(grads, *a, total, |ga| {
                    for o in ga.iter_mut() {
                        *o += g;
                    }
                });
            }
            Op::AddN(parts) => {
                for &p in parts {
                    add_into(grads, p, gi, 1.0);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner: f64 = gi.iter().zip(y).map(|(g, y)| g * y).sum();
                accumulate(grads, *a, y.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(y) {
                        *o += y * (g - inner);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let total: f64 = gi.iter().sum();
                accumulate(grads, *a, y.len(), |ga| {
                    for ((o, g), y) in ga.iter_mut().zip(gi).zip(y) {
                        *o += g - y.exp() * total;
                    }
                });
            }
            Op::StraightThrough(soft) => add_into(grads, *soft, gi, 1.0),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
    accumulate(grads, v, g.len(), |slot| {
        for (o, x) in slot.iter_mut().zip(g) {
            *o += factor * x;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i3 = g.leaf(&Tensor::identity(3));
        let a = g.leaf(&Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.25]).unwrap());
        let out = g.matmul(i3, a).unwrap();
        assert_eq!(g.shape(out), &[3, 2]);
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant_vec(vec![0.0; 4]);
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s), &[0.25; 4]);
    }

    #[test]
    fn tanh_at_origin() {
        let mut g = Graph::new();
        let z = g.constant_scalar(0.0);
        let t = g.tanh(z);
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::matrix(2, 3, vec![0.3; 6]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_at_uniform() {
        let v = 5;
        let k = 2;
        let mut g = Graph::new();
        let logits = g.leaf(&Tensor::zeros(&[v]));
        let lp = g.log_softmax(logits).unwrap();
        let picked = g.pick(lp, k).unwrap();
        let loss = g.scale(picked, -1.0);
        let grads = g.backward(loss).unwrap();
        let expected: Vec<f64> = (0..v).map(|i| 1.0 / v as f64 - if i == k { 1.0 } else { 0.0 }).collect();
        assert!(close(grads.get(logits).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn non_finite_softmax_input_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant_vec(vec![0.0, f64::NAN]);
        assert!(matches!(g.softmax(a), Err(Error::Domain { .. })));
        let b = g.constant_vec(vec![1.0, 0.0]);
        assert!(matches!(g.log(b), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[3]));
        let t = g.tanh(a);
        assert!(matches!(g.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn straight_through_forwards_hard_values() {
        let mut g = Graph::new();
        let soft_in = g.leaf(&Tensor::vector(vec![0.1, 0.7, 0.2]));
        let soft = g.softmax(soft_in).unwrap();
        let st = g.straight_through(vec![0.0, 1.0, 0.0], soft).unwrap();
        assert_eq!(g.value(st), &[0.0, 1.0, 0.0]);
        let w = g.constant_vec(vec![1.0, 2.0, 3.0]);
        let loss = g.matmul(st, w).unwrap();
        let grads = g.backward(loss).unwrap();
        // identity into the softmax output, then through the softmax Jacobian
        let y = g.value(soft).to_vec();
        let inner: f64 = y.iter().zip([1.0, 2.0, 3.0]).map(|(a, b)| a * b).sum();
        let expected: Vec<f64> = y.iter().zip([1.0, 2.0, 3.0]).map(|(y, w)| y * (w - inner)).collect();
        assert!(close(grads.get(soft_in).unwrap(), &expected, 1e-15));
    }
}
