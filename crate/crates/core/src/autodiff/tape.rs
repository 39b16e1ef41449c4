//! Wengert-list reverse-mode differentiation over scalar nodes.
//!
//! Every node holds one scalar value. Elementwise operations cache their
//! local partials at record time; the two dense kinds (`Linear`,
//! `LinearFixed`) read partials straight from the value buffer, which keeps
//! a fully connected layer at one node per output unit.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A run of consecutively recorded nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarRange {
    start: u32,
    len: u32,
}

impl VarRange {
    pub(crate) fn new(start: usize, len: usize) -> VarRange {
        VarRange { start: start as u32, len: len as u32 }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Var {
        assert!(i < self.len(), "index {i} out of range {}", self.len);
        Var(self.start + i as u32)
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        (self.start..self.start + self.len).map(Var)
    }

    pub fn to_vec(&self) -> Vec<Var> {
        self.iter().collect()
    }

    /// Sub-range `[offset, offset + len)` of this range.
    pub fn slice(&self, offset: usize, len: usize) -> VarRange {
        assert!(offset + len <= self.len(), "slice out of range");
        VarRange { start: self.start + offset as u32, len: len as u32 }
    }

    fn bounds(&self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

#[derive(Clone, Debug)]
enum Node<'w> {
    Leaf,
    Const,
    Unary { arg: u32, d: f64 },
    Binary { lhs: u32, rhs: u32, dl: f64, dr: f64 },
    /// Sum of operands stored in `Tape::operands[off..off + len]`.
    Sum { off: u32, len: u32 },
    /// `bias + Σ_k w[k]·x[k]` over two node ranges.
    Linear { w: u32, x: u32, len: u32, bias: u32 },
    /// `Σ_k w[k]·x[k] + const` with weights held outside the tape.
    LinearFixed { w: &'w [f64], x: u32 },
}

/// Append-only computation record. Nodes are stored in topological order.
///
/// The lifetime `'w` bounds weight slices referenced by
/// [`Tape::linear_fixed`], which lets callers evaluate a network at fixed
/// parameters without copying them onto the tape.
#[derive(Clone, Debug, Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
    values: Vec<f64>,
    operands: Vec<u32>,
    leaves: Vec<u32>,
}

/// Adjoints of every node with respect to one output.
#[derive(Clone, Debug)]
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn of(&self, v: Var) -> f64 {
        self.adj[v.index()]
    }

    pub fn of_range(&self, r: VarRange) -> Vec<f64> {
        self.adj[r.bounds()].to_vec()
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            operands: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn push(&mut self, node: Node<'w>, value: f64) -> Var {
        let id = self.nodes.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.nodes.push(node);
        self.values.push(value);
        Var(id as u32)
    }

    fn val(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        let v = self.push(Node::Leaf, value);
        self.leaves.push(v.0);
        v
    }

    pub fn leaves(&mut self, values: &[f64]) -> VarRange {
        let start = self.nodes.len() as u32;
        for &x in values {
            self.leaf(x);
        }
        VarRange { start, len: values.len() as u32 }
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Node::Const, value)
    }

    pub fn constants(&mut self, values: &[f64]) -> VarRange {
        let start = self.nodes.len() as u32;
        for &x in values {
            self.constant(x);
        }
        VarRange { start, len: values.len() as u32 }
    }

    pub fn value(&self, v: Var) -> f64 {
        self.val(v)
    }

    pub fn values(&self, r: VarRange) -> &[f64] {
        &self.values[r.bounds()]
    }

    fn unary(&mut self, arg: Var, value: f64, d: f64) -> Var {
        self.push(Node::Unary { arg: arg.0, d }, value)
    }

    fn binary(&mut self, lhs: Var, rhs: Var, value: f64, dl: f64, dr: f64) -> Var {
        self.push(Node::Binary { lhs: lhs.0, rhs: rhs.0, dl, dr }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, self.val(a) + self.val(b), 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, self.val(a) - self.val(b), 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        self.binary(a, b, x * y, y, x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        self.binary(a, b, x / y, 1.0 / y, -x / (y * y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, -self.val(a), -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, c * self.val(a), c)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, self.val(a) + c, 1.0)
    }

    pub fn identity(&mut self, a: Var) -> Var {
        self.unary(a, self.val(a), 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.unary(a, x * x, 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let s = self.val(a).sqrt();
        self.unary(a, s, 0.5 / s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.val(a).exp();
        self.unary(a, e, e)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.unary(a, x.ln(), 1.0 / x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.val(a).tanh();
        self.unary(a, t, 1.0 - t * t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.val(a));
        self.unary(a, s, s * (1.0 - s))
    }

    /// Clamp into `[lo, hi]`; the partial is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.val(a);
        if x < lo {
            self.unary(a, lo, 0.0)
        } else if x > hi {
            self.unary(a, hi, 0.0)
        } else {
            self.unary(a, x, 1.0)
        }
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let off = self.operands.len() as u32;
        let mut total = 0.0;
        for &t in terms {
            self.operands.push(t.0);
            total += self.val(t);
        }
        self.push(Node::Sum { off, len: terms.len() as u32 }, total)
    }

    /// Records an identity copy of each var so they form one contiguous range.
    pub fn gather(&mut self, vars: &[Var]) -> VarRange {
        let start = self.nodes.len() as u32;
        for &v in vars {
            self.identity(v);
        }
        VarRange { start, len: vars.len() as u32 }
    }

    /// `bias + w·x` where both `w` and `x` live on the tape.
    pub fn linear(&mut self, w: VarRange, x: VarRange, bias: Var) -> Var {
        assert_eq!(w.len(), x.len(), "linear: weight/input length mismatch");
        let dot: f64 = self.values[w.bounds()]
            .iter()
            .zip(&self.values[x.bounds()])
            .map(|(a, b)| a * b)
            .sum();
        let value = dot + self.val(bias);
        self.push(Node::Linear { w: w.start, x: x.start, len: w.len, bias: bias.0 }, value)
    }

    /// `bias + w·x` with `w` and `bias` treated as constants.
    pub fn linear_fixed(&mut self, w: &'w [f64], x: VarRange, bias: f64) -> Var {
        assert_eq!(w.len(), x.len(), "linear_fixed: weight/input length mismatch");
        let dot: f64 = w.iter().zip(&self.values[x.bounds()]).map(|(a, b)| a * b).sum();
        self.push(Node::LinearFixed { w, x: x.start }, dot + bias)
    }

    /// Reverse sweep from `output`, returning the adjoint of every node.
    pub fn adjoints(&self, output: Var) -> Result<Adjoints> {
        let out = output.index();
        if out >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "output index {out} out of range for tape of {} nodes",
                self.nodes.len()
            )));
        }
        let mut adj = vec![0.0; self.nodes.len()];
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match &self.nodes[i] {
                Node::Leaf | Node::Const => {}
                Node::Unary { arg, d } => adj[*arg as usize] += a * d,
                Node::Binary { lhs, rhs, dl, dr } => {
                    adj[*lhs as usize] += a * dl;
                    adj[*rhs as usize] += a * dr;
                }
                Node::Sum { off, len } => {
                    let off = *off as usize;
                    for &t in &self.operands[off..off + *len as usize] {
                        adj[t as usize] += a;
                    }
                }
                Node::Linear { w, x, len, bias } => {
                    let (w, x, len) = (*w as usize, *x as usize, *len as usize);
                    for k in 0..len {
                        adj[w + k] += a * self.values[x + k];
                        adj[x + k] += a * self.values[w + k];
                    }
                    adj[*bias as usize] += a;
                }
                Node::LinearFixed { w, x } => {
                    let x = *x as usize;
                    for (dst, wk) in adj[x..x + w.len()].iter_mut().zip(w.iter()) {
                        *dst += a * wk;
                    }
                }
            }
        }
        Ok(Adjoints { adj })
    }

    /// Gradient of `output` with respect to every leaf, in leaf creation order.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        let adj = self.adjoints(output)?;
        Ok(self.leaves.iter().map(|&l| adj.adj[l as usize]).collect())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(3.0);
        let y = t.mul(w, w);
        assert_eq!(t.backward(y).unwrap(), vec![6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(1.5);
        let c = t.constant(2.0);
        let z = t.scale(w, 0.0);
        let y = t.add(z, c);
        assert_eq!(t.backward(y).unwrap(), vec![0.0]);
    }

    #[test]
    fn out_of_range_output_is_rejected() {
        let mut t = Tape::new();
        t.leaf(1.0);
        assert!(t.backward(Var(7)).is_err());
    }

    #[test]
    fn linear_nodes_match_elementwise_graph() {
        let w = [0.3, -1.2, 2.0];
        let x = [1.0, 0.5, -0.25];
        let mut t = Tape::new();
        let wr = t.leaves(&w);
        let xr = t.leaves(&x);
        let b = t.leaf(0.1);
        let y = t.linear(wr, xr, b);
        let g = t.backward(y).unwrap();

        let mut u = Tape::new();
        let wr2 = u.leaves(&w);
        let xr2 = u.leaves(&x);
        let b2 = u.leaf(0.1);
        let prods: Vec<Var> = (0..3).map(|k| u.mul(wr2.get(k), xr2.get(k))).collect();
        let s = u.sum(&prods);
        let y2 = u.add(s, b2);
        assert_eq!(t.value(y), u.value(y2));
        assert_eq!(g, u.backward(y2).unwrap());
    }

    #[test]
    fn fixed_linear_only_propagates_to_inputs() {
        let w = vec![2.0, -3.0];
        let mut t = Tape::new();
        let x = t.leaves(&[1.0, 1.0]);
        let y = t.linear_fixed(&w, x, 0.5);
        assert_eq!(t.value(y), -0.5);
        assert_eq!(t.backward(y).unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut t = Tape::new();
        let a = t.leaf(2.0);
        let c = t.clamp(a, 0.0, 1.0);
        assert_eq!(t.value(c), 1.0);
        assert_eq!(t.backward(c).unwrap(), vec![0.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }
}
