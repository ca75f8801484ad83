//! A small reverse-mode tape over the engine's primitives.
//!
//! Nodes hold dense values (vectors are `n x 1`, scalars `1 x 1`). Leaves are
//! either tracked parameters or constants; any node whose inputs are all
//! constant is itself untracked and skipped by [`GradTape::backward`].

use crate::data::Label;
use crate::error::{Error, Result};
use crate::numeric::{self, Mat64};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { w: Var, x: Var },
    AffineT { w: Var, x: Var },
    Attend { q: Var, k: Var, v: Var, weights: Vec<f64> },
    Softplus(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Dot(Var, Var),
    Bce { logit: Var, label: Label },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    tracked: bool,
}

/// Records primitive applications for one scalar loss.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Reverse-mode gradients of a scalar root, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, or `None` if the root does
    /// not depend on it through tracked nodes.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for untouched nodes.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens[var.0]],
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn param_vec(&mut self, data: &[f64]) -> Var {
        self.push(data.to_vec(), data.len(), 1, Op::Leaf, true)
    }

    pub fn param_mat(&mut self, m: &Mat64) -> Var {
        self.push(m.as_slice().to_vec(), m.rows(), m.cols(), Op::Leaf, true)
    }

    pub fn param_scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], 1, 1, Op::Leaf, true)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Var {
        self.push(data.to_vec(), data.len(), 1, Op::Leaf, false)
    }

    pub fn constant_mat(&mut self, m: &Mat64) -> Var {
        self.push(m.as_slice().to_vec(), m.rows(), m.cols(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).tracked)
    }

    fn require_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let n = self.node(v);
        if n.cols != 1 {
            return Err(Error::dim(op, "vector", format!("{}x{}", n.rows, n.cols)));
        }
        Ok(n.rows)
    }

    fn require_same_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let la = self.require_vector(op, a)?;
        let lb = self.require_vector(op, b)?;
        if la != lb {
            return Err(Error::dim(op, la, lb));
        }
        Ok(la)
    }

    /// `W x`.
    pub fn affine(&mut self, w: Var, x: Var) -> Result<Var> {
        let (r, c) = self.shape(w);
        let lx = self.require_vector("affine", x)?;
        if lx != c {
            return Err(Error::dim("affine", c, lx));
        }
        let mut out = vec![0.0; r];
        numeric::matvec(self.value(w), r, c, self.value(x), &mut out);
        let t = self.tracked(&[w, x]);
        Ok(self.push(out, r, 1, Op::Affine { w, x }, t))
    }

    /// `W^T x`.
    pub fn affine_t(&mut self, w: Var, x: Var) -> Result<Var> {
        let (r, c) = self.shape(w);
        let lx = self.require_vector("affine_t", x)?;
        if lx != r {
            return Err(Error::dim("affine_t", r, lx));
        }
        let mut out = vec![0.0; c];
        numeric::matvec_t(self.value(w), r, c, self.value(x), &mut out);
        let t = self.tracked(&[w, x]);
        Ok(self.push(out, c, 1, Op::AffineT { w, x }, t))
    }

    /// `softmax_rows(q k^T) v`.
    pub fn attend(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let h = self.require_same_len("attend", q, k)?;
        self.require_same_len("attend", k, v)?;
        let weights = numeric::outer_softmax_weights(self.value(q), self.value(k));
        let out = numeric::attend_with(&weights, self.value(v));
        let t = self.tracked(&[q, k, v]);
        Ok(self.push(out, h, 1, Op::Attend { q, k, v, weights }, t))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let n = self.require_vector("softplus", x)?;
        let out = self.value(x).iter().map(|&v| numeric::softplus_scalar(v)).collect();
        let t = self.tracked(&[x]);
        Ok(self.push(out, n, 1, Op::Softplus(x), t))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let n = self.require_vector("sigmoid", x)?;
        let out = self.value(x).iter().map(|&v| numeric::sigmoid(v)).collect();
        let t = self.tracked(&[x]);
        Ok(self.push(out, n, 1, Op::Sigmoid(x), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.require_same_len("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, n, 1, Op::Add(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.require_same_len("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, n, 1, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = self.require_vector("scale", a)?;
        let out = self.value(a).iter().map(|x| x * c).collect();
        let t = self.tracked(&[a]);
        Ok(self.push(out, n, 1, Op::Scale(a, c), t))
    }

    /// Inner product, producing a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_len("dot", a, b)?;
        let out = numeric::dot(self.value(a), self.value(b));
        let t = self.tracked(&[a, b]);
        Ok(self.push(vec![out], 1, 1, Op::Dot(a, b), t))
    }

    pub fn bce_with_logit(&mut self, logit: Var, label: Label) -> Result<Var> {
        if self.shape(logit) != (1, 1) {
            return Err(Error::dim("bce_with_logit", "scalar", format!("{:?}", self.shape(logit))));
        }
        let out = numeric::bce_with_logit(self.scalar(logit), label);
        let t = self.tracked(&[logit]);
        Ok(self.push(vec![out], 1, 1, Op::Bce { logit, label }, t))
    }

    /// `sum_i c_i x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, c) in terms {
            if self.shape(*v) != (1, 1) {
                return Err(Error::dim("weighted_sum", "scalar", format!("{:?}", self.shape(*v))));
            }
            total += c * self.scalar(*v);
        }
        let t = terms.iter().any(|(v, _)| self.node(*v).tracked);
        Ok(self.push(vec![total], 1, 1, Op::WeightedSum(terms.to_vec()), t))
    }

    /// Reverse pass from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("root {root:?} is not on this tape")));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

impl GradTape {
    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x } => {
                let (r, c) = (nodes[w.0].rows, nodes[w.0].cols);
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                if let Some(gw) = slot(nodes, grads, *w) {
                    for i in 0..r {
                        if g[i] == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            gw[i * c + j] += g[i] * xv[j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut tmp = vec![0.0; c];
                    numeric::matvec_t(wv, r, c, g, &mut tmp);
                    gx.iter_mut().zip(tmp).for_each(|(a, b)| *a += b);
                }
            }
            Op::AffineT { w, x } => {
                let (r, c) = (nodes[w.0].rows, nodes[w.0].cols);
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                if let Some(gw) = slot(nodes, grads, *w) {
                    for i in 0..r {
                        if xv[i] == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            gw[i * c + j] += xv[i] * g[j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut tmp = vec![0.0; r];
                    numeric::matvec(wv, r, c, g, &mut tmp);
                    gx.iter_mut().zip(tmp).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attend { q, k, v, weights } => {
                let h = node.value.len();
                let qv = &nodes[q.0].value;
                let kv = &nodes[k.0].value;
                let vv = &nodes[v.0].value;
                let a = &node.value;
                // dL/dS_ij = g_i * P_ij * (v_j - a_i)
                let mut gs = vec![0.0; h * h];
                for i in 0..h {
                    for j in 0..h {
                        gs[i * h + j] = g[i] * weights[i * h + j] * (vv[j] - a[i]);
                    }
                }
                if let Some(gv) = slot(nodes, grads, *v) {
                    for i in 0..h {
                        for j in 0..h {
                            gv[j] += weights[i * h + j] * g[i];
                        }
                    }
                }
                if let Some(gq) = slot(nodes, grads, *q) {
                    for i in 0..h {
                        gq[i] += numeric::dot(&gs[i * h..(i + 1) * h], kv);
                    }
                }
                if let Some(gk) = slot(nodes, grads, *k) {
                    for i in 0..h {
                        for j in 0..h {
                            gk[j] += gs[i * h + j] * qv[i];
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * numeric::sigmoid(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += d * c);
                }
            }
            Op::Dot(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(bv).for_each(|(s, y)| *s += g[0] * y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(av).for_each(|(s, x)| *s += g[0] * x);
                }
            }
            Op::Bce { logit, label } => {
                let l = nodes[logit.0].value[0];
                if let Some(gl) = slot(nodes, grads, *logit) {
                    gl[0] += g[0] * (numeric::sigmoid(l) - label.target());
                }
            }
            Op::WeightedSum(terms) => {
                for (v, c) in terms {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv[0] += g[0] * c;
                    }
                }
            }
        }
    }
}
