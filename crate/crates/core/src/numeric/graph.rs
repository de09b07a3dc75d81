//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation as a node.
//! Parameters enter the tape through [`Graph::param`]; frozen parameters are
//! bound as constants, so no gradient is ever computed for them.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        ks: Vec<Var>,
        vs: Vec<Var>,
        heads: usize,
        offset: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// `None` for parameter leaves, whose values live in the store.
    value: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Gradient map over trainable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(ParamId, Vec<f64>)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    /// Zero gradients for each listed parameter.
    pub fn zeros_for(store: &ParamStore, ids: &[ParamId]) -> Self {
        let map = ids
            .iter()
            .map(|&id| (id, vec![0.0; store.get(id).len()]))
            .collect();
        Self { map }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, inserting parameters not yet present.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Squared L2 norm over the listed parameters (missing entries count as 0).
    pub fn sq_norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter().fold(0.0, |acc, id| {
            acc + self
                .map
                .get(id)
                .map(|g| g.iter().fold(0.0, |a, x| a + x * x))
                .unwrap_or(0.0)
        })
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// Graph that tracks gradients for every non-frozen parameter it binds.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            track: true,
        }
    }

    /// Graph that never tracks gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.store.get(*id).data(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = self.track && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        ensure!(
            value.len() == rows * cols,
            "constant of shape [{rows},{cols}] given {} values",
            value.len()
        );
        Ok(self.push(Op::Constant, rows, cols, value, &[]))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(Op::Constant, t.rows(), t.cols(), t.data().to_vec(), &[])
    }

    /// Binds a stored parameter (once per graph). Frozen parameters and all
    /// parameters of an inference graph enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        let requires_grad = self.track && !self.store.is_frozen(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            rows: t.rows(),
            cols: t.cols(),
            value: None,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = kernels::matmul(self.value(a), self.value(b), n, k, m);
        self.push(Op::MatMul(a, b), n, m, out, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, n, k, m);
        self.push(Op::MatMulNT(a, b), n, m, out, &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (r, c, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), r, c, out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), r, c, out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), r, c, out, &[a, b])
    }

    /// Adds the `[1, m]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "add_row expects a [1,{c}] row");
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(bv) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, b), r, c, out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), r, c, out, &[a])
    }

    /// Multiplies every entry of `a` by the `[1,1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let (r, c) = self.shape(a);
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        self.push(Op::ScaleBy(a, s), r, c, out, &[a, s])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(Op::Gelu(a), r, c, out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), r, c, out, &[a])
    }

    /// Row-wise layer normalization with learned gain and bias (`[1, d]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, d) = self.shape(x);
        assert_eq!(self.shape(gain), (1, d));
        assert_eq!(self.shape(bias), (1, d));
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().fold(0.0, |a, x| a + x) / d as f64;
            let var = row.iter().fold(0.0, |a, x| a + (x - mean) * (x - mean)) / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            r,
            d,
            out,
            &[x, gain, bias],
        )
    }

    /// Causal multi-head attention. `q` holds `n` query rows at absolute
    /// positions `offset..offset+n`; the key/value chunks, concatenated, hold
    /// exactly `offset + n` rows.
    pub fn attention(&mut self, q: Var, ks: &[Var], vs: &[Var], heads: usize, offset: usize) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(ks.len(), vs.len());
        assert_eq!(d % heads, 0);
        let k = self.concat_values(ks, d);
        let v = self.concat_values(vs, d);
        let t = k.len() / d;
        assert_eq!(t, offset + n, "attention expects {} key rows, got {t}", offset + n);
        let (out, probs) = kernels::attention_forward(self.value(q), &k, &v, n, t, d, heads, offset);
        let mut inputs = vec![q];
        inputs.extend_from_slice(ks);
        inputs.extend_from_slice(vs);
        self.push(
            Op::Attention {
                q,
                ks: ks.to_vec(),
                vs: vs.to_vec(),
                heads,
                offset,
                probs,
            },
            n,
            d,
            out,
            &inputs,
        )
    }

    fn concat_values(&self, parts: &[Var], cols: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).1, cols);
            out.extend_from_slice(self.value(p));
        }
        out
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "gather index {i} out of {rows}");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ids.len(),
            d,
            out,
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let d = self.shape(parts[0]).1;
        let out = self.concat_values(parts, d);
        let rows = out.len() / d;
        self.push(Op::ConcatRows(parts.to_vec()), rows, d, out, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start < end && end <= r, "slice {start}..{end} of {r} rows");
        let out = self.value(a)[start * c..end * c].to_vec();
        self.push(Op::SliceRows(a, start), end - start, c, out, &[a])
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                assert!(j < c);
                out.push(av[i * c + j]);
            }
        }
        self.push(Op::SelectCols(a, cols.to_vec()), r, cols.len(), out, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        {
            let av = self.value(a);
            for i in 0..r {
                kernels::softmax_into(&av[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
        }
        self.push(Op::SoftmaxRows(a), r, c, out, &[a])
    }

    /// Divides each row by `max(‖row‖, eps)`. Returns the node and whether any
    /// row hit the clamp.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> (Var, bool) {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        let mut clamped = vec![false; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let raw = kernels::dot(row, row).sqrt();
            clamped[i] = raw < eps;
            let n = raw.max(eps);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let any = clamped.iter().any(|&b| b);
        (
            self.push(Op::L2NormalizeRows { x, norms, clamped }, r, c, out, &[x]),
            any,
        )
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, v) = self.shape(logits);
        assert_eq!(r, targets.len());
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        for i in 0..r {
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[targets[i]];
            kernels::softmax_into(row, &mut probs[i * v..(i + 1) * v]);
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            1,
            1,
            vec![total],
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(0.0, |acc, x| acc + x);
        self.push(Op::Sum(a), 1, 1, vec![s], &[a])
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every
    /// trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.shape(loss) == (1, 1),
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        self.acc(grads, v, |slot| {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        });
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                out.map.insert(*id, g.to_vec());
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                if self.requires_grad(*a) {
                    let av = self.value(*b);
                    self.acc(grads, *a, |slot| kernels::matmul_nt_acc(g, av, slot, n, m, k));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    self.acc(grads, *b, |slot| kernels::matmul_tn_acc(av, g, slot, n, k, m));
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    self.acc(grads, *a, |slot| kernels::matmul_acc(g, bv, slot, n, m, k));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    self.acc(grads, *b, |slot| kernels::matmul_tn_acc(g, av, slot, n, m, k));
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                self.acc(grads, *b, |slot| {
                    for (s, x) in slot.iter_mut().zip(g) {
                        *s -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                self.acc(grads, *a, |slot| {
                    for ((s, x), y) in slot.iter_mut().zip(g).zip(bv) {
                        *s += x * y;
                    }
                });
                let av = self.value(*a);
                self.acc(grads, *b, |slot| {
                    for ((s, x), y) in slot.iter_mut().zip(g).zip(av) {
                        *s += x * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.add_into(grads, *a, g);
                let c = node.cols;
                self.acc(grads, *b, |slot| {
                    for row in g.chunks(c) {
                        for (s, x) in slot.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(grads, *a, |slot| {
                    for (s, x) in slot.iter_mut().zip(g) {
                        *s += x * f;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s)[0];
                self.acc(grads, *a, |slot| {
                    for (o, x) in slot.iter_mut().zip(g) {
                        *o += x * sv;
                    }
                });
                let av = self.value(*a);
                let ds = kernels::dot(g, av);
                self.acc(grads, *s, |slot| slot[0] += ds);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |slot| {
                    for ((s, x), &v) in slot.iter_mut().zip(g).zip(av) {
                        *s += x * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |slot| {
                    for ((s, x), &v) in slot.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *s += x;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.cols;
                let r = node.rows;
                let gv = self.value(*gain);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; r * d];
                    let mut dxhat = vec![0.0; d];
                    for i in 0..r {
                        let gi = &g[i * d..(i + 1) * d];
                        let hi = &xhat[i * d..(i + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gi[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hi[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (dxhat[j] - mean_d - hi[j] * mean_dh);
                        }
                    }
                    self.add_into(grads, *x, &dx);
                }
                self.acc(grads, *gain, |slot| {
                    for i in 0..r {
                        for j in 0..d {
                            slot[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |slot| {
                    for row in g.chunks(d) {
                        for (s, x) in slot.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                ks,
                vs,
                heads,
                offset,
                probs,
            } => {
                let d = node.cols;
                let n = node.rows;
                let k = self.concat_values(ks, d);
                let v = self.concat_values(vs, d);
                let t = k.len() / d;
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                kernels::attention_backward(
                    self.value(*q),
                    &k,
                    &v,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    n,
                    t,
                    d,
                    *heads,
                    *offset,
                );
                self.add_into(grads, *q, &dq);
                let mut start = 0;
                for (&kc, &vc) in ks.iter().zip(vs) {
                    let rows = self.shape(kc).0;
                    self.add_into(grads, kc, &dk[start * d..(start + rows) * d]);
                    self.add_into(grads, vc, &dv[start * d..(start + rows) * d]);
                    start += rows;
                }
            }
            Op::Gather { table, ids } => {
                let d = node.cols;
                self.acc(grads, *table, |slot| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            slot[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let d = node.cols;
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    self.add_into(grads, p, &g[start * d..(start + rows) * d]);
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                let s = *start;
                self.acc(grads, *a, |slot| {
                    for (o, x) in slot[s * c..s * c + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::SelectCols(a, cols) => {
                let c = self.shape(*a).1;
                let w = cols.len();
                self.acc(grads, *a, |slot| {
                    for i in 0..node.rows {
                        for (jj, &j) in cols.iter().enumerate() {
                            slot[i * c + j] += g[i * w + jj];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let y = node.value.as_ref().expect("softmax value");
                self.acc(grads, *a, |slot| {
                    for i in 0..node.rows {
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let dotp = kernels::dot(yi, gi);
                        for j in 0..c {
                            slot[i * c + j] += yi[j] * (gi[j] - dotp);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms, clamped } => {
                let c = node.cols;
                let y = node.value.as_ref().expect("normalize value");
                self.acc(grads, *x, |slot| {
                    for i in 0..node.rows {
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let inv = 1.0 / norms[i];
                        if clamped[i] {
                            for j in 0..c {
                                slot[i * c + j] += gi[j] * inv;
                            }
                        } else {
                            let dotp = kernels::dot(yi, gi);
                            for j in 0..c {
                                slot[i * c + j] += (gi[j] - yi[j] * dotp) * inv;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits).1;
                let scale = g[0];
                self.acc(grads, *logits, |slot| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            slot[i * v + j] += (probs[i * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(grads, *a, |slot| {
                    for o in slot.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, s, d)| store.insert(*n, Tensor::new(s.clone(), d.clone()).unwrap()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (store, ids) = store_with(&[("x", vec![1, 3], vec![0.3, -1.0, 2.0])]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square() {
        let (store, ids) = store_with(&[("x", vec![1, 1], vec![2.0])]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, ids) = store_with(&[("x", vec![1, 2], vec![1.0, 2.0])]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let (mut store, ids) = store_with(&[
            ("w", vec![1, 2], vec![1.0, 2.0]),
            ("x", vec![1, 2], vec![3.0, 4.0]),
        ]);
        store.freeze(ids[0]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let x = g.param(ids[1]);
        let y = g.mul(w, x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(!grads.contains(ids[0]));
        assert_eq!(grads.get(ids[1]).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let (store, ids) = store_with(&[("x", vec![1, 1], vec![2.0])]);
        let mut g = Graph::inference(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x);
        assert!(g.backward(y).unwrap().is_empty());
    }
}
