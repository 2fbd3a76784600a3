//! Tape-based reverse-mode autodiff.
//!
//! A `Graph` records one forward pass; `backward` walks the tape in
//! reverse and accumulates gradients. Graphs are built per training step
//! and discarded. All ops validate shapes and report the offending dims.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<S> = Box<dyn FnOnce(&[Tensor<S>], &Tensor<S>, &mut dyn FnMut(usize, Tensor<S>))>;

struct Node<S> {
    back: Option<BackFn<S>>,
    _parents: Vec<usize>,
}

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

fn shape_err(op: &str, shapes: &[[usize; 2]]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {shapes:?}"))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, parents: Vec<usize>, back: Option<BackFn<S>>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { back, _parents: parents });
        Var(self.values.len() - 1)
    }

    /// Registers an input (parameter or constant). Gradients flow into it
    /// and can be read back after `backward`.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, vec![], None)
    }

    pub fn scalar_input(&mut self, x: S) -> Var {
        self.input(Tensor::scalar(x))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape, self.values[b.0].shape);
        if sa != sb {
            return Err(shape_err("add", &[sa, sb]));
        }
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor { shape: sa, data, grad: None };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_vals, g, acc| {
                acc(a.0, g.clone());
                acc(b.0, g.clone());
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape, self.values[b.0].shape);
        if sa != sb {
            return Err(shape_err("sub", &[sa, sb]));
        }
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor { shape: sa, data, grad: None };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_vals, g, acc| {
                acc(a.0, g.clone());
                let mut neg = g.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                acc(b.0, neg);
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape, self.values[b.0].shape);
        if sa != sb {
            return Err(shape_err("mul", &[sa, sb]));
        }
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor { shape: sa, data, grad: None };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |vals, g, acc| {
                let mut ga = g.clone();
                for (gv, bv) in ga.data.iter_mut().zip(&vals[b.0].data) {
                    *gv = *gv * *bv;
                }
                acc(a.0, ga);
                let mut gb = g.clone();
                for (gv, av) in gb.data.iter_mut().zip(&vals[a.0].data) {
                    *gv = *gv * *av;
                }
                acc(b.0, gb);
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = S::fl(c);
        let mut value = self.values[a.0].clone();
        for v in &mut value.data {
            *v = *v * k;
        }
        value.grad = None;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut ga = g.clone();
                for v in &mut ga.data {
                    *v = *v * k;
                }
                acc(a.0, ga);
            })),
        )
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let k = S::fl(c);
        let mut value = self.values[a.0].clone();
        for v in &mut value.data {
            *v = *v + k;
        }
        value.grad = None;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_vals, g, acc| acc(a.0, g.clone()))),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.values[a.0].clone();
        for v in &mut value.data {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        value.grad = None;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |vals, g, acc| {
                let mut ga = g.clone();
                for (gv, xv) in ga.data.iter_mut().zip(&vals[a.0].data) {
                    if *xv <= S::zero() {
                        *gv = S::zero();
                    }
                }
                acc(a.0, ga);
            })),
        )
    }

    /// `ln(max(x, 1e-20))` elementwise; gradient is 0 in the clamped region.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let floor = S::fl(1e-20);
        let mut value = self.values[a.0].clone();
        for v in &mut value.data {
            *v = v.max(floor).ln();
        }
        value.grad = None;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |vals, g, acc| {
                let mut ga = g.clone();
                for (gv, xv) in ga.data.iter_mut().zip(&vals[a.0].data) {
                    if *xv > floor {
                        *gv = *gv / *xv;
                    } else {
                        *gv = S::zero();
                    }
                }
                acc(a.0, ga);
            })),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let mut value = self.values[a.0].clone();
        for v in &mut value.data {
            let x = *v;
            let pos = x.max(S::zero());
            *v = pos + ((-x.abs()).exp() + S::one()).ln();
        }
        value.grad = None;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |vals, g, acc| {
                let mut ga = g.clone();
                for (gv, xv) in ga.data.iter_mut().zip(&vals[a.0].data) {
                    // sigmoid(x), stable in both tails
                    let x = *xv;
                    let sig = if x >= S::zero() {
                        S::one() / (S::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (S::one() + e)
                    };
                    *gv = *gv * sig;
                }
                acc(a.0, ga);
            })),
        )
    }

    /// Sums k same-shaped tensors.
    pub fn add_list(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err("add_list", &[]))?;
        let shape = self.values[first.0].shape;
        let mut data = vec![S::zero(); shape[0] * shape[1]];
        for v in vars {
            if self.values[v.0].shape != shape {
                return Err(shape_err("add_list", &[shape, self.values[v.0].shape]));
            }
            for (d, x) in data.iter_mut().zip(&self.values[v.0].data) {
                *d = *d + *x;
            }
        }
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let parents_for_back = parents.clone();
        Ok(self.push(
            Tensor { shape, data, grad: None },
            parents,
            Some(Box::new(move |_vals, g, acc| {
                for pid in parents_for_back {
                    acc(pid, g.clone());
                }
            })),
        ))
    }

    /// Mean of a list of scalars.
    pub fn mean_list(&mut self, vars: &[Var]) -> Result<Var> {
        let sum = self.add_list(vars)?;
        Ok(self.scale(sum, 1.0 / vars.len() as f64))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: S = self.values[a.0].data.iter().copied().sum();
        let shape = self.values[a.0].shape;
        self.push(
            Tensor::scalar(total),
            vec![a.0],
            Some(Box::new(move |_vals, g, acc| {
                let gv = g.scalar_value();
                acc(a.0, Tensor { shape, data: vec![gv; shape[0] * shape[1]], grad: None });
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column-wise mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let [m, n] = self.values[a.0].shape;
        let mut data = vec![S::zero(); n];
        for r in 0..m {
            for c in 0..n {
                data[c] = data[c] + self.values[a.0].get(r, c);
            }
        }
        let inv = S::fl(1.0 / m as f64);
        for d in &mut data {
            *d = *d * inv;
        }
        self.push(
            Tensor { shape: [1, n], data, grad: None },
            vec![a.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut out = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        out.set(r, c, g.data[c] * inv);
                    }
                }
                acc(a.0, out);
            })),
        )
    }

    /// Picks a single element as a `[1, 1]` scalar.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let [m, n] = self.values[a.0].shape;
        if r >= m || c >= n {
            return Err(Error::Shape(format!("pick ({r}, {c}) from [{m}, {n}]")));
        }
        let v = self.values[a.0].get(r, c);
        Ok(self.push(
            Tensor::scalar(v),
            vec![a.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut out = Tensor::zeros(m, n);
                out.set(r, c, g.scalar_value());
                acc(a.0, out);
            })),
        ))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.values[a.0].shape, self.values[b.0].shape);
        if k != k2 {
            return Err(shape_err("matmul", &[[m, k], [k2, n]]));
        }
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aik = av.data[i * k + p];
                let brow = &bv.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o = *o + aik * bval;
                }
            }
        }
        Ok(self.push(
            Tensor { shape: [m, n], data: out, grad: None },
            vec![a.0, b.0],
            Some(Box::new(move |vals, g, acc| {
                // dA = G B^T
                let mut da = Tensor::zeros(m, k);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc_v = S::zero();
                        let grow = &g.data[i * n..(i + 1) * n];
                        let brow = &vals[b.0].data[p * n..(p + 1) * n];
                        for (gv, bv2) in grow.iter().zip(brow) {
                            acc_v = acc_v + *gv * *bv2;
                        }
                        da.set(i, p, acc_v);
                    }
                }
                acc(a.0, da);
                // dB = A^T G
                let mut db = Tensor::zeros(k, n);
                for p in 0..k {
                    for i in 0..m {
                        let api = vals[a.0].data[i * k + p];
                        let grow = &g.data[i * n..(i + 1) * n];
                        let drow = &mut db.data[p * n..(p + 1) * n];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d = *d + api * *gv;
                        }
                    }
                }
                acc(b.0, db);
            })),
        ))
    }

    /// `A B^T` where `a: [m, k]`, `b: [n, k]` -> `[m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [n, k2]) = (self.values[a.0].shape, self.values[b.0].shape);
        if k != k2 {
            return Err(shape_err("matmul_nt", &[[m, k], [n, k2]]));
        }
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc_v = S::zero();
                let arow = &av.data[i * k..(i + 1) * k];
                let brow = &bv.data[j * k..(j + 1) * k];
                for (x, y) in arow.iter().zip(brow) {
                    acc_v = acc_v + *x * *y;
                }
                out[i * n + j] = acc_v;
            }
        }
        Ok(self.push(
            Tensor { shape: [m, n], data: out, grad: None },
            vec![a.0, b.0],
            Some(Box::new(move |vals, g, acc| {
                // dA = G B
                let mut da = Tensor::zeros(m, k);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data[i * n + j];
                        let brow = &vals[b.0].data[j * k..(j + 1) * k];
                        let drow = &mut da.data[i * k..(i + 1) * k];
                        for (d, bv2) in drow.iter_mut().zip(brow) {
                            *d = *d + gij * *bv2;
                        }
                    }
                }
                acc(a.0, da);
                // dB = G^T A
                let mut db = Tensor::zeros(n, k);
                for j in 0..n {
                    for i in 0..m {
                        let gij = g.data[i * n + j];
                        let arow = &vals[a.0].data[i * k..(i + 1) * k];
                        let drow = &mut db.data[j * k..(j + 1) * k];
                        for (d, av2) in drow.iter_mut().zip(arow) {
                            *d = *d + gij * *av2;
                        }
                    }
                }
                acc(b.0, db);
            })),
        ))
    }

    /// Broadcast row-vector add: `x: [m, n] + b: [1, n]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let ([m, n], sb) = (self.values[x.0].shape, self.values[b.0].shape);
        if sb != [1, n] {
            return Err(shape_err("bias_add", &[[m, n], sb]));
        }
        let mut value = self.values[x.0].clone();
        for r in 0..m {
            for c in 0..n {
                let v = value.get(r, c) + self.values[b.0].data[c];
                value.set(r, c, v);
            }
        }
        value.grad = None;
        Ok(self.push(
            value,
            vec![x.0, b.0],
            Some(Box::new(move |_vals, g, acc| {
                acc(x.0, g.clone());
                let mut db = Tensor::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        db.data[c] = db.data[c] + g.get(r, c);
                    }
                }
                acc(b.0, db);
            })),
        ))
    }

    /// Row lookup (embedding): rows of `table` at `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [m, n] = self.values[table.0].shape;
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Label { label: bad, num_items: m });
        }
        let mut out = Tensor::zeros(ids.len(), n);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * n..(r + 1) * n].copy_from_slice(self.values[table.0].row_slice(id));
        }
        let ids_owned = ids.to_vec();
        Ok(self.push(
            out,
            vec![table.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dt = Tensor::zeros(m, n);
                for (r, &id) in ids_owned.iter().enumerate() {
                    for c in 0..n {
                        let v = dt.get(id, c) + g.get(r, c);
                        dt.set(id, c, v);
                    }
                }
                acc(table.0, dt);
            })),
        ))
    }

    /// Column slice `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.values[x.0].shape;
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} > {n}")));
        }
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&self.values[x.0].row_slice(r)[start..start + len]);
        }
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..len {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                acc(x.0, dx);
            })),
        ))
    }

    /// Horizontal concat of same-row-count tensors.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err("concat_cols", &[]))?;
        let m = self.values[first.0].rows();
        let widths: Vec<usize> = vars.iter().map(|v| self.values[v.0].cols()).collect();
        if vars.iter().any(|v| self.values[v.0].rows() != m) {
            let shapes: Vec<[usize; 2]> = vars.iter().map(|v| self.values[v.0].shape).collect();
            return Err(shape_err("concat_cols", &shapes));
        }
        let n: usize = widths.iter().sum();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let mut off = 0;
            for (v, &w) in vars.iter().zip(&widths) {
                out.data[r * n + off..r * n + off + w]
                    .copy_from_slice(self.values[v.0].row_slice(r));
                off += w;
            }
        }
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let parents_back = parents.clone();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |_vals, g, acc| {
                let mut off = 0;
                for (pid, &w) in parents_back.iter().zip(&widths) {
                    let mut dp = Tensor::zeros(m, w);
                    for r in 0..m {
                        dp.data[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data[r * n + off..r * n + off + w]);
                    }
                    acc(*pid, dp);
                    off += w;
                }
            })),
        ))
    }

    /// Vertical stack of `[1, d]` rows into `[k, d]`.
    pub fn stack_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err("stack_rows", &[]))?;
        let d = self.values[first.0].cols();
        if vars.iter().any(|v| self.values[v.0].shape != [1, d]) {
            let shapes: Vec<[usize; 2]> = vars.iter().map(|v| self.values[v.0].shape).collect();
            return Err(shape_err("stack_rows", &shapes));
        }
        let k = vars.len();
        let mut out = Tensor::zeros(k, d);
        for (r, v) in vars.iter().enumerate() {
            out.data[r * d..(r + 1) * d].copy_from_slice(&self.values[v.0].data);
        }
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let parents_back = parents.clone();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |_vals, g, acc| {
                for (r, pid) in parents_back.iter().enumerate() {
                    acc(*pid, Tensor {
                        shape: [1, d],
                        data: g.data[r * d..(r + 1) * d].to_vec(),
                        grad: None,
                    });
                }
            })),
        ))
    }

    // ---- normalization / softmax ----

    /// Row-wise softmax with max-shift stabilization.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let [m, n] = self.values[x.0].shape;
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            softmax_into(self.values[x.0].row_slice(r), &mut out.data[r * n..(r + 1) * n]);
        }
        let probs = out.clone();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let p = &probs.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let dot: S = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for c in 0..n {
                        dx.set(r, c, p[c] * (gr[c] - dot));
                    }
                }
                acc(x.0, dx);
            })),
        )
    }

    /// Causal row softmax over a square score matrix: row i is a softmax
    /// over columns `0..=i`; masked entries are exactly 0, so position i
    /// never depends on inputs at positions > i.
    pub fn causal_row_softmax(&mut self, x: Var) -> Result<Var> {
        let [m, n] = self.values[x.0].shape;
        if m != n {
            return Err(shape_err("causal_row_softmax", &[[m, n]]));
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            softmax_into(
                &self.values[x.0].row_slice(r)[..=r],
                &mut out.data[r * n..r * n + r + 1],
            );
        }
        let probs = out.clone();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let p = &probs.data[r * n..r * n + r + 1];
                    let gr = &g.data[r * n..r * n + r + 1];
                    let dot: S = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for c in 0..=r {
                        dx.set(r, c, p[c] * (gr[c] - dot));
                    }
                }
                acc(x.0, dx);
            })),
        ))
    }

    /// Per-row `ln sum exp`: `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let [m, n] = self.values[x.0].shape;
        let mut out = Tensor::zeros(m, 1);
        for r in 0..m {
            let row = self.values[x.0].row_slice(r);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let s: S = row.iter().map(|&v| (v - mx).exp()).sum();
            out.data[r] = mx + s.ln();
        }
        let xval = self.values[x.0].clone();
        let lse = out.clone();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let gr = g.data[r];
                    for c in 0..n {
                        dx.set(r, c, gr * (xval.get(r, c) - lse.data[r]).exp());
                    }
                }
                acc(x.0, dx);
            })),
        )
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, n] = self.values[x.0].shape;
        if self.values[gain.0].shape != [1, n] || self.values[bias.0].shape != [1, n] {
            return Err(shape_err(
                "layer_norm",
                &[[m, n], self.values[gain.0].shape, self.values[bias.0].shape],
            ));
        }
        let epsv = S::fl(eps);
        let mut out = Tensor::zeros(m, n);
        let mut xhat = Tensor::zeros(m, n);
        let mut inv_std = vec![S::zero(); m];
        for r in 0..m {
            let row = self.values[x.0].row_slice(r);
            let mean: S = row.iter().copied().sum::<S>() / S::fl(n as f64);
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::fl(n as f64);
            let inv = S::one() / (var + epsv).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                xhat.set(r, c, xh);
                out.set(r, c, xh * self.values[gain.0].data[c] + self.values[bias.0].data[c]);
            }
        }
        Ok(self.push(
            out,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |vals, g, acc| {
                let gainv = &vals[gain.0];
                let nf = S::fl(n as f64);
                let mut dx = Tensor::zeros(m, n);
                let mut dgain = Tensor::zeros(1, n);
                let mut dbias = Tensor::zeros(1, n);
                for r in 0..m {
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for c in 0..n {
                        let gv = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgain.data[c] = dgain.data[c] + gv * xh;
                        dbias.data[c] = dbias.data[c] + gv;
                        let dxh = gv * gainv.data[c];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                    }
                    for c in 0..n {
                        let dxh = g.get(r, c) * gainv.data[c];
                        let xh = xhat.get(r, c);
                        dx.set(
                            r,
                            c,
                            inv_std[r] * (dxh - sum_dxhat / nf - xh * sum_dxhat_xhat / nf),
                        );
                    }
                }
                acc(x.0, dx);
                acc(gain.0, dgain);
                acc(bias.0, dbias);
            })),
        ))
    }

    // ---- loss heads ----

    /// Per-row negative log-likelihood from logits: `[m, n]` + targets
    /// `[m]` -> `[m, 1]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [m, n] = self.values[logits.0].shape;
        if targets.len() != m {
            return Err(shape_err("nll_rows", &[[m, n], [targets.len(), 0]]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Label { label: bad, num_items: n });
        }
        let mut probs = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, 1);
        for r in 0..m {
            let row = self.values[logits.0].row_slice(r);
            softmax_into(row, &mut probs.data[r * n..(r + 1) * n]);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse: S = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            out.data[r] = lse - row[targets[r]];
        }
        let targets_owned = targets.to_vec();
        Ok(self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |_vals, g, acc| {
                let mut dl = Tensor::zeros(m, n);
                for r in 0..m {
                    let gr = g.data[r];
                    for c in 0..n {
                        let indicator = if c == targets_owned[r] { S::one() } else { S::zero() };
                        dl.set(r, c, gr * (probs.get(r, c) - indicator));
                    }
                }
                acc(logits.0, dl);
            })),
        ))
    }

    /// Forward value is the exact one-hot at the argmax of `soft`; the
    /// gradient passes through unchanged (straight-through estimator).
    pub fn straight_through_onehot(&mut self, soft: Var) -> Result<Var> {
        let [m, n] = self.values[soft.0].shape;
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = self.values[soft.0].row_slice(r);
            let arg = argmax(row);
            out.set(r, arg, S::one());
        }
        Ok(self.push(
            out,
            vec![soft.0],
            Some(Box::new(move |_vals, g, acc| acc(soft.0, g.clone()))),
        ))
    }

    // ---- engine ----

    /// Reverse pass from a scalar root. Gradients are then readable with
    /// `grad`. Consumes the tape; build a fresh graph per step.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].shape != [1, 1] {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.values[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = self.nodes[id].back.take() {
                let values = &self.values;
                back(values, &g, &mut |pid, contrib| {
                    debug_assert!(pid < id);
                    match &mut grads[pid] {
                        Some(existing) => {
                            for (e, c) in existing.data.iter_mut().zip(&contrib.data) {
                                *e = *e + *c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}
