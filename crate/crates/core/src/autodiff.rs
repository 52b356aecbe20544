//! Minimal reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced from a [`ParamStore`] rather than copied. `backward` walks the
//! tape in reverse creation order, which is a valid topological order.

use std::sync::Arc;

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{matmul_acc, t_matmul_acc, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Mat<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    /// Input and the elementwise derivative at it.
    Gelu(Var, Mat<T>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, rstd: Vec<T> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Attention { qkv: Var, heads: usize, allow: Arc<Vec<bool>>, probs: Vec<T> },
    Dropout(Var, Vec<T>),
    RowL2Normalize(Var, Vec<T>),
    MatMulT(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Mat<T> },
    TripletHinge { sim: Var, active: Vec<(usize, usize, usize, bool, bool)> },
    WeightedSum(Vec<(Var, T)>),
    Reshape(Var),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// Records one forward pass.
pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_and_grad<T: Real>(x: T) -> (T, T) {
    let k = T::c(0.797_884_560_802_865_4);
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    (half * x * (T::one() + t), half * (T::one() + t) + half * x * (T::one() - t * t) * du)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    gelu(x)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::with_capacity(256), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf (data or a perturbable input such as 2D features).
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated calls return the same [`Var`].
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars[id.index()]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a 1xm row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut deriv = Mat::zeros(x.rows(), x.cols());
        for ((o, d), &xv) in out.data_mut().iter_mut().zip(deriv.data_mut()).zip(x.data()) {
            (*o, *d) = gelu_and_grad(xv);
        }
        self.push(out, Op::Gelu(a, deriv))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        assert_eq!(g.len(), d, "layer_norm gamma width");
        let inv_d = T::one() / T::from_usize(d).expect("width");
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xhat.get(i, j) * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Column-wise max over each contiguous row segment. `segments` are `(start, len)`.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Mat::zeros(segments.len(), d);
        let mut argmax = vec![0usize; segments.len() * d];
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_max over an empty segment");
            let o = out.row_mut(s);
            o.copy_from_slice(xv.row(start));
            for a in argmax[s * d..(s + 1) * d].iter_mut() {
                *a = start;
            }
            for r in start + 1..start + len {
                for (j, &v) in xv.row(r).iter().enumerate() {
                    if v > o[j] {
                        o[j] = v;
                        argmax[s * d + j] = r;
                    }
                }
            }
        }
        self.push(out, Op::SegmentMax { x, argmax })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols height mismatch");
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Mat::zeros(n, ca + cb);
        for i in 0..n {
            out.row_mut(i)[..ca].copy_from_slice(av.row(i));
            out.row_mut(i)[ca..].copy_from_slice(bv.row(i));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        self.push(out, Op::GatherRows(table, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone();
        let out = Mat::from_vec(rows, cols, v.into_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `S×3d` (query, key and value blocks side by side); `allow` is a
    /// row-major `S×S` allow-matrix. Disallowed logits get [`Real::masked_logit`]
    /// added before the softmax, and disallowed values are skipped when mixing.
    pub fn attention(&mut self, qkv: Var, heads: usize, allow: Arc<Vec<bool>>) -> Var {
        let x = self.value(qkv);
        let s = x.rows();
        let d = x.cols() / 3;
        assert_eq!(x.cols(), 3 * d, "attention expects S x 3d input");
        assert_eq!(allow.len(), s * s, "attention mask is not S x S");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
        let masked = T::masked_logit();
        let mut probs = vec![T::zero(); heads * s * s];
        let mut out = Mat::zeros(s, d);
        let mut logits = vec![T::zero(); s];
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for q in 0..s {
                let qrow = &x.row(q)[qo..qo + dh];
                let mut mx = T::neg_infinity();
                for k in 0..s {
                    let mut l = crate::tensor::dot(qrow, &x.row(k)[ko..ko + dh]) * scale;
                    if !allow[q * s + k] {
                        l += masked;
                    }
                    logits[k] = l;
                    if l > mx {
                        mx = l;
                    }
                }
                let p = &mut probs[(h * s + q) * s..(h * s + q + 1) * s];
                let mut sum = T::zero();
                for k in 0..s {
                    let e = (logits[k] - mx).exp();
                    p[k] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for pk in p.iter_mut() {
                    *pk *= inv;
                }
                let orow = &mut out.row_mut(q)[qo..qo + dh];
                for k in 0..s {
                    if !allow[q * s + k] {
                        continue;
                    }
                    let w = p[k];
                    for (o, &v) in orow.iter_mut().zip(&x.row(k)[vo..vo + dh]) {
                        *o += w * v;
                    }
                }
            }
        }
        self.push(out, Op::Attention { qkv, heads, allow, probs })
    }

    /// Attention probabilities `[head][query][key]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let v = self.value(a);
        let mask: Vec<T> =
            (0..v.data().len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let mut out = v.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout(a, mask))
    }

    /// Row-wise L2 normalization; zero rows map to zero rows.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let n = crate::tensor::dot(v.row(i), v.row(i)).sqrt();
            norms.push(n);
            if n > T::zero() {
                for o in out.row_mut(i) {
                    *o /= n;
                }
            }
        }
        self.push(out, Op::RowL2Normalize(a, norms))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`, max-subtracted.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "softmax_xent needs one label per row");
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &l) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (l - mx).exp();
                sum += *p;
            }
            for p in probs.row_mut(i) {
                *p /= sum;
            }
            total += sum.ln() - (row[y] - mx);
        }
        let n = T::from_usize(labels.len().max(1)).expect("count");
        self.push(Mat::scalar(total / n), Op::SoftmaxXent { logits, labels: labels.to_vec(), probs })
    }

    /// Two-hinge triplet sum over mined `(m, i, j)` triples on a similarity
    /// matrix `sim[a][b] = s(F^O_a, F^I_b)`. Indices are treated as constants.
    pub fn triplet_hinge(&mut self, sim: Var, triples: &[(usize, usize, usize)], alpha: T) -> Var {
        let sv = self.value(sim);
        let mut total = T::zero();
        let mut active = Vec::with_capacity(triples.len());
        for &(m, i, j) in triples {
            let pos = sv.get(m, m);
            let h1 = alpha - pos + sv.get(m, i);
            let h2 = alpha - pos + sv.get(j, m);
            let a1 = h1 > T::zero();
            let a2 = h2 > T::zero();
            if a1 {
                total += h1;
            }
            if a2 {
                total += h2;
            }
            active.push((m, i, j, a1, a2));
        }
        self.push(Mat::scalar(total), Op::TripletHinge { sim, active })
    }

    /// `Σ wₖ·xₖ` over `1×1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), (1, 1), "weighted_sum expects scalars");
            total += w * x.get(0, 0);
        }
        self.push(Mat::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Mat::scalar(T::one()))
    }

    /// Reverse pass with an explicit seed gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Mat<T>) -> Grads<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        fn acc<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, m: Mat<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        }
        fn acc_with<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Mat<T>)) {
            let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
            f(slot);
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bt = bv.transpose();
                acc_with(grads, *a, av.shape(), |ga| matmul_acc(g, &bt, ga));
                acc_with(grads, *b, bv.shape(), |gb| t_matmul_acc(av, g, gb));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut gr = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(grads, *row, gr);
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::Gelu(a, deriv) => {
                let mut ga = g.clone();
                for (o, &dv) in ga.data_mut().iter_mut().zip(deriv.data()) {
                    *o *= dv;
                }
                acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).row(0).to_vec();
                let inv_d = T::one() / T::from_usize(d).expect("width");
                let mut gx = Mat::zeros(n, d);
                let mut gg = Mat::zeros(1, d);
                let mut gb = Mat::zeros(1, d);
                let mut dxh = vec![T::zero(); d];
                for i in 0..n {
                    let gr = g.row(i);
                    let xh = xhat.row(i);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dxh[j] = gr[j] * gam[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xh[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    let rs = rstd[i];
                    let o = gx.row_mut(i);
                    for j in 0..d {
                        o[j] = rs * (dxh[j] - m1 - xh[j] * m2);
                    }
                    let ggr = gg.row_mut(0);
                    for j in 0..d {
                        ggr[j] += gr[j] * xh[j];
                    }
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::SegmentMax { x, argmax } => {
                let shape = self.shape(*x);
                let d = g.cols();
                acc_with(grads, *x, shape, |gx| {
                    for s in 0..g.rows() {
                        for j in 0..d {
                            let r = argmax[s * d + j];
                            let cur = gx.get(r, j);
                            gx.set(r, j, cur + g.get(s, j));
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    acc(grads, p, g.slice_rows(start, r));
                    start += r;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = g.cols() - ca;
                let mut ga = Mat::zeros(g.rows(), ca);
                let mut gb = Mat::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                acc_with(grads, *a, shape, |ga| {
                    for i in 0..g.rows() {
                        for (o, &v) in ga.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let shape = self.shape(*table);
                acc_with(grads, *table, shape, |gt| {
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Mat::from_vec(r, c, g.data().to_vec()));
            }
            Op::Attention { qkv, heads, allow, probs } => {
                let x = self.value(*qkv);
                let s = x.rows();
                let d = x.cols() / 3;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
                let mut gx = Mat::zeros(s, 3 * d);
                let mut dp = vec![T::zero(); s];
                for h in 0..*heads {
                    let qo = h * dh;
                    let ko = d + h * dh;
                    let vo = 2 * d + h * dh;
                    for q in 0..s {
                        let p = &probs[(h * s + q) * s..(h * s + q + 1) * s];
                        let gout = &g.row(q)[qo..qo + dh];
                        let mut inner = T::zero();
                        for k in 0..s {
                            if !allow[q * s + k] {
                                dp[k] = T::zero();
                                continue;
                            }
                            dp[k] = crate::tensor::dot(gout, &x.row(k)[vo..vo + dh]);
                            inner += p[k] * dp[k];
                            let w = p[k];
                            let gv = &mut gx.row_mut(k)[vo..vo + dh];
                            for (o, &gg) in gv.iter_mut().zip(gout) {
                                *o += w * gg;
                            }
                        }
                        for k in 0..s {
                            if !allow[q * s + k] {
                                continue;
                            }
                            let ds = p[k] * (dp[k] - inner) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for t in 0..dh {
                                let kv = x.get(k, ko + t);
                                let qv = x.get(q, qo + t);
                                let cur = gx.get(q, qo + t);
                                gx.set(q, qo + t, cur + ds * kv);
                                let cur = gx.get(k, ko + t);
                                gx.set(k, ko + t, cur + ds * qv);
                            }
                        }
                    }
                }
                acc(grads, *qkv, gx);
            }
            Op::Dropout(a, mask) => {
                let mut ga = g.clone();
                for (o, &m) in ga.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(grads, *a, ga);
            }
            Op::RowL2Normalize(a, norms) => {
                let y = self.value_of_node(idx);
                let mut ga = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let n = norms[i];
                    if n <= T::zero() {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let proj = crate::tensor::dot(yr, gr);
                    for ((o, &yv), &gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * proj) / n;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                acc_with(grads, *a, av.shape(), |ga| matmul_acc(g, bv, ga));
                acc_with(grads, *b, bv.shape(), |gb| t_matmul_acc(g, av, gb));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let n = T::from_usize(labels.len().max(1)).expect("count");
                let scale = g.get(0, 0) / n;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let cur = gl.get(i, y);
                    gl.set(i, y, cur - T::one());
                }
                acc(grads, *logits, gl.scale(scale));
            }
            Op::TripletHinge { sim, active } => {
                let gs = g.get(0, 0);
                let shape = self.shape(*sim);
                acc_with(grads, *sim, shape, |gm| {
                    for &(m, i, j, a1, a2) in active {
                        if a1 {
                            gm.set(m, m, gm.get(m, m) - gs);
                            gm.set(m, i, gm.get(m, i) + gs);
                        }
                        if a2 {
                            gm.set(m, m, gm.get(m, m) - gs);
                            gm.set(j, m, gm.get(j, m) + gs);
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                let gs = g.get(0, 0);
                for &(v, w) in terms {
                    acc(grads, v, Mat::scalar(gs * w));
                }
            }
        }
    }

    fn value_of_node(&self, idx: usize) -> &Mat<T> {
        self.value(Var(idx))
    }
}
