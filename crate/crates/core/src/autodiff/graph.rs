use super::{gemm, shape_err, AutodiffError, Mat, Real, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batches: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    MaxAxis { a: Var, arg: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, rstd: Vec<T> },
    Gelu { a: Var },
    Gather { table: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Chamfer { pred: Var, gt: Var, nn_pred: Vec<usize>, nn_gt: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of tensor operations. Nodes are stored in creation
/// order, which is a topological order, so the backward pass walks it in
/// reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `out` with `out[j] = data[src(j)]` for the permuted layout.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient from the last [`Graph::backward`] call. `None` when the value
    /// does not depend on any parameter or was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally swaps the last two axes.
    ///
    /// Either both operands carry the same leading batch axes, or `b` is a
    /// matrix and the leading axes of `a` are folded into its rows.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err("matmul", format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (am, ak) = if ta { (sa[ra - 1], sa[ra - 2]) } else { (sa[ra - 2], sa[ra - 1]) };
        let (bk, bn) = if tb { (sb[rb - 1], sb[rb - 2]) } else { (sb[rb - 2], sb[rb - 1]) };
        if ak != bk {
            return Err(err());
        }
        let (batches, m, mut out_shape) = if rb == 2 && !ta {
            (1, sa[..ra - 1].iter().product::<usize>(), sa[..ra - 1].to_vec())
        } else if sa[..ra - 2] == sb[..rb - 2] {
            let mut s = sa[..ra - 2].to_vec();
            s.push(am);
            (sa[..ra - 2].iter().product(), am, s)
        } else {
            return Err(err());
        };
        out_shape.push(bn);
        let (k, n) = (ak, bn);
        let mut out = vec![T::zero(); batches * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batches {
                let av = view(&ad[bi * m * k..(bi + 1) * m * k], m, k, ta);
                let bv = if rb == 2 { view(bd, k, n, tb) } else { view(&bd[bi * k * n..(bi + 1) * k * n], k, n, tb) };
                gemm(&mut out[bi * m * n..(bi + 1) * m * n], av, bv, T::zero());
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, ta, tb, batches, m, k, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    // ----- elementwise -----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sa:?} and {sb:?}; the second shape must be a suffix of the first")));
        }
        let bd = self.value(b).data();
        let nb = bd.len().max(1);
        Ok(self.value(a).data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect())
    }

    /// `a + b`, broadcasting `b` over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(a);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x * s).collect() };
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, s }, rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| gelu_parts(x).0).collect() };
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    // ----- structural -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", format!("{first:?} and {s:?} along axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = around(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Rows of `table` (first axis) selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(shape_err("gather_rows", "scalar table".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(AutodiffError::Index { op: "gather_rows", detail: format!("row {bad} of {}", shape[0]) });
        }
        let row: usize = shape[1..].iter().product();
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let s = if d.is_empty() { T::zero() } else { d.iter().copied().sum::<T>() / T::of(d.len() as f64) };
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Maximum along `axis`, which is removed from the shape. Ties go to the
    /// first maximal element.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_over_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = around(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let at = (o * len + j) * inner + i;
                    if d[at] > d[best] {
                        best = at;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { a, arg }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = around(&shape, axis);
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance. Scale and
    /// shift are left to the caller.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().filter(|&&d| d > 0).ok_or_else(|| shape_err("layer_norm", format!("{shape:?}")))?;
        let x = self.value(a).data();
        let rows = x.len() / d;
        let mut out = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let s = (var + T::of(eps)).sqrt().recip();
            out.extend(row.iter().map(|&v| (v - mu) * s));
            rstd.push(s);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { a, rstd }, rg))
    }

    // ----- losses -----

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(shape_err("cross_entropy", format!("logits {shape:?} with {} targets", targets.len())));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Index { op: "cross_entropy", detail: format!("class {bad} of {c}") });
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            loss += z.ln() + mx - row[t];
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let n = T::of(targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / n), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Per-set symmetric Chamfer distance with squared Euclidean distances.
    /// `pred` is `[B, N, D]`, `gt` is `[B, M, D]`; the result has shape `[B]`.
    pub fn chamfer(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let (sp, sg) = (self.shape(pred).to_vec(), self.shape(gt).to_vec());
        if sp.len() != 3 || sg.len() != 3 || sp[0] != sg[0] || sp[2] != sg[2] || sp[1] == 0 || sg[1] == 0 {
            return Err(shape_err("chamfer", format!("{sp:?} vs {sg:?}")));
        }
        let (b, n, m, d) = (sp[0], sp[1], sg[1], sp[2]);
        let (p, g) = (self.value(pred).data(), self.value(gt).data());
        let dist = |bi: usize, i: usize, j: usize| -> T {
            let (pi, gj) = (&p[(bi * n + i) * d..(bi * n + i + 1) * d], &g[(bi * m + j) * d..(bi * m + j + 1) * d]);
            pi.iter().zip(gj).map(|(&x, &y)| (x - y) * (x - y)).sum()
        };
        let mut out = Vec::with_capacity(b);
        let mut nn_pred = Vec::with_capacity(b * n);
        let mut nn_gt = Vec::with_capacity(b * m);
        for bi in 0..b {
            let mut best_g = vec![(T::infinity(), 0usize); m];
            let mut sum_p = T::zero();
            for i in 0..n {
                let mut best = (T::infinity(), 0usize);
                for (j, bg) in best_g.iter_mut().enumerate() {
                    let dd = dist(bi, i, j);
                    if dd < best.0 {
                        best = (dd, j);
                    }
                    if dd < bg.0 {
                        *bg = (dd, i);
                    }
                }
                sum_p += best.0;
                nn_pred.push(best.1);
            }
            let sum_g: T = best_g.iter().map(|x| x.0).sum();
            nn_gt.extend(best_g.iter().map(|x| x.1));
            out.push(sum_p / T::of(n as f64) + sum_g / T::of(m as f64));
        }
        let rg = self.rg(pred) || self.rg(gt);
        Ok(self.push(Tensor::new(vec![b], out)?, Op::Chamfer { pred, gt, nn_pred, nn_gt }, rg))
    }

    // ----- backward -----

    /// Populates gradients of `loss` with respect to every value that
    /// depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                backprop(&self.nodes, &mut self.grads, i, g.data());
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> Mat<'_, T> {
    if transposed {
        Mat::row_major(data, cols, rows).t()
    } else {
        Mat::row_major(data, rows, cols)
    }
}

fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let s = &mut grads[v.0];
    Some(s.get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())).data_mut())
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb, batches, m, k, n } => {
            let (ad, bd) = (val(a), val(b));
            let b_shared = nodes[b.0].value.shape().len() == 2 && batches == 1;
            for bi in 0..batches {
                let gc = Mat::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                let a_range = bi * m * k..(bi + 1) * m * k;
                let b_range = if b_shared { 0..k * n } else { bi * k * n..(bi + 1) * k * n };
                let opa = view(&ad[a_range.clone()], m, k, ta);
                let opb = view(&bd[b_range.clone()], k, n, tb);
                if let Some(da) = slot(nodes, grads, a) {
                    let da = &mut da[a_range];
                    if ta {
                        gemm(da, opb, gc.t(), T::one());
                    } else {
                        gemm(da, gc, opb.t(), T::one());
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    let db = &mut db[b_range];
                    if tb {
                        gemm(db, gc.t(), opa, T::one());
                    } else {
                        gemm(db, opa.t(), gc, T::one());
                    }
                }
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -T::one() } else { T::one() };
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = slot(nodes, grads, b) {
                let nb = db.len().max(1);
                for (j, &x) in g.iter().enumerate() {
                    db[j % nb] += sign * x;
                }
            }
        }
        &Op::Mul { a, b } => {
            let (ad, bd) = (val(a).to_vec(), val(b).to_vec());
            let nb = bd.len().max(1);
            if let Some(da) = slot(nodes, grads, a) {
                for (j, &x) in g.iter().enumerate() {
                    da[j] += x * bd[j % nb];
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (j, &x) in g.iter().enumerate() {
                    db[j % nb] += x * ad[j];
                }
            }
        }
        &Op::Scale { a, s } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
            }
        }
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (j, &p) in perm.iter().enumerate() {
                inv[p] = j;
            }
            let (back, _) = permute_data(g, nodes[i].value.shape(), &inv);
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(back).for_each(|(d, x)| *d += x);
            }
        }
        &Op::Reshape { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = around(nodes[i].value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if let Some(dp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        dp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, len, inner) = around(nodes[a.0].value.shape(), axis);
            let w = nodes[i].value.shape()[axis];
            if let Some(da) = slot(nodes, grads, a) {
                for o in 0..outer {
                    let dst = &mut da[(o * len + start) * inner..(o * len + start + w) * inner];
                    dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]).for_each(|(d, &x)| *d += x);
                }
            }
        }
        &Op::Sum { a } | &Op::Mean { a } => {
            let n = val(a).len().max(1);
            let s = if matches!(nodes[i].op, Op::Mean { .. }) { g[0] / T::of(n as f64) } else { g[0] };
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MaxAxis { a, arg } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (&at, &x) in arg.iter().zip(g) {
                    da[at] += x;
                }
            }
        }
        &Op::Softmax { a, axis } => {
            let y = nodes[i].value.data();
            let (outer, len, inner) = around(nodes[i].value.shape(), axis);
            if let Some(da) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let y = nodes[i].value.data();
            let d = *nodes[i].value.shape().last().expect("non-scalar");
            let inv_d = T::of(1.0 / d as f64);
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, &s) in rstd.iter().enumerate() {
                    let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mg = gy.iter().copied().sum::<T>() * inv_d;
                    let mgy = gy.iter().zip(yy).map(|(&u, &v)| u * v).sum::<T>() * inv_d;
                    for j in 0..d {
                        da[r * d + j] += s * (gy[j] - mg - yy[j] * mgy);
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            let x = val(a);
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &xv), &gv) in da.iter_mut().zip(x).zip(g) {
                    *d += gv * gelu_parts(xv).1;
                }
            }
        }
        Op::Gather { table, idx } => {
            let row: usize = nodes[table.0].value.shape()[1..].iter().product();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &t) in idx.iter().enumerate() {
                    dt[t * row..(t + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = nodes[logits.0].value.shape()[1];
            let s = g[0] / T::of(targets.len() as f64);
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Chamfer { pred, gt, nn_pred, nn_gt } => {
            let (sp, sg) = (nodes[pred.0].value.shape(), nodes[gt.0].value.shape());
            let (b, n, m, d) = (sp[0], sp[1], sg[1], sp[2]);
            let (p, q) = (val(*pred).to_vec(), val(*gt).to_vec());
            let two = T::of(2.0);
            // d/dp of |p - q|^2 is 2 (p - q); accumulate on both ends
            let mut dp = vec![T::zero(); p.len()];
            let mut dq = vec![T::zero(); q.len()];
            for bi in 0..b {
                let wp = g[bi] * two / T::of(n as f64);
                let wg = g[bi] * two / T::of(m as f64);
                for ii in 0..n {
                    let j = nn_pred[bi * n + ii];
                    for c in 0..d {
                        let diff = p[(bi * n + ii) * d + c] - q[(bi * m + j) * d + c];
                        dp[(bi * n + ii) * d + c] += wp * diff;
                        dq[(bi * m + j) * d + c] -= wp * diff;
                    }
                }
                for j in 0..m {
                    let ii = nn_gt[bi * m + j];
                    for c in 0..d {
                        let diff = p[(bi * n + ii) * d + c] - q[(bi * m + j) * d + c];
                        dp[(bi * n + ii) * d + c] += wg * diff;
                        dq[(bi * m + j) * d + c] -= wg * diff;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *pred) {
                s.iter_mut().zip(dp).for_each(|(d, x)| *d += x);
            }
            if let Some(s) = slot(nodes, grads, *gt) {
                s.iter_mut().zip(dq).for_each(|(d, x)| *d += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        t(shape, &(0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_shape_law_and_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert_eq!(g.value(c).data(), &[32.0, 38.0, 44.0, 50.0, 68.0, 83.0, 98.0, 113.0]);
        let bad = g.input(t(&[2, 4], &[0.0; 8]));
        let err = g.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn batched_and_transposed_matmul_agree() {
        let mut g = Graph::<f64>::new();
        let a = g.input(seq(&[2, 3, 4]));
        let b = g.input(seq(&[2, 5, 4]));
        let c = g.matmul_t(a, b, false, true).unwrap();
        let bt = g.transpose(b).unwrap();
        let c2 = g.matmul(a, bt).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 5]);
        assert_eq!(g.value(c), g.value(c2));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.input(seq(&[4, 7]).cast());
        for axis in [0, 1] {
            let y = g.softmax(x, axis).unwrap();
            let d = g.value(y).data();
            let (outer, len, inner) = around(&[4, 7], axis);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f32 = (0..len).map(|j| d[(o * len + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::<f64>::new();
        let x = g.input(seq(&[3, 16]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(seq(&[2, 3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum(sq);
        g.backward(s2).unwrap();
        for (gv, xv) in g.grad(x).unwrap().data().iter().zip(g.value(x).data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(seq(&[2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn permute_roundtrip_and_concat_slice() {
        let mut g = Graph::<f64>::new();
        let x = g.input(seq(&[2, 3, 4]));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (i,j,k) of x lands at (k,i,j)
        assert_eq!(g.value(p).data()[3 * 2 * 3 + 1 * 3 + 2], g.value(x).data()[1 * 12 + 2 * 4 + 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 3).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        assert!(g.slice(x, 1, 2, 4).is_err());
    }

    #[test]
    fn gather_and_max() {
        let mut g = Graph::<f64>::new();
        let table = g.param(t(&[3, 2], &[1.0, 5.0, 3.0, 2.0, 0.0, 4.0]));
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[0.0, 4.0, 1.0, 5.0, 0.0, 4.0]);
        let mx = g.max_over_axis(table, 0).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0, 5.0]);
        let s = g.sum(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap().data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn chamfer_singleton() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[1, 1, 3], &[0.0, 0.0, 0.0]));
        let q = g.input(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let c = g.chamfer(p, q).unwrap();
        assert_eq!(g.value(c).data(), &[2.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[-4.0, 0.0, 0.0]);
        assert!(g.grad(q).is_none());
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let x = g.param(seq(&[3, 2]));
        let b = g.param(t(&[2], &[10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data()[3], g.value(x).data()[3] + 20.0);
        assert!(g.add(b, x).is_err());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
    }
}
