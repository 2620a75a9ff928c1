//! Arena-backed Wengert tape.
//!
//! Every forward operation appends one node holding its output value and the
//! handles of its inputs. Because a node can only reference nodes recorded
//! before it, arena order is already a topological order, and `backward`
//! walks the arena once from the end.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Softmax(Var, usize),
    Normalize {
        x: Var,
        inv_std: Vec<T>,
        floored: Vec<bool>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of `v`, or `None` if `v` does not influence the loss through
    /// any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`.
fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ · b` with `a: m×k`, `b: m×n`.
fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(feature = "fault-injection")]
pub mod fault {
    //! Deliberate sign flips in selected backward rules.
    //!
    //! A site is active when named by the thread-local override or by the
    //! comma-separated `RPFEM_INJECT_FAULT` environment variable.

    use std::cell::RefCell;

    thread_local! {
        static OVERRIDE: RefCell<Option<String>> = const { RefCell::new(None) };
    }

    /// Force the given sites (comma-separated) on for the current thread.
    pub fn set_thread(sites: Option<&str>) {
        OVERRIDE.with(|o| *o.borrow_mut() = sites.map(str::to_owned));
    }

    pub(crate) fn active(site: &str) -> bool {
        let hit = |s: &str| s.split(',').any(|x| x.trim() == site);
        if OVERRIDE.with(|o| o.borrow().as_deref().is_some_and(hit)) {
            return true;
        }
        std::env::var("RPFEM_INJECT_FAULT").is_ok_and(|v| hit(&v))
    }
}

#[inline]
fn fault_sign<T: Scalar>(_site: &str) -> T {
    #[cfg(feature = "fault-injection")]
    if fault::active(_site) {
        return -T::one();
    }
    T::one()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, m, k], &[bb, k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        };
        if ba != bb || k != k2 {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * m * n);
        for t in 0..ba {
            out.extend(matmul_raw(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([ba, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn check_last_axis(&self, x: Var, v: Var, name: &'static str) -> Result<usize> {
        let w = self.value(x).last_dim();
        if self.shape(v) != [w] || self.shape(x).is_empty() {
            return Err(Error::dim(name, self.shape(x), self.shape(v)));
        }
        Ok(w)
    }

    /// `x + bias` with `bias` of the last-axis width, repeated over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = self.check_last_axis(x, bias, "add_bias")?;
        let bv = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % w])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// `x * gain` with `gain` of the last-axis width, repeated over leading axes.
    pub fn scale_cols(&mut self, x: Var, gain: Var) -> Result<Var> {
        let w = self.check_last_axis(x, gain, "scale_cols")?;
        let gv = self.value(gain).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % w])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(t, Op::ScaleCols(x, gain), rg))
    }

    /// Multiplies row `r` of `x` (viewed as `[rows, last_dim]`) by `s[r]`.
    /// `s` must hold exactly one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        let rows = self.value(x).len() / w.max(1);
        if self.value(s).len() != rows {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / w])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleRows(x, s), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if slope <= T::zero() {
            return Err(Error::Contract("leaky_relu slope must be > 0".into()));
        }
        let t = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LeakyRelu(x, slope), rg))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (xd[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    /// Per-row standardization over the last axis: `(x - mean) / sqrt(max(var, eps))`
    /// with the population variance. This is layer normalization before the
    /// affine step. Rows whose variance is at least `eps` come out with unit
    /// variance exactly; flatter rows are divided by `sqrt(eps)` instead.
    pub fn normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer norm eps must be > 0".into()));
        }
        let xv = self.value(x);
        let w = xv.last_dim();
        if w == 0 {
            return Err(Error::Contract("cannot normalize an empty axis".into()));
        }
        let rows = xv.len() / w;
        let nw = T::of(w as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nw;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
            let is = T::one() / var.max(eps).sqrt();
            inv_std.push(is);
            floored.push(var < eps);
            out.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Normalize {
                x,
                inv_std,
                floored,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let g = self.scale_cols(n, gain)?;
        self.add_bias(g, bias)
    }

    /// `x · w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Concatenation along `axis`. Shapes must agree on every other axis.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects slices along axis 0: `out[r] = x[index[r]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&rows, rest)) = shape.split_first() else {
            return Err(Error::Contract("gather on a scalar".into()));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let w: usize = rest.iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&xd[i * w..(i + 1) * w]);
        }
        let mut oshape = vec![index.len()];
        oshape.extend_from_slice(rest);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Slice `start..start + len` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if start + len > w || xv.rank() == 0 {
            return Err(Error::Contract(format!(
                "narrow {start}..{} out of range for width {w}",
                start + len
            )));
        }
        let rows = xv.len() / w;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, start, len }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean softmax cross-entropy of `logits: [M×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::dim("cross_entropy", &[m, k], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!(
                "target {t} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(m * k);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            loss += lz - row[t];
            probs.extend(row.iter().map(|&v| (v - lz).exp()));
        }
        loss /= T::of(m as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let sign: T = fault_sign("matmul");
                acc(*a, &|s| {
                    let da = matmul_a_bt(gd, bv.data(), m, n, k);
                    s.iter_mut().zip(da).for_each(|(x, d)| *x += sign * d);
                });
                acc(*b, &|s| add_into(s, &matmul_at_b(av.data(), gd, m, k, n)));
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [bt, m, k] = av.shape()[..] else {
                    unreachable!()
                };
                let n = bv.shape()[2];
                acc(*a, &|s| {
                    for t in 0..bt {
                        let da = matmul_a_bt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                        add_into(&mut s[t * m * k..(t + 1) * m * k], &da);
                    }
                });
                acc(*b, &|s| {
                    for t in 0..bt {
                        let db = matmul_at_b(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                        add_into(&mut s[t * k * n..(t + 1) * k * n], &db);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, gd));
                acc(*b, &|s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, gd));
                acc(*b, &|s| s.iter_mut().zip(gd).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += gd[i] * bv[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += gd[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|s| add_into(s, gd));
                acc(*bias, &|s| {
                    let w = s.len();
                    for (i, &d) in gd.iter().enumerate() {
                        s[i % w] += d;
                    }
                });
            }
            Op::ScaleCols(x, gain) => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gain).data());
                let w = gv.len();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += gd[i] * gv[i % w];
                    }
                });
                acc(*gain, &|s| {
                    for (i, &d) in gd.iter().enumerate() {
                        s[i % w] += d * xv[i];
                    }
                });
            }
            Op::ScaleRows(x, sc) => {
                let (xv, sv) = (self.value(*x), self.value(*sc).data());
                let w = xv.last_dim();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += gd[i] * sv[i / w];
                    }
                });
                acc(*sc, &|s| {
                    for (i, &d) in gd.iter().enumerate() {
                        s[i / w] += d * xv.data()[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                s.iter_mut().zip(gd).for_each(|(x, &d)| *x += *c * d)
            }),
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let sign: T = fault_sign("leaky_relu");
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        let d = if xv[i] >= T::zero() { T::one() } else { *slope };
                        s[i] += sign * gd[i] * d;
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let sign: T = fault_sign("softmax");
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += sign * y[at(k)] * (gd[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize {
                x,
                inv_std,
                floored,
            } => {
                let y = &node.value;
                let w = y.last_dim();
                let nw = T::of(w as f64);
                let sign: T = fault_sign("layer_norm");
                acc(*x, &|s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gd[r * w..(r + 1) * w];
                        let mg = gr.iter().copied().sum::<T>() / nw;
                        // a floored scale does not depend on x
                        let mgy = if floored[r] {
                            T::zero()
                        } else {
                            gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nw
                        };
                        for k in 0..w {
                            s[r * w + k] += sign * is * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let sign: T = fault_sign("concat");
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    acc(v, &|s| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            for (d, &x) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += sign * x;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { x, index } => {
                let w = if index.is_empty() {
                    0
                } else {
                    gd.len() / index.len()
                };
                let sign: T = fault_sign("gather");
                acc(*x, &|s| {
                    for (r, &i) in index.iter().enumerate() {
                        for k in 0..w {
                            s[i * w + k] += sign * gd[r * w + k];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, gd)),
            Op::Narrow { x, start, len } => {
                let w = self.value(*x).last_dim();
                acc(*x, &|s| {
                    let rows = s.len() / w;
                    for r in 0..rows {
                        add_into(
                            &mut s[r * w + start..r * w + start + len],
                            &gd[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += gd[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, &|s| s.iter_mut().for_each(|v| *v += gd[0] / n));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let k = probs.len() / m;
                let scale = gd[0] / T::of(m as f64);
                let sign: T = fault_sign("cross_entropy");
                acc(*logits, &|s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            s[r * k + c] += sign * scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}
