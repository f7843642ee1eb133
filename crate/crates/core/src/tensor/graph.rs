use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SwapMiddle(Var, [usize; 4]),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Take {
        src: Var,
        index: Vec<usize>,
    },
    ConcatCols(Var, Var),
    MaskedSoftmax(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
    },
    LogSumExp {
        x: Var,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherDot {
        user: Var,
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation tape. Nodes are appended in creation order, so reverse index
/// order is a valid reverse-topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Matrix operand description: pointer offset plus row/column strides of the
/// logical (possibly transposed) matrix.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    /// Layout of `op(X)` where `X` is stored row-major as `rows × cols` and
    /// `op` transposes when `t` is set.
    fn of(cols: usize, rows: usize, t: bool) -> Layout {
        if t {
            Layout {
                rs: 1,
                cs: cols as isize,
            }
        } else {
            let _ = rows;
            Layout {
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    fn transposed(self) -> Layout {
        Layout {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c += a · b` for logical `m×k` and `k×n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    lc: Layout,
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering exactly the strided extents.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = min(x, 0) − log1p(exp(−|x|))`.
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a.ends_with(b))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, op, &[x])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::Shape(format!(
                "{name}: {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let nb = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::InvalidValue(format!("log of non-positive value {bad}")));
        }
        Ok(self.map_unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Stable `log σ(x)`. `log(1 − σ(x))` is `log_sigmoid(neg(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    fn matmul_dims(&self, a: Var, b: Var, ta: bool, tb: bool, batched: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rank = if batched { 3 } else { 2 };
        if sa.len() != rank || sb.len() != rank || (batched && sa[0] != sb[0]) {
            return Err(Error::Shape(format!("matmul: {sa:?} with {sb:?}")));
        }
        let off = rank - 2;
        let (m, ka) = if ta { (sa[off + 1], sa[off]) } else { (sa[off], sa[off + 1]) };
        let (kb, n) = if tb { (sb[off + 1], sb[off]) } else { (sb[off], sb[off + 1]) };
        if ka != kb {
            return Err(Error::Shape(format!("matmul inner dims: {sa:?} with {sb:?}")));
        }
        let batch = if batched { sa[0] } else { 1 };
        Ok((batch, m, ka, n))
    }

    /// `op(a) · op(b)` for 2-D operands, `op` transposing when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (_, m, k, n) = self.matmul_dims(a, b, ta, tb, false)?;
        let mut out = vec![T::zero(); m * n];
        let (sa, sb) = (self.shape(a), self.shape(b));
        let la = Layout::of(sa[1], sa[0], ta);
        let lb = Layout::of(sb[1], sb[0], tb);
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            la,
            self.value(b).data(),
            lb,
            &mut out,
            Layout::of(n, m, false),
            T::zero(),
        );
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis of 3-D operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (batch, m, k, n) = self.matmul_dims(a, b, ta, tb, true)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (sa[1] * sa[2], sb[1] * sb[2]);
        let la = Layout::of(sa[2], sa[1], ta);
        let lb = Layout::of(sb[2], sb[1], tb);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (t, chunk) in out.chunks_mut(m * n).enumerate() {
            gemm_acc(
                m,
                k,
                n,
                &da[t * na..(t + 1) * na],
                la,
                &db[t * nb..(t + 1) * nb],
                lb,
                chunk,
                Layout::of(n, m, false),
                T::zero(),
            );
        }
        let value = Tensor {
            shape: vec![batch, m, n],
            data: out,
        };
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyInput("mean of empty tensor"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[a, b, c, d] → [a, c, b, d]`.
    pub fn swap_middle(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Shape(format!("swap_middle needs rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = swap_middle_data(self.value(x).data(), dims);
        let value = Tensor {
            shape: vec![dims[0], dims[2], dims[1], dims[3]],
            data,
        };
        Ok(self.push(value, Op::SwapMiddle(x, dims), &[x]))
    }

    /// Row lookup into a `[V×d]` table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("gather_rows table {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "table",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Flat gather: `out[i] = src.data[index[i]]`, reshaped to `shape`.
    pub fn take(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape(format!(
                "take: {} indices into shape {shape:?}",
                index.len()
            )));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            match s.data().get(i) {
                Some(&x) => data.push(x),
                None => {
                    return Err(Error::OutOfRange {
                        what: "take source",
                        index: i,
                        size: s.len(),
                    })
                }
            }
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Take { src, index }, &[src]))
    }

    /// Concatenate two `[R×m]`, `[R×n]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat_cols: {sa:?} with {sb:?}")));
        }
        let (r, m, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(r * (m + n));
        for row in 0..r {
            data.extend_from_slice(&va.data()[row * m..(row + 1) * m]);
            data.extend_from_slice(&vb.data()[row * n..(row + 1) * n]);
        }
        let value = Tensor {
            shape: vec![r, m + n],
            data,
        };
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Softmax over the last axis. Entries with `mask[i] == false` get
    /// probability zero; rows with no unmasked entry become all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::Shape(format!(
                    "mask of {} for tensor {:?}",
                    m.len(),
                    t.shape()
                )));
            }
        }
        let d = t.last_dim();
        let mut out = vec![T::zero(); t.len()];
        for (r, row) in t.data().chunks(d).enumerate() {
            let keep = |c: usize| mask.is_none_or(|m| m[r * d + c]);
            let mut max = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if keep(c) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut total = T::zero();
            for (c, &v) in row.iter().enumerate() {
                if keep(c) {
                    o[c] = (v - max).exp();
                    total = total + o[c];
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::MaskedSoftmax(x), &[x]))
    }

    /// Row-wise `−log softmax(row)[0]`, max-shifted. The output drops the
    /// last axis.
    pub fn softmax_ce(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let d = t.last_dim();
        if d == 0 || t.shape().is_empty() {
            return Err(Error::Shape(format!("softmax_ce on {:?}", t.shape())));
        }
        let rows = t.len() / d;
        let mut probs = vec![T::zero(); t.len()];
        let mut out = Vec::with_capacity(rows);
        for (r, row) in t.data().chunks(d).enumerate() {
            let mut arg = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = c;
                }
            }
            let max = row[arg];
            let p = &mut probs[r * d..(r + 1) * d];
            // sum of exp(v - max) over everything but the arg max
            let mut rest = T::zero();
            for (c, &v) in row.iter().enumerate() {
                p[c] = (v - max).exp();
                if c != arg {
                    rest = rest + p[c];
                }
            }
            let total = T::one() + rest;
            for v in p.iter_mut() {
                *v = *v / total;
            }
            out.push((max - row[0]) + rest.ln_1p());
        }
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::SoftmaxCe { logits, probs }, &[logits]))
    }

    /// Row-wise `log Σ exp(row)`, max-shifted. The output drops the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || t.shape().is_empty() {
            return Err(Error::Shape(format!("logsumexp on {:?}", t.shape())));
        }
        let mut probs = vec![T::zero(); t.len()];
        let mut out = Vec::with_capacity(t.len() / d);
        for (row, p) in t.data().chunks(d).zip(probs.chunks_mut(d)) {
            let mut arg = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = c;
                }
            }
            let max = row[arg];
            let mut rest = T::zero();
            for (c, &v) in row.iter().enumerate() {
                p[c] = (v - max).exp();
                if c != arg {
                    rest = rest + p[c];
                }
            }
            let total = T::one() + rest;
            p.iter_mut().for_each(|v| *v = *v / total);
            out.push(max + rest.ln_1p());
        }
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::LogSumExp { x, probs }, &[x]))
    }

    /// Normalizes over the last axis (ε = 1e-8) then applies `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                t.shape(),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::of(1e-8);
        let dn = T::of(d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); t.len()];
        let mut out = vec![T::zero(); t.len()];
        let mut inv_std = Vec::with_capacity(t.len() / d);
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// `out[p, c] = ⟨user[p], table[ids[p·C + c]]⟩`; `ids.len()` must be a
    /// multiple of the number of user rows.
    pub fn gather_dot(&mut self, user: Var, table: Var, ids: &[usize]) -> Result<Var> {
        let (su, st) = (self.shape(user), self.shape(table));
        if su.len() != 2 || st.len() != 2 || su[1] != st[1] {
            return Err(Error::Shape(format!("gather_dot: user {su:?}, table {st:?}")));
        }
        let (p, d, v) = (su[0], su[1], st[0]);
        if p == 0 || !ids.len().is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "gather_dot: {} ids for {p} rows",
                ids.len()
            )));
        }
        let c = ids.len() / p;
        let (u, tb) = (self.value(user), self.value(table));
        let mut out = Vec::with_capacity(ids.len());
        for (idx, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "item table",
                    index: id,
                    size: v,
                });
            }
            let row = u.row(idx / c);
            let item = tb.row(id);
            out.push(row.iter().zip(item).map(|(&a, &b)| a * b).sum());
        }
        let _ = d;
        let value = Tensor {
            shape: vec![p, c],
            data: out,
        };
        Ok(self.push(
            value,
            Op::GatherDot {
                user,
                table,
                ids: ids.to_vec(),
            },
            &[user, table],
        ))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`]. Returns the number of nodes swept.
    pub fn backward(&mut self, root: Var) -> Result<usize> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut swept = 0;
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            swept += 1;
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(swept)
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let nb = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + sign * x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                acc(*a, &mut |ga| {
                    for (i, &x) in g.iter().enumerate() {
                        ga[i] = ga[i] + x * vb[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + x * va[i];
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a - b;
                }
            }),
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + b * *s;
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((a, &b), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a = *a + b * y;
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *a = *a + b / v;
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((a, &b), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a = *a + b * y * (T::one() - y);
                }
            }),
            Op::LogSigmoid(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *a = *a + b * sigmoid(-v);
                    }
                })
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *a = *a + b;
                        }
                    }
                })
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let la = Layout::of(sa[1], sa[0], *ta);
                let lb = Layout::of(sb[1], sb[0], *tb);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if *ta { sa[0] } else { sa[1] };
                let lg = Layout::of(n, m, false);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| gemm_acc(m, n, k, g, lg, vb, lb.transposed(), ga, la, T::one()));
                acc(*b, &mut |gb| gemm_acc(k, m, n, va, la.transposed(), g, lg, gb, lb, T::one()));
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let la = Layout::of(sa[2], sa[1], *ta);
                let lb = Layout::of(sb[2], sb[1], *tb);
                let (batch, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let k = if *ta { sa[1] } else { sa[2] };
                let (na, nb, ng) = (sa[1] * sa[2], sb[1] * sb[2], m * n);
                let lg = Layout::of(n, m, false);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for t in 0..batch {
                        gemm_acc(
                            m,
                            n,
                            k,
                            &g[t * ng..(t + 1) * ng],
                            lg,
                            &vb[t * nb..(t + 1) * nb],
                            lb.transposed(),
                            &mut ga[t * na..(t + 1) * na],
                            la,
                            T::one(),
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..batch {
                        gemm_acc(
                            k,
                            m,
                            n,
                            &va[t * na..(t + 1) * na],
                            la.transposed(),
                            &g[t * ng..(t + 1) * ng],
                            lg,
                            &mut gb[t * nb..(t + 1) * nb],
                            lb,
                            T::one(),
                        );
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for a in gx.iter_mut() {
                    *a = *a + g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = g[0] / T::of(gx.len() as f64);
                for a in gx.iter_mut() {
                    *a = *a + s;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::SwapMiddle(x, dims) => {
                let back = swap_middle_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::GatherRows { table, ids } => {
                let d = out.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Take { src, index } => acc(*src, &mut |gs| {
                for (&i, &x) in index.iter().zip(g) {
                    gs[i] = gs[i] + x;
                }
            }),
            Op::ConcatCols(a, b) => {
                let (m, n) = (nodes[a.0].value.shape()[1], nodes[b.0].value.shape()[1]);
                let rows = out.shape()[0];
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        add_into(&mut ga[r * m..(r + 1) * m], &g[r * (m + n)..r * (m + n) + m]);
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * n..(r + 1) * n],
                            &g[r * (m + n) + m..(r + 1) * (m + n)],
                        );
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let d = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), xr) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            xr[c] = xr[c] + yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp { x, probs } => {
                let d = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, (pr, xr)) in probs.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        for c in 0..d {
                            xr[c] = xr[c] + g[r] * pr[c];
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, probs } => {
                let d = nodes[logits.0].value.last_dim();
                acc(*logits, &mut |gl| {
                    for (r, (pr, lr)) in probs.chunks(d).zip(gl.chunks_mut(d)).enumerate() {
                        for c in 0..d {
                            let onehot = if c == 0 { T::one() } else { T::zero() };
                            lr[c] = lr[c] + g[r] * (pr[c] - onehot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = val(*gain);
                let dn = T::of(d as f64);
                acc(*x, &mut |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            gx[r * d + c] = gx[r * d + c] + is * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] = gg[c] + gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::GatherDot { user, table, ids } => {
                let c = out.last_dim();
                let d = nodes[user.0].value.last_dim();
                let (vu, vt) = (val(*user), val(*table));
                acc(*user, &mut |gu| {
                    for (idx, (&id, &x)) in ids.iter().zip(g).enumerate() {
                        let p = idx / c;
                        let row = &mut gu[p * d..(p + 1) * d];
                        for (a, &e) in row.iter_mut().zip(&vt[id * d..(id + 1) * d]) {
                            *a = *a + x * e;
                        }
                    }
                });
                acc(*table, &mut |gt| {
                    for (idx, (&id, &x)) in ids.iter().zip(g).enumerate() {
                        let p = idx / c;
                        let row = &mut gt[id * d..(id + 1) * d];
                        for (a, &u) in row.iter_mut().zip(&vu[p * d..(p + 1) * d]) {
                            *a = *a + x * u;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn swap_middle_data<T: Copy>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for ia in 0..a {
        for ic in 0..c {
            for ib in 0..b {
                let start = ((ia * b + ib) * c + ic) * d;
                out.extend_from_slice(&src[start..start + d]);
            }
        }
    }
    out
}
