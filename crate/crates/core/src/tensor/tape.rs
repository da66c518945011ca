use super::{Scalar, Tensor};
use crate::error::{dim_err, invalid, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) enum Op<F> {
    Leaf,
    /// `a[.., k] · b[k, n]`, or `a · bᵀ` with `b` stored as `[n, k]`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    /// `b` is broadcast over the leading dimensions of `a`.
    AddBroadcast(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SplitHeads {
        a: Var,
        b: usize,
        t: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        b: usize,
        t: usize,
        heads: usize,
    },
    CausalSoftmax {
        a: Var,
        scale: F,
    },
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    Dot {
        a: Var,
        weights: Vec<F>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<F>,
        targets: Vec<u32>,
        mask: Vec<bool>,
        count: usize,
    },
    WeightedBce {
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<F>,
        mask: Vec<bool>,
        count: usize,
    },
    L2Match {
        pred: Var,
        target: Vec<F>,
        mask: Vec<bool>,
        count: usize,
    },
}

pub(super) struct Node<F> {
    pub(super) value: Tensor<F>,
    pub(super) op: Op<F>,
    pub(super) requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Single-writer: one tape serves one forward/backward pass on one thread.
pub struct Tape<F> {
    pub(super) nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. A transposed operand is stored in the flipped layout.
#[allow(clippy::too_many_arguments)]
pub(super) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the assertion above bounds every strided access.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let th = u.tanh();
    let value = half * x * (one + th);
    let du = c * (one + F::from_f64(3.0) * k * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * du;
    (value, deriv)
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient accumulated into a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Matrix product `a[.., k] · b[k, n]`; leading dimensions of `a` are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., k] · bᵀ` where `b` is stored `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if bv.rank() != 2 {
            return dim_err(format!("matmul rhs must be rank 2, got {:?}", bv.shape()));
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return dim_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let m = av.rows();
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            trans_b,
            &mut out,
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.needs(a) || self.needs(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product over the leading dimension: `[bt, m, k] · [bt, k, n]`,
    /// or `[bt, m, k] · [bt, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return dim_err(format!(
                "batch_matmul expects matching rank-3 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != bk {
            return dim_err(format!(
                "batch_matmul inner dimensions disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..],
                false,
                &bv.data()[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return dim_err(format!(
                "add shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if bv.rank() > av.rank() || !av.shape().ends_with(bv.shape()) {
            return dim_err(format!(
                "cannot broadcast {:?} over {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let inner = bv.numel();
        let data = av
            .data()
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x * c).collect(),
        };
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| gelu_parts(x).0).collect(),
        };
        let rg = self.needs(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Per-row normalization over the trailing dimension followed by an
    /// affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let h = xv.last_dim();
        if self.value(gamma).shape() != [h] || self.value(beta).shape() != [h] {
            return dim_err(format!(
                "layer_norm affine params must be [{h}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.rows();
        let hf = F::from_f64(h as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<F>() / hf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..h {
                let xh = (row[i] - mean) * rs;
                xhat[r * h + i] = xh;
                out[r * h + i] = xh * g[i] + bt[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather from `table[V, d]`; output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return dim_err(format!(
                "embedding table must be rank 2, got {:?}",
                tv.shape()
            ));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return dim_err(format!(
                "ids shape {ids_shape:?} does not match {} ids",
                ids.len()
            ));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return invalid(format!("token id {id} outside vocabulary of {v}"));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[b, t, heads·dh] → [b·heads, t, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || !av.shape()[2].is_multiple_of(heads) {
            return dim_err(format!("cannot split {:?} into {heads} heads", av.shape()));
        }
        let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let dh = d / heads;
        let mut out = vec![F::zero(); av.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&av.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b * heads, t, dh], out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SplitHeads { a, b, t, heads }, rg))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || !av.shape()[0].is_multiple_of(heads) {
            return dim_err(format!("cannot merge {:?} from {heads} heads", av.shape()));
        }
        let (bh, t, dh) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let b = bh / heads;
        let d = dh * heads;
        let mut out = vec![F::zero(); av.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (bi * t + ti) * d + h * dh;
                    let src = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&av.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::MergeHeads { a, b, t, heads }, rg))
    }

    /// Softmax over the last axis of `scale · a[.., t, t]` restricted to the
    /// lower triangle; entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: F) -> Result<Var> {
        let av = self.value(a);
        let r = av.rank();
        if r < 2 || av.shape()[r - 1] != av.shape()[r - 2] {
            return dim_err(format!(
                "causal_softmax needs square trailing dims, got {:?}",
                av.shape()
            ));
        }
        let t = av.shape()[r - 1];
        let mut out = vec![F::zero(); av.numel()];
        for (mat, dst) in av
            .data()
            .chunks_exact(t * t)
            .zip(out.chunks_exact_mut(t * t))
        {
            for i in 0..t {
                let row = &mat[i * t..i * t + i + 1];
                let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v * scale));
                let mut z = F::zero();
                for j in 0..=i {
                    let e = (row[j] * scale - mx).exp();
                    dst[i * t + j] = e;
                    z = z + e;
                }
                for j in 0..=i {
                    dst[i * t + j] = dst[i * t + j] / z;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::CausalSoftmax { a, scale }, rg))
    }

    /// Concatenation along the trailing dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let r = av.rank();
        if r != bv.rank() || av.shape()[..r - 1] != bv.shape()[..r - 1] {
            return dim_err(format!(
                "cannot concat {:?} with {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (n1, n2) = (av.last_dim(), bv.last_dim());
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks_exact(n1).zip(bv.data().chunks_exact(n2)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        shape[r - 1] = n1 + n2;
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `Σ a ⊙ weights` against a constant weight buffer.
    pub fn dot(&mut self, a: Var, weights: &[F]) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != weights.len() {
            return dim_err(format!(
                "dot weights have {} elements, tensor has {}",
                weights.len(),
                av.numel()
            ));
        }
        let s = av
            .data()
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum::<F>();
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from the one-element node `loss`.
    ///
    /// Afterwards [`Tape::grad`] returns the gradient of every reachable leaf
    /// that requires one. Intermediate gradients are released as soon as they
    /// have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward needs a one-element loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, dy, false, val(b).data(), !trans_b, ga, true);
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if trans_b {
                        gemm(n, m, k, dy, true, val(a).data(), false, gb, true);
                    } else {
                        gemm(k, m, n, val(a).data(), true, dy, false, gb, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], batch * m * k);
                    let bd = val(b).data();
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[s * m * n..],
                            false,
                            &bd[s * k * n..],
                            !trans_b,
                            &mut ga[s * m * k..],
                            true,
                        );
                    }
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], batch * k * n);
                    let ad = val(a).data();
                    for s in 0..batch {
                        if trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                &dy[s * m * n..],
                                true,
                                &ad[s * m * k..],
                                false,
                                &mut gb[s * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[s * m * k..],
                                true,
                                &dy[s * m * n..],
                                false,
                                &mut gb[s * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let g = accumulate(&mut grads[v.0], dy.len());
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if needs(a) {
                    let g = accumulate(&mut grads[a.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
                }
                if needs(b) {
                    let inner = val(b).numel();
                    let g = accumulate(&mut grads[b.0], inner);
                    for row in dy.chunks_exact(inner) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if needs(a) {
                    let g = accumulate(&mut grads[a.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * c);
                }
            }
            &Op::Gelu(a) => {
                if needs(a) {
                    let x = val(a).data();
                    let g = accumulate(&mut grads[a.0], dy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(x) {
                        *g = *g + d * gelu_parts(x).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = val(*gamma).numel();
                let rows = rstd.len();
                if needs(*gamma) {
                    let g = accumulate(&mut grads[gamma.0], h);
                    for r in 0..rows {
                        for j in 0..h {
                            g[j] = g[j] + dy[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if needs(*beta) {
                    let g = accumulate(&mut grads[beta.0], h);
                    for row in dy.chunks_exact(h) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                if needs(*x) {
                    let gam = val(*gamma).data();
                    let hf = F::from_f64(h as f64);
                    let g = accumulate(&mut grads[x.0], rows * h);
                    for r in 0..rows {
                        let dyr = &dy[r * h..(r + 1) * h];
                        let xh = &xhat[r * h..(r + 1) * h];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..h {
                            let dxh = dyr[j] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        }
                        mean_dxh = mean_dxh / hf;
                        mean_dxh_xh = mean_dxh_xh / hf;
                        for j in 0..h {
                            let dxh = dyr[j] * gam[j];
                            g[r * h + j] =
                                g[r * h + j] + rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = val(*table).shape()[1];
                    let g = accumulate(&mut grads[table.0], val(*table).numel());
                    for (row, &id) in dy.chunks_exact(d).zip(ids) {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
                    }
                }
            }
            &Op::SplitHeads { a, b, t, heads } => {
                if needs(a) {
                    let d = val(a).last_dim();
                    let dh = d / heads;
                    let g = accumulate(&mut grads[a.0], dy.len());
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let dst = (bi * t + ti) * d + h * dh;
                                let src = ((bi * heads + h) * t + ti) * dh;
                                for e in 0..dh {
                                    g[dst + e] = g[dst + e] + dy[src + e];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, b, t, heads } => {
                if needs(a) {
                    let dh = val(a).last_dim();
                    let d = dh * heads;
                    let g = accumulate(&mut grads[a.0], dy.len());
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let src = (bi * t + ti) * d + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                for e in 0..dh {
                                    g[dst + e] = g[dst + e] + dy[src + e];
                                }
                            }
                        }
                    }
                }
            }
            &Op::CausalSoftmax { a, scale } => {
                if needs(a) {
                    let y = node.value.data();
                    let t = node.value.last_dim();
                    let g = accumulate(&mut grads[a.0], dy.len());
                    for base in (0..y.len()).step_by(t * t) {
                        for i in 0..t {
                            let r = base + i * t;
                            let mut dotp = F::zero();
                            for j in 0..=i {
                                dotp = dotp + y[r + j] * dy[r + j];
                            }
                            for j in 0..=i {
                                g[r + j] = g[r + j] + scale * y[r + j] * (dy[r + j] - dotp);
                            }
                        }
                    }
                }
            }
            &Op::Concat(a, b) => {
                let n1 = val(a).last_dim();
                let n2 = val(b).last_dim();
                let rows = dy.len() / (n1 + n2);
                if needs(a) {
                    let g = accumulate(&mut grads[a.0], rows * n1);
                    for r in 0..rows {
                        for j in 0..n1 {
                            g[r * n1 + j] = g[r * n1 + j] + dy[r * (n1 + n2) + j];
                        }
                    }
                }
                if needs(b) {
                    let g = accumulate(&mut grads[b.0], rows * n2);
                    for r in 0..rows {
                        for j in 0..n2 {
                            g[r * n2 + j] = g[r * n2 + j] + dy[r * (n1 + n2) + n1 + j];
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if needs(a) {
                    let g = accumulate(&mut grads[a.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
                }
            }
            &Op::Sum(a) => {
                if needs(a) {
                    let n = val(a).numel();
                    let g = accumulate(&mut grads[a.0], n);
                    g.iter_mut().for_each(|g| *g = *g + dy[0]);
                }
            }
            Op::Dot { a, weights } => {
                if needs(*a) {
                    let g = accumulate(&mut grads[a.0], weights.len());
                    g.iter_mut()
                        .zip(weights)
                        .for_each(|(g, &w)| *g = *g + dy[0] * w);
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                if needs(*logits) {
                    let g = accumulate(&mut grads[logits.0], probs.len());
                    super::loss::softmax_ce_backward(g, dy[0], probs, targets, mask, *count);
                }
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
                mask,
                count,
            } => {
                if needs(*logits) {
                    let z = val(*logits).data();
                    let g = accumulate(&mut grads[logits.0], z.len());
                    super::loss::bce_backward(g, dy[0], z, targets, weights, mask, *count);
                }
            }
            Op::L2Match {
                pred,
                target,
                mask,
                count,
            } => {
                if needs(*pred) {
                    let p = val(*pred);
                    let h = p.last_dim();
                    let g = accumulate(&mut grads[pred.0], p.numel());
                    super::loss::l2_backward(g, dy[0], p.data(), target, mask, h, *count);
                }
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

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let q = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let out = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(out).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[2, 3], &[1., 0., 1., 0., 1., 0.]));
        let bt = tape.constant(t(&[3, 2], &[1., 0., 0., 1., 1., 0.]));
        let x = tape.matmul_t(a, b).unwrap();
        let y = tape.matmul(a, bt).unwrap();
        assert_eq!(tape.value(x).data(), tape.value(y).data());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1., -1.]));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for (v, e) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((v - e).abs() < 1e-4);
        }
        let x = tape.constant(t(&[1, 2], &[3.7, 3.7]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 3, 3], &[1., 9., 9., 0., 0., 9., 1., 2., 3.]));
        let y = tape.causal_softmax(a, 1.0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(&d[1..3], &[0.0, 0.0]);
        assert!((d[3] - 0.5).abs() < 1e-15 && d[5] == 0.0);
        assert!((d[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..24).map(f64::from).collect();
        let a = tape.constant(t(&[2, 3, 4], &vals));
        let s = tape.split_heads(a, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // head 1 of batch 0, time 0 holds features 2..4
        assert_eq!(&tape.value(s).data()[6..8], &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), &vals[..]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.embedding(table, &[0, 3], &[1, 2]),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn backward_skips_constants() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.add(a, c).unwrap();
        let l = tape.dot(s, &[1.0, -2.0]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, -2.0]);
        assert!(tape.grad(c).is_none());
    }
}
