//! Scalar loss kernels. Each reduces over the rows of its input (every
//! leading dimension flattened) and averages over unmasked rows. A batch
//! with every row masked yields a zero loss and zero gradient.

use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{dim_err, invalid, Result};

fn check_mask(rows: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != rows {
        return dim_err(format!("mask has {} entries for {rows} rows", mask.len()));
    }
    Ok(mask.iter().filter(|&&m| m).count())
}

/// `log(1 + exp(x))` without overflow.
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Tape<F> {
    /// Mean over unmasked rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows {
            return dim_err(format!("{} targets for {rows} rows", targets.len()));
        }
        let count = check_mask(rows, mask)?;
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r] as usize;
            if tgt >= v {
                return invalid(format!("target {tgt} outside vocabulary of {v}"));
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut z = F::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z = z + *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            total = total + (mx + z.ln() - row[tgt]);
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_f64(count as f64)
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean over unmasked rows of the per-class weighted binary cross-entropy
    /// summed over classes, computed from logits in the overflow-free form
    /// `max(z,0) − z·a + log(1 + exp(−|z|))`.
    pub fn weighted_sigmoid_bce(
        &mut self,
        logits: Var,
        targets: &[u8],
        weights: &[F],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != lv.numel() {
            return dim_err(format!(
                "{} targets for {} logits",
                targets.len(),
                lv.numel()
            ));
        }
        if weights.len() != v {
            return dim_err(format!("{} weights for {v} classes", weights.len()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < F::zero()) {
            return invalid(format!(
                "class weights must be finite and non-negative, got {w}"
            ));
        }
        if targets.iter().any(|&a| a > 1) {
            return invalid("bce targets must be 0 or 1");
        }
        let count = check_mask(rows, mask)?;
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let z = &lv.data()[r * v..(r + 1) * v];
            let a = &targets[r * v..(r + 1) * v];
            let mut row_loss = F::zero();
            for i in 0..v {
                let ai = if a[i] == 1 { F::one() } else { F::zero() };
                // −[a log σ(z) + (1−a) log(1−σ(z))] = softplus(z) − a·z
                row_loss = row_loss + weights[i] * (softplus(z[i]) - ai * z[i]);
            }
            total = total + row_loss;
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_f64(count as f64)
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean over unmasked rows of the mean squared difference to a constant
    /// target. Gradient reaches `pred` only.
    pub fn l2_match(&mut self, pred: Var, target: &Tensor<F>, mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return dim_err(format!(
                "l2_match shapes differ: {:?} vs {:?}",
                pv.shape(),
                target.shape()
            ));
        }
        let h = pv.last_dim();
        let rows = pv.rows();
        let count = check_mask(rows, mask)?;
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let p = &pv.data()[r * h..(r + 1) * h];
            let t = &target.data()[r * h..(r + 1) * h];
            let sq = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
            total = total + sq / F::from_f64(h as f64);
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_f64(count as f64)
        };
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L2Match {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }
}

pub(super) fn softmax_ce_backward<F: Scalar>(
    g: &mut [F],
    dy: F,
    probs: &[F],
    targets: &[u32],
    mask: &[bool],
    count: usize,
) {
    if count == 0 {
        return;
    }
    let v = probs.len() / mask.len();
    let s = dy / F::from_f64(count as f64);
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..v {
            g[r * v + j] = g[r * v + j] + s * probs[r * v + j];
        }
        let t = r * v + targets[r] as usize;
        g[t] = g[t] - s;
    }
}

pub(super) fn bce_backward<F: Scalar>(
    g: &mut [F],
    dy: F,
    z: &[F],
    targets: &[u8],
    weights: &[F],
    mask: &[bool],
    count: usize,
) {
    if count == 0 {
        return;
    }
    let v = weights.len();
    let s = dy / F::from_f64(count as f64);
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for i in 0..v {
            let k = r * v + i;
            let a = if targets[k] == 1 { F::one() } else { F::zero() };
            g[k] = g[k] + s * weights[i] * (sigmoid(z[k]) - a);
        }
    }
}

pub(super) fn l2_backward<F: Scalar>(
    g: &mut [F],
    dy: F,
    p: &[F],
    target: &[F],
    mask: &[bool],
    h: usize,
    count: usize,
) {
    if count == 0 {
        return;
    }
    let s = dy * F::from_f64(2.0 / (h as f64 * count as f64));
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in r * h..(r + 1) * h {
            g[j] = g[j] + s * (p[j] - target[j]);
        }
    }
}
