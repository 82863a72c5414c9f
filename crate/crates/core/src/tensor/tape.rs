//! Tape-based reverse-mode autodiff over a fixed op set.
//!
//! Each forward op appends a node holding its output value and enough
//! metadata to run the backward rule. `backward` walks the tape in reverse
//! and accumulates gradients into per-node slots; leaf gradients are read
//! back by id. Reduction loops have a fixed order, so runs are bit-identical
//! for a given precision and seed.

use rayon::prelude::*;

use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Matmul(VarId, VarId),
    Transpose(VarId),
    SliceCols(VarId, usize, usize),
    ConcatCols(Vec<VarId>),
    SoftmaxRows(VarId),
    LogSumExpRows(VarId),
    ColMean(VarId),
    Sum(VarId),
    DotConstF64(VarId, Vec<f64>),
    RmsNorm {
        x: VarId,
        gain: VarId,
        n_groups: usize,
        eps: f64,
    },
    Silu(VarId),
    Rope {
        x: VarId,
        base: f64,
        pos_offset: usize,
    },
    GatherRows(VarId, Vec<usize>),
    ScatterAddRows(VarId, Vec<usize>, usize),
    ScaleRows(VarId, VarId),
    GatherElems(VarId, Vec<(usize, usize)>),
    MaskedCe {
        logits: VarId,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
}

/// Forward tape; one per loss evaluation.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by a backward pass.
pub struct Grads<E> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Grads<E> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<E>> {
        self.slots[id.0].as_ref()
    }
}

// Below this element count matmul stays single-threaded.
const PAR_MATMUL_THRESHOLD: usize = 64 * 64 * 64;

fn matmul_values<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![E::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    let body = |(r, out_row): (usize, &mut [E])| {
        let arow = &ad[r * k..(r + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k >= PAR_MATMUL_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose_values<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn softmax_row<E: Elem>(row: &[E], out: &mut [E]) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn logsumexp_row<E: Elem>(row: &[E]) -> E {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    if mx.is_infinite() && mx < E::zero() {
        return mx;
    }
    let mut sum = E::zero();
    for &v in row {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// Rotation angle for pair `j` of a head of width `d` at position `pos`.
fn rope_angle(pos: usize, j: usize, d: usize, base: f64) -> f64 {
    let freq = base.powf(-2.0 * j as f64 / d as f64);
    pos as f64 * freq
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn check_finite(&self, id: VarId, what: &str) -> Result<()> {
        if self.value(id).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ce = E::from_f64(c);
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * ce).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("scale shape");
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape("matmul expects rank-2 operands"));
        }
        if ta.cols() != tb.rows() {
            return Err(Error::shape(format!(
                "matmul inner extents {} vs {}",
                ta.cols(),
                tb.rows()
            )));
        }
        let value = matmul_values(ta, tb);
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape("transpose expects rank-2"));
        }
        let value = transpose_values(ta);
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {start}+{len}) out of {c} cols"
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero parts"));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0usize;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(Error::shape("softmax over empty axis"));
        }
        let r = ta.rows();
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            softmax_row(&ta.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn logsumexp_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(Error::shape("logsumexp over empty axis"));
        }
        let r = ta.rows();
        let data: Vec<E> = (0..r)
            .map(|i| logsumexp_row(&ta.data()[i * c..(i + 1) * c]))
            .collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::LogSumExpRows(a)))
    }

    /// Mean over rows: [r, c] -> [c].
    pub fn col_mean(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if r == 0 {
            return Err(Error::shape("col_mean of zero rows"));
        }
        let inv = E::from_f64(1.0 / r as f64);
        let mut data = vec![E::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] = data[j] + ta.data()[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(value, Op::ColMean(a)))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: E = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Dot product with a constant vector (no gradient to the constant).
    pub fn dot_const(&mut self, a: VarId, c: &[f64]) -> Result<VarId> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::shape(format!(
                "dot_const {} vs {}",
                ta.len(),
                c.len()
            )));
        }
        let mut s = E::zero();
        for (&x, &w) in ta.data().iter().zip(c.iter()) {
            s = s + x * E::from_f64(w);
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConstF64(a, c.to_vec()),
        ))
    }

    /// RMS normalization per row, in `n_groups` equal chunks (grouped for
    /// per-head QK-norm; `n_groups = 1` is the plain layer norm variant).
    pub fn rmsnorm(&mut self, x: VarId, gain: VarId, n_groups: usize, eps: f64) -> Result<VarId> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let c = tx.cols();
        if tg.len() != c {
            return Err(Error::shape(format!(
                "rmsnorm gain len {} vs {} cols",
                tg.len(),
                c
            )));
        }
        if n_groups == 0 || c % n_groups != 0 {
            return Err(Error::shape(format!(
                "rmsnorm: {c} cols not divisible into {n_groups} groups"
            )));
        }
        let r = tx.rows();
        let gw = c / n_groups;
        let epse = E::from_f64(eps);
        let inv_gw = E::from_f64(1.0 / gw as f64);
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for g in 0..n_groups {
                let off = i * c + g * gw;
                let chunk = &tx.data()[off..off + gw];
                let mut ms = E::zero();
                for &v in chunk {
                    ms = ms + v * v;
                }
                let inv_r = E::one() / (ms * inv_gw + epse).sqrt();
                for j in 0..gw {
                    data[off + j] = chunk[j] * inv_r * tg.data()[g * gw + j];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::RmsNorm {
                x,
                gain,
                n_groups,
                eps,
            },
        ))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                let sig = E::one() / (E::one() + (-x).exp());
                x * sig
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("silu shape");
        self.push(value, Op::Silu(a))
    }

    /// Rotary position embedding over a [L, d_head] block; row index plus
    /// `pos_offset` is the position. Head dim must be even.
    pub fn rope(&mut self, x: VarId, base: f64, pos_offset: usize) -> Result<VarId> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if c % 2 != 0 {
            return Err(Error::shape(format!("rope head dim {c} is odd")));
        }
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c / 2 {
                let theta = rope_angle(i + pos_offset, j, c, base);
                let (sin, cos) = (E::from_f64(theta.sin()), E::from_f64(theta.cos()));
                let a = tx.data()[i * c + 2 * j];
                let b = tx.data()[i * c + 2 * j + 1];
                data[i * c + 2 * j] = a * cos - b * sin;
                data[i * c + 2 * j + 1] = a * sin + b * cos;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                base,
                pos_offset,
            },
        ))
    }

    /// Gather rows of `x` by index (also serves as embedding lookup).
    pub fn gather_rows(&mut self, x: VarId, idx: &[usize]) -> Result<VarId> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("gather_rows index {i} out of {r}")));
            }
            data.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec())))
    }

    /// Scatter-add rows of `x` into a zero [n_rows, c] tensor.
    pub fn scatter_add_rows(&mut self, x: VarId, idx: &[usize], n_rows: usize) -> Result<VarId> {
        let tx = self.value(x);
        let c = tx.cols();
        if tx.rows() != idx.len() {
            return Err(Error::shape(format!(
                "scatter_add_rows: {} rows vs {} indices",
                tx.rows(),
                idx.len()
            )));
        }
        let mut data = vec![E::zero(); n_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= n_rows {
                return Err(Error::shape(format!(
                    "scatter_add_rows index {dst} out of {n_rows}"
                )));
            }
            for j in 0..c {
                data[dst * c + j] = data[dst * c + j] + tx.data()[src * c + j];
            }
        }
        let value = Tensor::new(vec![n_rows, c], data)?;
        Ok(self.push(value, Op::ScatterAddRows(x, idx.to_vec(), n_rows)))
    }

    /// Multiply each row of `x` by the matching entry of vector `w`.
    pub fn scale_rows(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = (tx.rows(), tx.cols());
        if tw.len() != r {
            return Err(Error::shape(format!(
                "scale_rows: {} rows vs {} weights",
                r,
                tw.len()
            )));
        }
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            let wv = tw.data()[i];
            for j in 0..c {
                data[i * c + j] = tx.data()[i * c + j] * wv;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::ScaleRows(x, w)))
    }

    /// Pick individual (row, col) entries into a vector.
    pub fn gather_elems(&mut self, x: VarId, idx: &[(usize, usize)]) -> Result<VarId> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::shape(format!(
                    "gather_elems ({i},{j}) out of ({r},{c})"
                )));
            }
            data.push(tx.data()[i * c + j]);
        }
        let value = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(value, Op::GatherElems(x, idx.to_vec())))
    }

    /// Weighted cross-entropy from raw logits:
    /// `sum_i w_i * (logsumexp(z_i) - z_i[target_i])`. Rows with zero weight
    /// are skipped.
    pub fn masked_ce(&mut self, logits: VarId, targets: &[u32], weights: &[f64]) -> Result<VarId> {
        let tz = self.value(logits);
        let (r, c) = (tz.rows(), tz.cols());
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(format!(
                "masked_ce: {r} rows vs {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut total = E::zero();
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i] as usize;
            if t >= c {
                return Err(Error::shape(format!("masked_ce target {t} out of {c}")));
            }
            let row = &tz.data()[i * c..(i + 1) * c];
            let lse = logsumexp_row(row);
            total = total + E::from_f64(weights[i]) * (lse - row[t]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Result<Grads<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward from non-scalar"));
        }
        let mut slots: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(E::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.backward_node(i, &g, &mut slots)?;
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<E>>], id: VarId, contrib: Tensor<E>) {
        match &mut slots[id.0] {
            Some(acc) => {
                for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a = *a + c;
                }
            }
            s @ None => *s = Some(contrib),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<E>,
        slots: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let da: Vec<E> = g
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<E> = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(slots, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(slots, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Scale(a, c) => {
                let ce = E::from_f64(*c);
                let da: Vec<E> = g.data().iter().map(|&gv| gv * ce).collect();
                self.accumulate(
                    slots,
                    *a,
                    Tensor::new(self.value(*a).shape().to_vec(), da)?,
                );
            }
            Op::Matmul(a, b) => {
                // dA = G B^T ; dB = A^T G
                let bt = transpose_values(self.value(*b));
                let at = transpose_values(self.value(*a));
                self.accumulate(slots, *a, matmul_values(g, &bt));
                self.accumulate(slots, *b, matmul_values(&at, g));
            }
            Op::Transpose(a) => {
                self.accumulate(slots, *a, transpose_values(g));
            }
            Op::SliceCols(a, start, len) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![E::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..*len {
                        da[i2 * c + start + j] = g.data()[i2 * len + j];
                    }
                }
                self.accumulate(slots, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0usize;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = vec![E::zero(); r * c];
                    for i2 in 0..r {
                        dp[i2 * c..(i2 + 1) * c]
                            .copy_from_slice(&g.data()[i2 * total + off..i2 * total + off + c]);
                    }
                    self.accumulate(slots, p, Tensor::new(vec![r, c], dp)?);
                    off += c;
                }
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (g - sum(g*y))
                let y = &self.nodes[i].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![E::zero(); r * c];
                for i2 in 0..r {
                    let yrow = &y.data()[i2 * c..(i2 + 1) * c];
                    let grow = &g.data()[i2 * c..(i2 + 1) * c];
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + grow[j] * yrow[j];
                    }
                    for j in 0..c {
                        da[i2 * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(slots, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::LogSumExpRows(a) => {
                let tx = self.value(*a);
                let (r, c) = (tx.rows(), tx.cols());
                let mut da = vec![E::zero(); r * c];
                let mut sm = vec![E::zero(); c];
                for i2 in 0..r {
                    softmax_row(&tx.data()[i2 * c..(i2 + 1) * c], &mut sm);
                    let gv = g.data()[i2];
                    for j in 0..c {
                        da[i2 * c + j] = gv * sm[j];
                    }
                }
                self.accumulate(slots, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::ColMean(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let inv = E::from_f64(1.0 / r as f64);
                let mut da = vec![E::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        da[i2 * c + j] = g.data()[j] * inv;
                    }
                }
                self.accumulate(slots, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let gv = g.item();
                let da = vec![gv; ta.len()];
                self.accumulate(slots, *a, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::DotConstF64(a, c) => {
                let gv = g.item();
                let da: Vec<E> = c.iter().map(|&w| gv * E::from_f64(w)).collect();
                self.accumulate(
                    slots,
                    *a,
                    Tensor::new(self.value(*a).shape().to_vec(), da)?,
                );
            }
            Op::RmsNorm {
                x,
                gain,
                n_groups,
                eps,
            } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (r, c) = (tx.rows(), tx.cols());
                let gw = c / n_groups;
                let epse = E::from_f64(*eps);
                let inv_gw = E::from_f64(1.0 / gw as f64);
                let mut dx = vec![E::zero(); r * c];
                let mut dg = vec![E::zero(); c];
                for i2 in 0..r {
                    for grp in 0..*n_groups {
                        let off = i2 * c + grp * gw;
                        let chunk = &tx.data()[off..off + gw];
                        let grow = &g.data()[off..off + gw];
                        let mut ms = E::zero();
                        for &v in chunk {
                            ms = ms + v * v;
                        }
                        let rms_sq = ms * inv_gw + epse;
                        let inv_r = E::one() / rms_sq.sqrt();
                        // s = sum_j g_j * gain_j * x_j
                        let mut s = E::zero();
                        for j in 0..gw {
                            s = s + grow[j] * tg.data()[grp * gw + j] * chunk[j];
                        }
                        let coef = s * inv_gw * inv_r / rms_sq;
                        for j in 0..gw {
                            dx[off + j] =
                                inv_r * grow[j] * tg.data()[grp * gw + j] - chunk[j] * coef;
                            dg[grp * gw + j] = dg[grp * gw + j] + grow[j] * chunk[j] * inv_r;
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(vec![r, c], dx)?);
                self.accumulate(slots, *gain, Tensor::new(tg.shape().to_vec(), dg)?);
            }
            Op::Silu(a) => {
                let tx = self.value(*a);
                let da: Vec<E> = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let sig = E::one() / (E::one() + (-x).exp());
                        gv * sig * (E::one() + x * (E::one() - sig))
                    })
                    .collect();
                self.accumulate(slots, *a, Tensor::new(tx.shape().to_vec(), da)?);
            }
            Op::Rope {
                x,
                base,
                pos_offset,
            } => {
                // Inverse rotation.
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![E::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..c / 2 {
                        let theta = rope_angle(i2 + pos_offset, j, c, *base);
                        let (sin, cos) = (E::from_f64(theta.sin()), E::from_f64(theta.cos()));
                        let ga = g.data()[i2 * c + 2 * j];
                        let gb = g.data()[i2 * c + 2 * j + 1];
                        dx[i2 * c + 2 * j] = ga * cos + gb * sin;
                        dx[i2 * c + 2 * j + 1] = -ga * sin + gb * cos;
                    }
                }
                self.accumulate(slots, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![E::zero(); r * c];
                for (src, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[dst * c + j] = dx[dst * c + j] + g.data()[src * c + j];
                    }
                }
                self.accumulate(slots, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::ScatterAddRows(x, idx, _n_rows) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![E::zero(); idx.len() * c];
                for (src, &dst) in idx.iter().enumerate() {
                    dx[src * c..(src + 1) * c].copy_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                }
                self.accumulate(slots, *x, Tensor::new(vec![idx.len(), c], dx)?);
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![E::zero(); r * c];
                let mut dw = vec![E::zero(); r];
                for i2 in 0..r {
                    let wv = tw.data()[i2];
                    for j in 0..c {
                        dx[i2 * c + j] = g.data()[i2 * c + j] * wv;
                        dw[i2] = dw[i2] + g.data()[i2 * c + j] * tx.data()[i2 * c + j];
                    }
                }
                self.accumulate(slots, *x, Tensor::new(vec![r, c], dx)?);
                self.accumulate(slots, *w, Tensor::new(tw.shape().to_vec(), dw)?);
            }
            Op::GatherElems(x, idx) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![E::zero(); r * c];
                for (n, &(i2, j)) in idx.iter().enumerate() {
                    dx[i2 * c + j] = dx[i2 * c + j] + g.data()[n];
                }
                self.accumulate(slots, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::MaskedCe {
                logits,
                targets,
                weights,
            } => {
                let tz = self.value(*logits);
                let (r, c) = (tz.rows(), tz.cols());
                let gv = g.item();
                let mut dz = vec![E::zero(); r * c];
                let mut sm = vec![E::zero(); c];
                for i2 in 0..r {
                    if weights[i2] == 0.0 {
                        continue;
                    }
                    softmax_row(&tz.data()[i2 * c..(i2 + 1) * c], &mut sm);
                    let w = gv * E::from_f64(weights[i2]);
                    for j in 0..c {
                        dz[i2 * c + j] = w * sm[j];
                    }
                    let t = targets[i2] as usize;
                    dz[i2 * c + t] = dz[i2 * c + t] - w;
                }
                self.accumulate(slots, *logits, Tensor::new(vec![r, c], dz)?);
            }
        }
        Ok(())
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}
