use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::shape::{contiguous_strides, for_each_row, numel};
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) fn permute_tensor<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let src_strides = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let ps: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let inner = out_shape.last().copied().unwrap_or(1);
    let step = ps.last().copied().unwrap_or(1);
    let d = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for_each_row(&out_shape, [&ps], |[o]| {
        if step == 1 {
            out.extend_from_slice(&d[o..o + inner]);
        } else {
            out.extend((0..inner).map(|j| d[o + j * step]));
        }
    });
    Tensor::from_parts(out_shape, out)
}

/// Copies `len` entries starting at `start` along `axis`.
fn narrow_tensor<E: Element>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Tensor<E> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let d = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::from_parts(s, out)
}

/// Inverse of [`narrow_tensor`]: embeds `g` into zeros of `full` shape.
fn pad_tensor<E: Element>(g: &Tensor<E>, full: &[usize], axis: usize, start: usize) -> Tensor<E> {
    let outer: usize = full[..axis].iter().product();
    let n = full[axis];
    let len = g.shape()[axis];
    let inner: usize = full[axis + 1..].iter().product();
    let mut out = vec![E::zero(); numel(full)];
    let gd = g.data();
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

impl<'t, E: Element> Var<'t, E> {
    /// Zero-copy reshape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, E>> {
        let out = self.value.reshape(shape)?;
        let src = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| Ok(vec![Some(g.reshape(&src)?)])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, E>> {
        let rank = self.value.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::contract("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out = permute_tensor(&self.value, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape.record(out, &[self], move |g, _| Ok(vec![Some(permute_tensor(g, &inverse))])))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Var<'t, E>> {
        let rank = self.value.rank();
        if rank < 2 {
            return Err(TensorError::contract("t", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::contract(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let out = narrow_tensor(&self.value, axis, start, len);
        Ok(self.tape.record(out, &[self], move |g, _| Ok(vec![Some(pad_tensor(g, &shape, axis, start))])))
    }

    /// Splits `axis` into `n` equal chunks.
    pub fn chunk(&self, n: usize, axis: usize) -> Result<Vec<Var<'t, E>>> {
        let extent = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::contract("chunk", format!("axis {axis} out of range")))?;
        if n == 0 || extent % n != 0 {
            return Err(TensorError::contract("chunk", format!("extent {extent} not divisible by {n}")));
        }
        let len = extent / n;
        (0..n).map(|i| self.narrow(axis, i * len, len)).collect()
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, E: Element>(parts: &[&Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
    let first = parts.first().ok_or_else(|| TensorError::contract("concat", "no operands"))?;
    let base = first.shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::contract("concat", format!("axis {axis} out of range")));
    }
    for p in parts {
        first.same_tape("concat", p)?;
        let s = p.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(TensorError::shape("concat", &base, s));
        }
    }
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &n) in parts.iter().zip(&extents) {
            out.extend_from_slice(&p.value.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let value = Tensor::from_parts(shape, out);
    Ok(first.tape.record(value, parts, move |g, needs| {
        let mut start = 0;
        let mut grads = Vec::with_capacity(extents.len());
        for (&n, &need) in extents.iter().zip(needs) {
            grads.push(need.then(|| narrow_tensor(g, axis, start, n)));
            start += n;
        }
        Ok(grads)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(p.data()[(a * 2 + b) * 3 + c], x.data()[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[2, 2, 1], |i| 100.0 + i as f32));
        let c = concat(&[&a, &b], 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 4]);
        assert!(c.narrow(2, 0, 3).unwrap().value().bit_eq(a.value()));
        assert!(c.narrow(2, 3, 1).unwrap().value().bit_eq(b.value()));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let tape = Tape::<f64>::new();
        let src = Tensor::from_fn(&[3, 4], |i| i as f64);
        let snapshot = src.to_vec();
        let x = tape.watch(src.clone());
        let y = x.t().unwrap().narrow(0, 1, 2).unwrap().square().unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(src.data(), snapshot.as_slice());
    }
}
