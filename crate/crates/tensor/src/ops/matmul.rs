use crate::element::{gemm, Element, MatView};
use crate::error::{Result, TensorError};
use crate::shape::{broadcast_shapes, broadcast_strides, numel};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Matrix offsets (in units of whole matrices) of `a` and `b` for each
/// batch entry of the broadcast output.
fn batch_pairs(ba: &[usize], bb: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(ba, out);
    let sb = broadcast_strides(bb, out);
    let n = numel(out);
    let mut pairs = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..n {
        let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((oa, ob));
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    pairs
}

struct Plan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `None` when `b` has no batch axes and `a` can be flattened into one GEMM.
    pairs: Option<Vec<(usize, usize)>>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| TensorError::shape("matmul", a, b))?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let pairs = if bb.is_empty() { None } else { Some(batch_pairs(ba, bb, &batch)) };
    Ok(Plan { m, k, n, out_shape, pairs })
}

fn forward<E: Element>(p: &Plan, a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![E::zero(); numel(&p.out_shape)];
    match &p.pairs {
        None => {
            let rows = a.numel() / k;
            gemm(MatView::row_major(a.data(), rows, k), MatView::row_major(b.data(), k, n), &mut out, false);
        }
        Some(pairs) => {
            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                let av = MatView::row_major(&a.data()[ia * m * k..(ia + 1) * m * k], m, k);
                let bv = MatView::row_major(&b.data()[ib * k * n..(ib + 1) * k * n], k, n);
                gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
    }
    Tensor::from_parts(p.out_shape.clone(), out)
}

impl<'t, E: Element> Var<'t, E> {
    /// Batched matrix product `[.., M, K] · [.., K, N]` with broadcast batch axes.
    pub fn matmul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape("matmul", rhs)?;
        let p = plan(self.shape(), rhs.shape())?;
        let out = forward(&p, &self.value, &rhs.value).check_finite("matmul")?;
        let (a, b) = (self.value.clone(), rhs.value.clone());
        Ok(self.tape.record(out, &[self, rhs], move |g, needs| {
            let (m, k, n) = (p.m, p.k, p.n);
            let gd = g.data();
            let mut ga = needs[0].then(|| vec![E::zero(); a.numel()]);
            let mut gb = needs[1].then(|| vec![E::zero(); b.numel()]);
            match &p.pairs {
                None => {
                    let rows = a.numel() / k;
                    let gv = MatView::row_major(gd, rows, n);
                    if let Some(ga) = ga.as_mut() {
                        gemm(gv, MatView::row_major(b.data(), k, n).t(), ga, false);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(MatView::row_major(a.data(), rows, k).t(), gv, gb, false);
                    }
                }
                Some(pairs) => {
                    for (i, &(ia, ib)) in pairs.iter().enumerate() {
                        let gv = MatView::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                        if let Some(ga) = ga.as_mut() {
                            let bv = MatView::row_major(&b.data()[ib * k * n..(ib + 1) * k * n], k, n);
                            gemm(gv, bv.t(), &mut ga[ia * m * k..(ia + 1) * m * k], true);
                        }
                        if let Some(gb) = gb.as_mut() {
                            let av = MatView::row_major(&a.data()[ia * m * k..(ia + 1) * m * k], m, k);
                            gemm(av.t(), gv, &mut gb[ib * k * n..(ib + 1) * k * n], true);
                        }
                    }
                }
            }
            Ok(vec![
                ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
            ])
        }))
    }
}
