use rayon::prelude::*;

use crate::element::{gemm, Element, MatView};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Row-wise max-subtracted softmax, in place.
fn softmax_rows<E: Element>(s: &mut [E], t: usize) {
    for row in s.chunks_mut(t) {
        let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = E::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Runs `f(slice_index, out_chunk)` over all (batch, head) slices.
fn for_slices<E: Element>(out: &mut [E], chunk: usize, f: impl Fn(usize, &mut [E]) + Sync) {
    if crate::mode::strict() {
        out.chunks_mut(chunk).enumerate().for_each(|(i, o)| f(i, o));
    } else {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, o)| f(i, o));
    }
}

/// `softmax(q·kᵀ/√Dh)·v` over `[B, H, T, Dh]` operands; the attention
/// matrix is materialized per (batch, head).
pub fn softmax_attention<'t, E: Element>(q: &Var<'t, E>, k: &Var<'t, E>, v: &Var<'t, E>) -> Result<Var<'t, E>> {
    q.same_tape("attention", k)?;
    q.same_tape("attention", v)?;
    let shape = q.shape().to_vec();
    if shape.len() != 4 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(TensorError::shape("attention", q.shape(), k.shape()));
    }
    let (t, dh) = (shape[2], shape[3]);
    let slices = shape[0] * shape[1];
    let scale = E::of(1.0 / (dh as f64).sqrt());
    let keep_probs = q.tape.is_recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());

    let (qd, kd, vd) = (q.value.data(), k.value.data(), v.value.data());
    let mut out = vec![E::zero(); slices * t * dh];
    let mut probs = if keep_probs { vec![E::zero(); slices * t * t] } else { Vec::new() };

    let kernel = |i: usize, o: &mut [E], p: &mut [E]| {
        let span = i * t * dh..(i + 1) * t * dh;
        let qs = MatView::row_major(&qd[span.clone()], t, dh);
        let ks = MatView::row_major(&kd[span.clone()], t, dh);
        let vs = MatView::row_major(&vd[span], t, dh);
        gemm(qs, ks.t(), p, false);
        p.iter_mut().for_each(|s| *s = *s * scale);
        softmax_rows(p, t);
        gemm(MatView::row_major(p, t, t), vs, o, false);
    };
    if keep_probs {
        let pairs: Vec<(&mut [E], &mut [E])> = out.chunks_mut(t * dh).zip(probs.chunks_mut(t * t)).collect();
        if crate::mode::strict() {
            pairs.into_iter().enumerate().for_each(|(i, (o, p))| kernel(i, o, p));
        } else {
            pairs.into_par_iter().enumerate().for_each(|(i, (o, p))| kernel(i, o, p));
        }
    } else {
        for_slices(&mut out, t * dh, |i, o| {
            let mut p = vec![E::zero(); t * t];
            kernel(i, o, &mut p);
        });
    }
    let out = Tensor::from_parts(shape.clone(), out).check_finite("attention")?;

    let (qv, kv, vv) = (q.value.clone(), k.value.clone(), v.value.clone());
    Ok(q.tape.record(out, &[q, k, v], move |g, needs| {
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let n = slices * t * dh;
        let mut gq = vec![E::zero(); n];
        let mut gk = vec![E::zero(); n];
        let mut gv = vec![E::zero(); n];
        let work = |i: usize, (gq, gk, gv): (&mut [E], &mut [E], &mut [E])| {
            let span = i * t * dh..(i + 1) * t * dh;
            let p = &probs[i * t * t..(i + 1) * t * t];
            let pv = MatView::row_major(p, t, t);
            let go = MatView::row_major(&gd[span.clone()], t, dh);
            if needs[2] {
                gemm(pv.t(), go, gv, false);
            }
            if needs[0] || needs[1] {
                let mut dp = vec![E::zero(); t * t];
                gemm(go, MatView::row_major(&vd[span.clone()], t, dh).t(), &mut dp, false);
                for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                    let dot = drow.iter().zip(prow).fold(E::zero(), |s, (&a, &b)| s + a * b);
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                let ds = MatView::row_major(&dp, t, t);
                if needs[0] {
                    gemm(ds, MatView::row_major(&kd[span.clone()], t, dh), gq, false);
                }
                if needs[1] {
                    gemm(ds.t(), MatView::row_major(&qd[span], t, dh), gk, false);
                }
            }
        };
        let triples: Vec<_> = gq
            .chunks_mut(t * dh)
            .zip(gk.chunks_mut(t * dh))
            .zip(gv.chunks_mut(t * dh))
            .map(|((a, b), c)| (a, b, c))
            .collect();
        if crate::mode::strict() {
            triples.into_iter().enumerate().for_each(|(i, s)| work(i, s));
        } else {
            triples.into_par_iter().enumerate().for_each(|(i, s)| work(i, s));
        }
        let wrap = |need: bool, d: Vec<E>| need.then(|| Tensor::from_parts(shape.clone(), d));
        Ok(vec![wrap(needs[0], gq), wrap(needs[1], gk), wrap(needs[2], gv)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use rand::SeedableRng;

    #[test]
    fn single_token_returns_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[2, 3, 1, 4], &mut rng));
        let k = tape.constant(Tensor::randn(&[2, 3, 1, 4], &mut rng));
        let v = tape.constant(Tensor::randn(&[2, 3, 1, 4], &mut rng));
        let o = softmax_attention(&q, &k, &v).unwrap();
        assert!(o.value().bit_eq(v.value()));
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[1, 1, 4, 2], &mut rng));
        let k = tape.constant(Tensor::from_fn(&[1, 1, 4, 2], |i| if i % 2 == 0 { 0.3 } else { -1.2 }));
        let v = tape.constant(Tensor::randn(&[1, 1, 4, 2], &mut rng));
        let o = softmax_attention(&q, &k, &v).unwrap();
        let vd = v.value().data();
        let mean = [(0..4).map(|r| vd[r * 2]).sum::<f64>() / 4.0, (0..4).map(|r| vd[r * 2 + 1]).sum::<f64>() / 4.0];
        for row in o.value().data().chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-12 && (row[1] - mean[1]).abs() < 1e-12);
        }
    }
}
