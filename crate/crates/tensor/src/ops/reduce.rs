use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::binary::broadcast_binary;

fn sum_axis_tensor<E: Element>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let d = x.data();
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
    }
    let mut keep = shape.to_vec();
    keep[axis] = 1;
    Tensor::from_parts(keep, out)
}

impl<'t, E: Element> Var<'t, E> {
    pub fn sum_all(&self) -> Result<Var<'t, E>> {
        let s = self.value.data().iter().fold(E::zero(), |a, &b| a + b);
        let out = Tensor::scalar(s).check_finite("sum")?;
        let shape = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])))
    }

    pub fn mean_all(&self) -> Result<Var<'t, E>> {
        let n = self.value.numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, E>> {
        let rank = self.value.rank();
        if axis >= rank {
            return Err(TensorError::contract("sum_axis", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut out = sum_axis_tensor(&self.value, axis).check_finite("sum_axis")?;
        let kept = out.shape().to_vec();
        if !keepdim {
            let mut squeezed = kept.clone();
            squeezed.remove(axis);
            out = out.reshape(&squeezed)?;
        }
        let src = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let g = g.reshape(&kept)?;
            Ok(vec![Some(broadcast_binary("sum_axis", &g, &Tensor::zeros(&src), |x, _| x)?)])
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, E>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::contract("mean_axis", format!("axis {axis} out of range")))?;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sum_axis_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s0 = x.sum_axis(0, false).unwrap();
        assert_eq!(s0.value().data(), &[3.0, 5.0, 7.0]);
        let s1 = x.sum_axis(1, true).unwrap();
        assert_eq!(s1.shape(), &[2, 1]);
        assert_eq!(s1.value().data(), &[3.0, 12.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.watch(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&x).unwrap().data().iter().all(|&v| v == 1.0));

        let tape = Tape::<f64>::new();
        let x = tape.watch(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let loss = x.add(&x).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0]);
    }
}
