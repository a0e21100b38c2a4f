use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::shape::{broadcast_shapes, broadcast_strides, contiguous_strides, for_each_row, numel};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Pointwise `f(a, b)` with numpy broadcasting.
pub fn broadcast_binary<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let inner = out_shape.last().copied().unwrap_or(1);
    let (ia, ib) = (sa.last().copied().unwrap_or(0), sb.last().copied().unwrap_or(0));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(numel(&out_shape));
    for_each_row(&out_shape, [&sa, &sb], |[oa, ob]| match (ia, ib) {
        (1, 0) => {
            let y = bd[ob];
            out.extend(ad[oa..oa + inner].iter().map(|&x| f(x, y)));
        }
        (0, 1) => {
            let x = ad[oa];
            out.extend(bd[ob..ob + inner].iter().map(|&y| f(x, y)));
        }
        (1, 1) => out.extend(ad[oa..oa + inner].iter().zip(&bd[ob..ob + inner]).map(|(&x, &y)| f(x, y))),
        _ => out.extend((0..inner).map(|j| f(ad[oa + j * ia], bd[ob + j * ib]))),
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Sums `g` over the axes along which `shape` was broadcast to produce it.
pub fn reduce_to_shape<E: Element>(g: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let out_shape = g.shape();
    if broadcast_shapes("reduce", shape, out_shape)? != out_shape {
        return Err(TensorError::shape("reduce", g.shape(), shape));
    }
    let st = broadcast_strides(shape, out_shape);
    let sg = contiguous_strides(out_shape);
    let inner = out_shape.last().copied().unwrap_or(1);
    let it = st.last().copied().unwrap_or(0);
    let gd = g.data();
    let mut acc = vec![E::zero(); numel(shape)];
    for_each_row(out_shape, [&sg, &st], |[og, ot]| {
        if it == 0 {
            let s = gd[og..og + inner].iter().fold(E::zero(), |s, &v| s + v);
            acc[ot] = acc[ot] + s;
        } else {
            for (a, &v) in acc[ot..ot + inner].iter_mut().zip(&gd[og..og + inner]) {
                *a = *a + v;
            }
        }
    });
    Ok(Tensor::from_parts(shape.to_vec(), acc))
}

impl<'t, E: Element> Var<'t, E> {
    pub fn add(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape("add", rhs)?;
        let out = broadcast_binary("add", &self.value, &rhs.value, |x, y| x + y)?.check_finite("add")?;
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Ok(self.tape.record(out, &[self, rhs], move |g, needs| {
            Ok(vec![
                needs[0].then(|| reduce_to_shape(g, &sa)).transpose()?,
                needs[1].then(|| reduce_to_shape(g, &sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape("sub", rhs)?;
        let out = broadcast_binary("sub", &self.value, &rhs.value, |x, y| x - y)?.check_finite("sub")?;
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Ok(self.tape.record(out, &[self, rhs], move |g, needs| {
            Ok(vec![
                needs[0].then(|| reduce_to_shape(g, &sa)).transpose()?,
                needs[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)).transpose()?,
            ])
        }))
    }

    pub fn mul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape("mul", rhs)?;
        let out = broadcast_binary("mul", &self.value, &rhs.value, |x, y| x * y)?.check_finite("mul")?;
        let (a, b) = (self.value.clone(), rhs.value.clone());
        Ok(self.tape.record(out, &[self, rhs], move |g, needs| {
            let ga = if needs[0] {
                Some(reduce_to_shape(&broadcast_binary("mul", g, &b, |x, y| x * y)?, a.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(reduce_to_shape(&broadcast_binary("mul", g, &a, |x, y| x * y)?, b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape("div", rhs)?;
        if crate::mode::checked() && rhs.value.data().iter().any(|v| v.is_zero()) {
            return Err(TensorError::Domain { op: "div", msg: "division by zero".into() });
        }
        let out = broadcast_binary("div", &self.value, &rhs.value, |x, y| x / y)?.check_finite("div")?;
        let (a, b, q) = (self.value.clone(), rhs.value.clone(), out.clone());
        Ok(self.tape.record(out, &[self, rhs], move |g, needs| {
            let ga = if needs[0] {
                Some(reduce_to_shape(&broadcast_binary("div", g, &b, |x, y| x / y)?, a.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                // d(a/b)/db = -(a/b)/b
                let gq = broadcast_binary("div", g, &q, |x, y| x * y)?;
                Some(reduce_to_shape(&broadcast_binary("div", &gq, &b, |x, y| -x / y)?, b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Materializes a broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, E>> {
        if broadcast_shapes("broadcast_to", self.shape(), shape)? != shape {
            return Err(TensorError::shape("broadcast_to", self.shape(), shape));
        }
        let out = broadcast_binary("broadcast_to", &self.value, &Tensor::zeros(shape), |x, _| x)?;
        let src = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| Ok(vec![Some(reduce_to_shape(g, &src)?)])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn add_zero_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 4.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(x.add(&z).unwrap().value().bit_eq(x.value()));
    }

    #[test]
    fn broadcast_matches_materialized() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.25));
        let b = tape.constant(Tensor::from_fn(&[3, 1], |i| i as f32 - 1.0));
        let direct = x.add(&b).unwrap();
        let mat = x.add(&b.broadcast_to(&[2, 3, 4]).unwrap()).unwrap();
        assert!(direct.value().bit_eq(mat.value()));
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::<f64>::ones(&[2, 3, 4]);
        let r = reduce_to_shape(&g, &[3, 1]).unwrap();
        assert_eq!(r.shape(), &[3, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        assert!(matches!(a.div(&b), Err(TensorError::Domain { .. })));
    }
}
