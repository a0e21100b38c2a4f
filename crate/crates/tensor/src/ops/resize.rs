use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source taps for one axis under the half-pixel (align-corners = false)
/// convention: `(i0, i1, w1)` with the output equal to `(1-w1)·x[i0] + w1·x[i1]`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct Resize {
    lead: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl Resize {
    fn new(shape: &[usize], oh: usize, ow: usize) -> Result<Self> {
        if shape.len() < 3 || oh == 0 || ow == 0 {
            return Err(TensorError::contract(
                "bilinear_resize",
                format!("need [.., H, W, C] input and positive output extents, got {shape:?} -> {oh}x{ow}"),
            ));
        }
        let r = shape.len();
        let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        Ok(Resize {
            lead: shape[..r - 3].iter().product(),
            h,
            w,
            c,
            oh,
            ow,
            ys: axis_taps(h, oh),
            xs: axis_taps(w, ow),
        })
    }

    fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        let r = s.len();
        s[r - 3] = self.oh;
        s[r - 2] = self.ow;
        s
    }

    /// Calls `f(src_index, dst_index, weight)` for each of the four taps of every output element.
    fn visit(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (h, w, c, oh, ow) = (self.h, self.w, self.c, self.oh, self.ow);
        for b in 0..self.lead {
            for (oy, &(y0, y1, ly)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in self.xs.iter().enumerate() {
                    let dst = ((b * oh + oy) * ow + ox) * c;
                    let taps = [
                        (y0, x0, (1.0 - ly) * (1.0 - lx)),
                        (y0, x1, (1.0 - ly) * lx),
                        (y1, x0, ly * (1.0 - lx)),
                        (y1, x1, ly * lx),
                    ];
                    for (y, x, wgt) in taps {
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = ((b * h + y) * w + x) * c;
                        for ch in 0..c {
                            f(src + ch, dst + ch, wgt);
                        }
                    }
                }
            }
        }
    }
}

/// Forward-only bilinear resize of `[.., H, W, C]`.
pub fn bilinear_resize_tensor<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let plan = Resize::new(x.shape(), out_h, out_w)?;
    let mut out = vec![E::zero(); plan.lead * out_h * out_w * plan.c];
    let d = x.data();
    plan.visit(|s, o, wgt| out[o] = out[o] + E::of(wgt) * d[s]);
    Ok(Tensor::from_parts(plan.out_shape(x.shape()), out))
}

/// Differentiable bilinear resize (half-pixel centers) of `[.., H, W, C]`.
pub fn bilinear_resize<'t, E: Element>(x: &Var<'t, E>, out_h: usize, out_w: usize) -> Result<Var<'t, E>> {
    let out = bilinear_resize_tensor(&x.value, out_h, out_w)?.check_finite("bilinear_resize")?;
    let plan = Resize::new(x.shape(), out_h, out_w)?;
    let src_shape = x.shape().to_vec();
    Ok(x.tape.record(out, &[x], move |g, _| {
        let mut gx = vec![E::zero(); g.numel() / (plan.oh * plan.ow) * plan.h * plan.w];
        let gd = g.data();
        plan.visit(|s, o, wgt| gx[s] = gx[s] + E::of(wgt) * gd[o]);
        Ok(vec![Some(Tensor::from_parts(src_shape.clone(), gx))])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 5, 2], |i| (i as f64 * 0.37).sin());
        let y = bilinear_resize_tensor(&x, 3, 5).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn single_pixel_broadcasts() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1], &[4.5]).unwrap();
        let y = bilinear_resize_tensor(&x, 3, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.5));
    }
}
