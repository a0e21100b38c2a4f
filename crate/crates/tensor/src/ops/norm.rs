use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, E: Element> Var<'t, E> {
    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the optional per-feature affine `γ·x̂ + β`.
    pub fn layer_norm(&self, gamma: Option<&Var<'t, E>>, beta: Option<&Var<'t, E>>, eps: f64) -> Result<Var<'t, E>> {
        let d = *self.shape().last().ok_or_else(|| TensorError::contract("layer_norm", "rank-0 input"))?;
        if eps <= 0.0 {
            return Err(TensorError::contract("layer_norm", format!("eps must be positive, got {eps}")));
        }
        for p in gamma.iter().chain(beta.iter()) {
            self.same_tape("layer_norm", p)?;
            if p.shape() != [d] {
                return Err(TensorError::shape("layer_norm", self.shape(), p.shape()));
            }
        }
        let rows = self.value.numel() / d;
        let x = self.value.data();
        let g = gamma.map(|v| v.value.clone());
        let b = beta.map(|v| v.value.clone());
        let inv_d = E::of(1.0 / d as f64);
        let eps_e = E::of(eps);
        let mut xhat = vec![E::zero(); rows * d];
        let mut rstd = vec![E::zero(); rows];
        let mut out = vec![E::zero(); rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(E::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(E::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rs = E::one() / (var + eps_e).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                let scaled = match &g {
                    Some(g) => h * g.data()[j],
                    None => h,
                };
                out[r * d + j] = match &b {
                    Some(b) => scaled + b.data()[j],
                    None => scaled,
                };
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), out).check_finite("layer_norm")?;
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let has_gamma = gamma.is_some();
        let has_beta = beta.is_some();
        let shape = self.shape().to_vec();
        Ok(self.tape.record(out, &parents, move |gout, needs| {
            let go = gout.data();
            let mut grads = Vec::with_capacity(3);
            if needs[0] {
                let mut gx = vec![E::zero(); rows * d];
                for r in 0..rows {
                    let gr = &go[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let dh = |j: usize| match &g {
                        Some(g) => gr[j] * g.data()[j],
                        None => gr[j],
                    };
                    let mut s1 = E::zero();
                    let mut s2 = E::zero();
                    for j in 0..d {
                        let v = dh(j);
                        s1 = s1 + v;
                        s2 = s2 + v * hr[j];
                    }
                    let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dh(j) - m1 - hr[j] * m2);
                    }
                }
                grads.push(Some(Tensor::from_parts(shape.clone(), gx)));
            } else {
                grads.push(None);
            }
            let mut idx = 1;
            if has_gamma {
                grads.push(needs[idx].then(|| {
                    let mut gg = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + go[r * d + j] * xhat[r * d + j];
                        }
                    }
                    Tensor::from_parts(vec![d], gg)
                }));
                idx += 1;
            }
            if has_beta {
                grads.push(needs[idx].then(|| {
                    let mut gb = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + go[r * d + j];
                        }
                    }
                    Tensor::from_parts(vec![d], gb)
                }));
            }
            Ok(grads)
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};
    use rand::SeedableRng;

    #[test]
    fn constant_rows_normalize_to_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3, 5], 7.25));
        let y = x.layer_norm(None, None, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_rows_have_zero_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[4, 16], &mut rng));
        let g = tape.constant(Tensor::ones(&[16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = x.layer_norm(Some(&g), Some(&b), 1e-5).unwrap();
        for row in y.value().data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
        }
    }
}
