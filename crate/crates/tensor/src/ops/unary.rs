use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu<E: Element>(x: E) -> E {
    let half = E::of(0.5);
    let u = E::of(SQRT_2_OVER_PI) * (x + E::of(GELU_CUBIC) * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::of(0.5);
    let c = E::of(SQRT_2_OVER_PI);
    let k = E::of(GELU_CUBIC);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (E::one() + E::of(3.0) * k * x * x);
    half * (E::one() + th) + half * x * (E::one() - th * th) * du
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'t, E: Element> Var<'t, E> {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Result<Var<'t, E>> {
        let out = self.value.map(f).check_finite(op)?;
        let (x, y) = (self.value.clone(), out.clone());
        Ok(self.tape.record(out, &[self], move |g, _| {
            // df receives (input, output); the product with g is elementwise.
            let local = zip_map(&x, &y, &df);
            Ok(vec![Some(zip_map(g, &local, |a, b| a * b))])
        }))
    }

    pub fn exp(&self) -> Result<Var<'t, E>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<'t, E>> {
        if crate::mode::checked() && self.value.data().iter().any(|&v| v <= E::zero()) {
            return Err(TensorError::Domain { op: "log", msg: "non-positive argument".into() });
        }
        self.unary("log", |x| x.ln(), |x, _| E::one() / x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t, E>> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Result<Var<'t, E>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (E::one() + x * (E::one() - s))
            },
        )
    }

    pub fn neg(&self) -> Result<Var<'t, E>> {
        self.unary("neg", |x| -x, |_, _| -E::one())
    }

    /// |x|, with derivative 0 at the kink.
    pub fn abs(&self) -> Result<Var<'t, E>> {
        self.unary("abs", |x| x.abs(), |x, _| if x > E::zero() { E::one() } else if x < E::zero() { -E::one() } else { E::zero() })
    }

    pub fn square(&self) -> Result<Var<'t, E>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Var<'t, E>> {
        if crate::mode::checked() && self.value.data().iter().any(|&v| v < E::zero()) {
            return Err(TensorError::Domain { op: "sqrt", msg: "negative argument".into() });
        }
        self.unary("sqrt", |x| x.sqrt(), |_, y| E::of(0.5) / y)
    }

    /// `c · x`.
    pub fn scale(&self, c: f64) -> Result<Var<'t, E>> {
        let c = E::of(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    /// `x + c`.
    pub fn offset(&self, c: f64) -> Result<Var<'t, E>> {
        let c = E::of(c);
        self.unary("offset", move |x| x + c, |_, _| E::one())
    }
}
