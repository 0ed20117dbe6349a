use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A scalar loss together with its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct Loss<T = f32> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NnError::Tensor(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(NnError::Tensor(format!("{what}: empty input")));
    }
    Ok(())
}

/// Mean squared error `mean((pred - target)^2)`.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    same_shape(pred, target, "mse")?;
    let n = T::from_usize(pred.len()).expect("len fits");
    let two = T::lit(2.0);
    let mut value = T::zero();
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            two * d / n
        })
        .collect();
    Ok(Loss {
        value: value / n,
        grad: Tensor::new(pred.shape(), grad)?,
    })
}

/// Binary cross entropy on logits against `{0, 1}` (or soft) labels, averaged
/// over elements. Numerically stable for large |logit|.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<Loss<T>> {
    same_shape(logits, labels, "cross_entropy")?;
    let n = T::from_usize(logits.len()).expect("len fits");
    let mut value = T::zero();
    let grad: Vec<T> = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| {
            value += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    Ok(Loss {
        value: value / n,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Cosine similarity with gradients for both arguments.
#[derive(Clone, Debug)]
pub struct Cosine<T> {
    pub value: T,
    pub grad_u: Vec<T>,
    pub grad_v: Vec<T>,
    /// Set when either vector has (numerically) zero norm; the similarity is
    /// then defined as 0 with zero gradients.
    pub degenerate: bool,
}

fn norm_floor<T: Real>() -> T {
    T::lit(1e-24)
}

/// Cosine similarity in `[-1, 1]`. A zero-norm argument yields 0 and a
/// warning.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> T {
    let c = cosine_with_grad(u, v, false);
    if c.degenerate {
        log::warn!("cosine similarity of a zero-norm vector; treating as 0");
    }
    c.value
}

pub fn cosine_with_grad<T: Real>(u: &[T], v: &[T], want_grad: bool) -> Cosine<T> {
    assert_eq!(u.len(), v.len(), "cosine of unequal lengths");
    let (mut uu, mut vv, mut uv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        uu += a * a;
        vv += b * b;
        uv += a * b;
    }
    if uu < norm_floor() || vv < norm_floor() {
        return Cosine {
            value: T::zero(),
            grad_u: if want_grad { vec![T::zero(); u.len()] } else { Vec::new() },
            grad_v: if want_grad { vec![T::zero(); v.len()] } else { Vec::new() },
            degenerate: true,
        };
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    let s = uv / (nu * nv);
    let value = s.max(-T::one()).min(T::one());
    let (grad_u, grad_v) = if want_grad {
        // d s / d u = v / (|u||v|) - s u / |u|^2
        let gu = u
            .iter()
            .zip(v)
            .map(|(&a, &b)| b / (nu * nv) - s * a / uu)
            .collect();
        let gv = u
            .iter()
            .zip(v)
            .map(|(&a, &b)| a / (nu * nv) - s * b / vv)
            .collect();
        (gu, gv)
    } else {
        (Vec::new(), Vec::new())
    };
    Cosine {
        value,
        grad_u,
        grad_v,
        degenerate: false,
    }
}
