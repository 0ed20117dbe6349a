use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{Gradients, Network};
use crate::real::Real;
use crate::tensor::Tensor;

/// Updates a network's parameters from a set of gradients.
pub trait Optimizer<T: Real> {
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()>;
}

fn check_grads<T: Real>(net: &Network<T>, grads: &Gradients<T>) -> Result<()> {
    let params = net.params();
    if params.len() != grads.params.len() {
        return Err(NnError::GradientMismatch(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.params).enumerate() {
        if p.shape() != g.shape() {
            return Err(NnError::GradientMismatch(format!(
                "parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient(i));
        }
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    lr: T,
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if !(lr >= T::zero()) || !lr.is_finite() {
            return Err(NnError::Hyper(format!("learning rate {lr} must be >= 0")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(NnError::Hyper(format!("momentum {momentum} not in [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        check_grads(net, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.params.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.params)
            .zip(&mut self.velocity)
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T) -> Result<Self> {
        if !(lr >= T::zero()) {
            return Err(NnError::Hyper(format!("learning rate {lr} must be >= 0")));
        }
        for b in [beta1, beta2] {
            if !(b >= T::zero() && b < T::one()) {
                return Err(NnError::Hyper(format!("beta {b} not in [0, 1)")));
            }
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        check_grads(net, grads)?;
        if self.m.is_empty() {
            self.m = grads.params.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.params)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Serializable optimizer choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn build<T: Real>(&self) -> Result<Box<dyn Optimizer<T> + Send>> {
        Ok(match *self {
            OptimizerConfig::Sgd { lr, momentum } => Box::new(Sgd::new(T::lit(lr), T::lit(momentum))?),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Box::new(Adam::new(T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps))?),
        })
    }
}
