//! Parameter handles for convolution and perceptron layers, with
//! registration, initialization and graph application.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ops::{Conv2dParams, ConvGeometry, MlpParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor4};

/// Random normal tensor with the given standard deviation.
pub fn normal_tensor<T: Element, R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Tensor4<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor4::from_fn(shape, |_, _, _, _| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl ConvIds {
    /// Registers `{prefix}.w` `(out, in, k, k)` drawn from N(0, gain/fan_in)
    /// and a zero `{prefix}.b`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geometry: ConvGeometry,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (cin * k * k) as f64;
        let weight = store.insert(format!("{prefix}.w"), normal_tensor([cout, cin, k, k], (gain / fan_in).sqrt(), rng))?;
        let bias = store.insert(format!("{prefix}.b"), Tensor4::zeros([1, cout, 1, 1]))?;
        Ok(ConvIds { weight, bias, geometry })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.geometry)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.shape(self.weight).n
    }

    /// Snapshot of the current values.
    pub fn params<T: Element>(&self, store: &ParamStore<T>) -> Conv2dParams<T> {
        Conv2dParams {
            weight: store.value(self.weight).clone(),
            bias: store.value(self.bias).clone(),
            geometry: self.geometry,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    /// Registers `{prefix}.w` `(1, 1, in, out)` and zero `{prefix}.b`.
    /// `gain == 0` gives an all-zero weight.
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = if gain == 0.0 {
            Tensor4::zeros([1, 1, fin, fout])
        } else {
            normal_tensor([1, 1, fin, fout], (gain / fin as f64).sqrt(), rng)
        };
        let weight = store.insert(format!("{prefix}.w"), w)?;
        let bias = store.insert(format!("{prefix}.b"), Tensor4::zeros([1, fout, 1, 1]))?;
        Ok(LinearIds { weight, bias })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Handles of a one-hidden-layer perceptron with ReLU hidden activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIds {
    pub hidden: LinearIds,
    pub output: LinearIds,
}

impl MlpIds {
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MlpIds {
            hidden: LinearIds::register(store, &format!("{prefix}.fc1"), width, hidden, 2.0, rng)?,
            output: LinearIds::register(store, &format!("{prefix}.fc2"), hidden, width, 1.0, rng)?,
        })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.apply(g, store, x)?;
        let h = g.relu(h);
        self.output.apply(g, store, h)
    }

    pub fn params<T: Element>(&self, store: &ParamStore<T>) -> MlpParams<T> {
        MlpParams {
            w1: store.value(self.hidden.weight).clone(),
            b1: store.value(self.hidden.bias).clone(),
            w2: store.value(self.output.weight).clone(),
            b2: store.value(self.output.bias).clone(),
        }
    }
}
