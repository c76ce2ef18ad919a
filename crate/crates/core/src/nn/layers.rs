use ndarray::{Array, Array1, Array2, Array5, ArrayView1, ArrayView2, ArrayView5, ArrayD, Axis, Dimension, Ix1, Ix2, Ix5};
use rand::Rng;

use super::tensor::{glorot_uniform, Parameter, Params};
use crate::error::{Error, Result};
use crate::gconv::{backward_lift_gconv3d, expand_filters, conv3d_valid, FilterBank};
use crate::group::StabilizerSet;

/// Width of the per-point feature rows.
pub const POINT_FEATURE_WIDTH: usize = 64;

/// `x W + b` for row vectors.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(Error::Shape(format!(
            "linear: x {:?}, W {:?}, b {}",
            x.dim(),
            w.dim(),
            b.len()
        )));
    }
    let mut y = x.dot(&w);
    y += &b;
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(&dy), dy.sum_axis(Axis(0)))
}

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through relu given its input; zero at the kink.
pub fn relu_backward<D: Dimension>(pre: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), ArrayD::zeros(vec![outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value().shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value().view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    fn b(&self) -> ArrayView1<'_, f64> {
        self.bias.value().view().into_dimensionality::<Ix1>().expect("1-d bias")
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        linear(x, self.w(), self.b())
    }

    /// Returns `dx` and `[dW, db]`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, [ArrayD<f64>; 2]) {
        let (dx, dw, db) = linear_backward(x, self.w(), dy);
        (dx, [dw.into_dyn(), db.into_dyn()])
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of linear layers with relu between them (and after the last one
/// when `final_relu`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

/// Layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths` includes the input width: `[in, h1, .., out]`.
    pub fn new(name: &str, widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, final_relu }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.final_relu
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view())?;
            cache.inputs.push(h);
            h = if self.activated(i) { relu(&z) } else { z.clone() };
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    /// Returns `dx` and parameter gradients in [`Params::params`] order.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>) -> (Array2<f64>, Vec<ArrayD<f64>>) {
        let mut grads = vec![None; self.layers.len()];
        let mut d = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                d = relu_backward(&cache.pre[i], &d);
            }
            let (dx, g) = layer.backward(cache.inputs[i].view(), d.view());
            grads[i] = Some(g);
            d = dx;
        }
        (d, grads.into_iter().flat_map(|g| g.expect("filled")).collect())
    }
}

impl Params for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Params::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Params::params_mut).collect()
    }
}

/// `(n, 64)` per-point feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPointFeatures {
    pub values: Array2<f64>,
}

/// Applies the same MLP (relu after every layer) to each point row.
pub fn shared_point_mlp(points: ArrayView2<f64>, mlp: &Mlp) -> Result<(PerPointFeatures, MlpCache)> {
    if points.nrows() == 0 {
        return Err(Error::Shape("no points".into()));
    }
    if mlp.outputs() != POINT_FEATURE_WIDTH {
        return Err(Error::Shape(format!(
            "point MLP must end at {POINT_FEATURE_WIDTH}, ends at {}",
            mlp.outputs()
        )));
    }
    let (values, cache) = mlp.forward(points)?;
    Ok((PerPointFeatures { values }, cache))
}

/// Columnwise maximum over points and the (lowest) row index attaining it.
pub fn max_pool_points(features: ArrayView2<f64>) -> Result<(Array1<f64>, Vec<usize>)> {
    let (n, c) = features.dim();
    if n == 0 {
        return Err(Error::Shape("max pool over zero points".into()));
    }
    let mut best = features.row(0).to_owned();
    let mut arg = vec![0; c];
    for i in 1..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    Ok((best, arg))
}

/// Routes each column's gradient to its argmax row.
pub fn max_pool_points_backward(argmax: &[usize], dy: ArrayView1<f64>, n: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((n, dy.len()));
    for (j, (&i, &g)) in argmax.iter().zip(dy.iter()).enumerate() {
        dx[[i, j]] = g;
    }
    dx
}

/// Lifting group-convolution layer with trainable base filters.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftLayer {
    /// `(K, K, K, C_in, C_out)`
    pub weight: Parameter,
    /// `(C_out)`
    pub bias: Parameter,
    pub stabilizer: StabilizerSet,
}

impl LiftLayer {
    pub fn new(
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stabilizer: StabilizerSet,
        rng: &mut impl Rng,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        LiftLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                glorot_uniform(&[kernel, kernel, kernel, c_in, c_out], k3 * c_in, k3 * c_out, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), ArrayD::zeros(vec![c_out])),
            stabilizer,
        }
    }

    /// Channels produced: `P * C_out`.
    pub fn outputs(&self) -> usize {
        self.stabilizer.len() * self.weight.value().shape()[4]
    }

    pub fn bank(&self) -> FilterBank<f64> {
        FilterBank {
            weights: self.weight.value().clone().into_dimensionality::<Ix5>().expect("5-d"),
            bias: self.bias.value().clone().into_dimensionality::<Ix1>().expect("1-d"),
        }
    }

    pub fn forward(&self, x: ArrayView5<f64>) -> Result<Array5<f64>> {
        let e = expand_filters(&self.bank(), &self.stabilizer)?;
        conv3d_valid(x, e.weights.view(), e.bias.view())
    }

    pub fn backward(&self, x: ArrayView5<f64>, dy: ArrayView5<f64>) -> Result<(Array5<f64>, [ArrayD<f64>; 2])> {
        let g = backward_lift_gconv3d(x, &self.bank(), &self.stabilizer, dy)?;
        Ok((g.input, [g.bank.weights.into_dyn(), g.bank.bias.into_dyn()]))
    }
}

impl Params for LiftLayer {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}
