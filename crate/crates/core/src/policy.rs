//! Control policies mapping `[y, y_min, y_max, d]` features to a control.
//!
//! [`MlpPolicy`] is the trained controller: GELU hidden layers followed by an
//! affine sigmoid that keeps the output inside `(u_min, u_max)`.
//! [`LinearPolicy`] is an unbounded affine map kept for analytic gradient
//! checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gelu, sigmoid, Gradients, NodeRef, Shape, Tape};
use crate::error::{Error, Result, ShapeError};
use crate::linalg::Matrix;

/// Tape handles for a policy's parameter blocks, in flat parameter order.
#[derive(Debug, Clone)]
pub struct ParamNodes(pub Vec<NodeRef>);

impl ParamNodes {
    /// Gathers the gradient blocks into one flat vector matching
    /// [`Policy::params`].
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &n in &self.0 {
            match grads.get(n) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, n.shape().len())),
            }
        }
        out
    }
}

/// A differentiable controller `u = pi(features)`.
pub trait Policy: Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Flat parameter vector.
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Records every parameter block on `tape` as a trainable leaf.
    fn register(&self, tape: &mut Tape) -> ParamNodes;
    fn forward_taped(&self, tape: &mut Tape, params: &ParamNodes, features: NodeRef) -> Result<NodeRef>;
    /// Plain forward pass without a tape.
    fn forward_values(&self, features: &[f64]) -> Result<Vec<f64>>;
}

/// `[y, y_min, y_max, d]` in that order.
pub fn build_features(y: &[f64], y_min: &[f64], y_max: &[f64], d: &[f64]) -> Result<Vec<f64>, ShapeError> {
    if y_min.len() != y.len() || y_max.len() != y.len() {
        return Err(ShapeError::new(
            "build_features",
            format!("y has length {} but band has {}/{}", y.len(), y_min.len(), y_max.len()),
        ));
    }
    let mut f = Vec::with_capacity(3 * y.len() + d.len());
    f.extend_from_slice(y);
    f.extend_from_slice(y_min);
    f.extend_from_slice(y_max);
    f.extend_from_slice(d);
    Ok(f)
}

pub fn feature_dim(ny: usize, nd: usize) -> usize {
    3 * ny + nd
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Layer sizes of an MLP policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub nu: usize,
}

impl MlpShape {
    /// `(out, in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        let mut prev = self.in_dim;
        for _ in 0..self.depth {
            shapes.push((self.hidden, prev));
            prev = self.hidden;
        }
        shapes.push((self.nu, prev));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    layers: Vec<Dense>,
    activation: Activation,
    u_min: Vec<f64>,
    u_max: Vec<f64>,
}

impl MlpPolicy {
    /// Weights uniform on `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`;
    /// biases zero. Deterministic in `seed`.
    pub fn init(seed: u64, shape: MlpShape, u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        if shape.in_dim == 0 || shape.hidden == 0 || shape.nu == 0 {
            return Err(Error::invalid("policy shape", format!("dimensions must be positive, got {shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shape
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let s = (6.0 / (inp + out) as f64).sqrt();
                let data = (0..out * inp).map(|_| rng.random_range(-s..=s)).collect();
                Dense { weight: Matrix::from_row_major(out, inp, data).expect("sized"), bias: vec![0.0; out] }
            })
            .collect();
        Self::from_layers(layers, u_min, u_max)
    }

    pub fn from_layers(layers: Vec<Dense>, u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::invalid("policy", "needs at least one layer"));
        };
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(ShapeError::new(
                    "policy layers",
                    format!("layer {i} outputs {} but layer {} expects {}", pair[0].out_dim(), i + 1, pair[1].in_dim()),
                )
                .into());
            }
        }
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.bias.len() != l.out_dim()) {
            return Err(ShapeError::new("policy layers", format!("layer {i} bias has length {}", l.bias.len())).into());
        }
        let nu = last.out_dim();
        if u_min.len() != nu || u_max.len() != nu {
            return Err(ShapeError::new("policy bounds", format!("expected {nu} bounds")).into());
        }
        if (0..nu).any(|i| !(u_min[i] < u_max[i])) {
            return Err(Error::invalid("policy bounds", "u_min must be < u_max"));
        }
        Ok(Self { layers, activation: Activation::Gelu, u_min, u_max })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn u_min(&self) -> &[f64] {
        &self.u_min
    }

    pub fn u_max(&self) -> &[f64] {
        &self.u_max
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
    }

    /// Pre-sigmoid output `z` of the last layer.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.in_dim() {
            return Err(ShapeError::new(
                "policy forward",
                format!("expected {} features, got {}", self.in_dim(), features.len()),
            )
            .into());
        }
        let mut h = features.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&h, &mut z);
            z.iter_mut().zip(&layer.bias).for_each(|(z, b)| *z += b);
            if i < last {
                z.iter_mut().for_each(|v| *v = gelu(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Maps last-layer outputs onto the control box.
    pub fn squash(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.u_min.iter().zip(&self.u_max))
            .map(|(z, (lo, hi))| lo + (hi - lo) * sigmoid(*z))
            .collect()
    }
}

impl Policy for MlpPolicy {
    fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn out_dim(&self) -> usize {
        self.u_min.len()
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(ShapeError::new(
                "set_params",
                format!("expected {} parameters, got {}", self.num_params(), flat.len()),
            )
            .into());
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weight.as_slice().len());
            l.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> ParamNodes {
        let mut nodes = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let w = tape
                .param(l.weight.as_slice().to_vec(), Shape::Matrix(l.out_dim(), l.in_dim()))
                .expect("weight shape matches its data");
            nodes.push(w);
            nodes.push(tape.param_vector(&l.bias));
        }
        ParamNodes(nodes)
    }

    fn forward_taped(&self, tape: &mut Tape, params: &ParamNodes, features: NodeRef) -> Result<NodeRef> {
        if features.shape() != Shape::Vector(self.in_dim()) {
            return Err(ShapeError::new(
                "policy forward",
                format!("expected Vector({}) features, got {:?}", self.in_dim(), features.shape()),
            )
            .into());
        }
        let last = self.layers.len() - 1;
        let mut h = features;
        for i in 0..self.layers.len() {
            let z = tape.matvec(params.0[2 * i], h)?;
            let z = tape.add(z, params.0[2 * i + 1])?;
            h = if i < last { tape.gelu(z) } else { z };
        }
        let s = tape.sigmoid(h);
        let span: Vec<f64> = self.u_max.iter().zip(&self.u_min).map(|(hi, lo)| hi - lo).collect();
        let span = tape.constant_vector(&span);
        let lo = tape.constant_vector(&self.u_min);
        let scaled = tape.mul(s, span)?;
        Ok(tape.add(scaled, lo)?)
    }

    fn forward_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(features)?;
        Ok(self.squash(&z))
    }
}

/// Unbounded affine policy `u = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub layer: Dense,
}

impl LinearPolicy {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(ShapeError::new("linear policy", "bias length must equal weight rows").into());
        }
        Ok(Self { layer: Dense { weight, bias } })
    }
}

impl Policy for LinearPolicy {
    fn in_dim(&self) -> usize {
        self.layer.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.layer.out_dim()
    }

    fn num_params(&self) -> usize {
        self.layer.weight.as_slice().len() + self.layer.bias.len()
    }

    fn params(&self) -> Vec<f64> {
        [self.layer.weight.as_slice(), &self.layer.bias].concat()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(ShapeError::new("set_params", "parameter count mismatch").into());
        }
        let (w, b) = flat.split_at(self.layer.weight.as_slice().len());
        self.layer.weight.as_mut_slice().copy_from_slice(w);
        self.layer.bias.copy_from_slice(b);
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> ParamNodes {
        let w = tape
            .param(self.layer.weight.as_slice().to_vec(), Shape::Matrix(self.out_dim(), self.in_dim()))
            .expect("weight shape matches its data");
        ParamNodes(vec![w, tape.param_vector(&self.layer.bias)])
    }

    fn forward_taped(&self, tape: &mut Tape, params: &ParamNodes, features: NodeRef) -> Result<NodeRef> {
        let z = tape.matvec(params.0[0], features)?;
        Ok(tape.add(z, params.0[1])?)
    }

    fn forward_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.layer.weight.matvec(features)?;
        z.iter_mut().zip(&self.layer.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }
}
