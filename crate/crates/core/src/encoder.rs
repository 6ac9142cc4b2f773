//! Dense hashing network with explicit forward/backward passes.
//!
//! The network maps `d` input features through rectified hidden layers to a
//! linear output of `b` units, one per code bit. Codes are the elementwise
//! sign of the output. The student is trained with SGD + momentum; the teacher
//! only ever moves by exponential moving average of the student.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, Matrix};

/// Input dim, hidden sizes and output (code) dim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub code_bits: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, code_bits: usize) -> Self {
        Self {
            input_dim,
            hidden,
            code_bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input dim is zero".into()));
        }
        if self.code_bits == 0 {
            return Err(Error::InvalidArchitecture("code length is zero".into()));
        }
        if let Some(pos) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::InvalidArchitecture(format!(
                "hidden layer {pos} has zero width"
            )));
        }
        Ok(())
    }

    /// `(out, in)` for every layer, in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.code_bits);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// One affine layer: `weights` is `[out x in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Parameter gradients, congruent to [`EncoderParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }
}

impl EncoderParams {
    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Layer::zeros(o, i))
                .collect(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Flat view over every parameter, layer by layer, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::values_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn check_congruent(&self, other: &EncoderParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(shape_err(
                format!("{:?}", self.arch),
                format!("{:?}", other.arch),
            ));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization. Biases start at zero.
///
/// Hidden layers use the rectifier-preserving bound `sqrt(6 / fan_in)`, the
/// linear output layer `sqrt(3 / fan_in)`.
pub fn init_params(seed: u64, arch: &Architecture) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter_mut().enumerate() {
        let fan_in = layer.weights.cols() as f64;
        let gain = if li == last { 3.0 } else { 6.0 };
        let bound = (gain / fan_in).sqrt();
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Cached activations of one forward pass.
///
/// `activations[0]` is the input; `activations[l + 1]` is the output of layer
/// `l` (rectified for hidden layers). `pre_activations[l]` is layer `l` before
/// the nonlinearity.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn embeddings(&self) -> &Matrix {
        self.activations.last().expect("trace has input")
    }

    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }
}

fn affine(input: &Matrix, layer: &Layer) -> Matrix {
    let (n, out) = (input.rows(), layer.weights.rows());
    let mut z = Matrix::zeros(n, out);
    for r in 0..n {
        let x = input.row(r);
        let zr = z.row_mut(r);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = layer.bias[o] + dot(layer.weights.row(o), x);
        }
    }
    z
}

pub fn forward(params: &EncoderParams, batch: &Matrix) -> Result<ForwardTrace> {
    if batch.cols() != params.arch.input_dim {
        return Err(shape_err(
            format!("{} input columns", params.arch.input_dim),
            format!("{} columns", batch.cols()),
        ));
    }
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act = Vec::with_capacity(params.layers.len() + 1);
    act.push(batch.clone());
    for (li, layer) in params.layers.iter().enumerate() {
        let z = affine(act.last().unwrap(), layer);
        let a = if li == last {
            z.clone()
        } else {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            a
        };
        pre.push(z);
        act.push(a);
    }
    Ok(ForwardTrace {
        pre_activations: pre,
        activations: act,
    })
}

/// Embeddings only, without keeping the trace around.
pub fn embed(params: &EncoderParams, batch: &Matrix) -> Result<Matrix> {
    let mut trace = forward(params, batch)?;
    Ok(trace.activations.pop().unwrap())
}

/// Backpropagates `grad_embeddings` (dL/dF) to parameter gradients.
pub fn backward(
    trace: &ForwardTrace,
    params: &EncoderParams,
    grad_embeddings: &Matrix,
) -> Result<Gradients> {
    if trace.depth() != params.layers.len() {
        return Err(shape_err(
            format!("trace depth {}", params.layers.len()),
            trace.depth(),
        ));
    }
    if grad_embeddings.shape() != trace.embeddings().shape() {
        return Err(shape_err(
            format!("{:?}", trace.embeddings().shape()),
            format!("{:?}", grad_embeddings.shape()),
        ));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut delta = grad_embeddings.clone();
    for li in (0..params.layers.len()).rev() {
        let input = &trace.activations[li];
        let layer = &params.layers[li];
        let g = &mut grads.layers[li];
        let (n, inp) = (input.rows(), input.cols());
        for r in 0..n {
            let d = delta.row(r);
            let x = input.row(r);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias[o] += dv;
                for (gw, &xv) in g.weights.row_mut(o).iter_mut().zip(x) {
                    *gw += dv * xv;
                }
            }
        }
        if li > 0 {
            let z_prev = &trace.pre_activations[li - 1];
            let mut next = Matrix::zeros(n, inp);
            for r in 0..n {
                let d = delta.row(r);
                let nr = next.row_mut(r);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (nv, &w) in nr.iter_mut().zip(layer.weights.row(o)) {
                        *nv += dv * w;
                    }
                }
                for (nv, &z) in nr.iter_mut().zip(z_prev.row(r)) {
                    if z <= 0.0 {
                        *nv = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// Momentum buffers plus step settings for classical momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate multiplier applied to every layer except the last.
    pub lower_layer_scale: f64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, lr: f64, momentum: f64) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
            lr,
            momentum,
            lower_layer_scale: 1.0,
        }
    }

    pub fn with_lower_layer_scale(mut self, scale: f64) -> Self {
        self.lower_layer_scale = scale;
        self
    }
}

/// `v <- mu * v + g; theta <- theta - lr * v`.
pub fn sgd_momentum_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || state.velocity.layers.len() != params.layers.len()
    {
        return Err(shape_err(params.layers.len(), grads.layers.len()));
    }
    for (li, g) in grads.layers.iter().enumerate() {
        if g.weights.shape() != params.layers[li].weights.shape()
            || g.bias.len() != params.layers[li].bias.len()
        {
            return Err(shape_err(
                format!("{:?}", params.layers[li].weights.shape()),
                format!("{:?}", g.weights.shape()),
            ));
        }
        if !g.values().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: li });
        }
    }
    let last = params.layers.len() - 1;
    let mu = state.momentum;
    for (li, ((layer, g), v)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.layers.iter_mut())
        .enumerate()
    {
        let lr = if li == last {
            state.lr
        } else {
            state.lr * state.lower_layer_scale
        };
        for ((p, &gv), vv) in layer.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = mu * *vv + gv;
            *p -= lr * *vv;
        }
    }
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut EncoderParams, student: &EncoderParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "EMA decay {alpha} outside [0, 1]"
        )));
    }
    teacher.check_congruent(student)?;
    let beta = 1.0 - alpha;
    for (t, &s) in teacher.iter_mut().zip(student.iter()) {
        *t = alpha * *t + beta * s;
    }
    Ok(())
}

/// Sign with `sgn(0) = +1`.
#[inline]
pub fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn sign_codes(embeddings: &Matrix) -> Vec<Vec<i8>> {
    embeddings
        .iter_rows()
        .map(|r| r.iter().map(|&v| sign(v)).collect())
        .collect()
}

/// Binary codes `sgn(F(x))` for unperturbed `data`, one row per item.
pub fn encode(params: &EncoderParams, data: &Matrix) -> Result<Vec<Vec<i8>>> {
    Ok(sign_codes(&embed(params, data)?))
}
