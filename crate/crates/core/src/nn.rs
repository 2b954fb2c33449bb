//! Learnable layers: the interaction sub-module, dropout and the decoder.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. Each
//! forward pass binds the whole store onto a fresh tape, and the resulting
//! gradients are folded back into the store after backward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Negative slope of the leaky ReLU inside every interaction module.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-carrying leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the gradients from the last backward pass into each parameter.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.0) {
            tape.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    /// Present only in training mode; drives dropout masks.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Forward<'_> {
    pub fn training(&self) -> bool {
        self.rng.is_some()
    }
}

/// Gain recommended for Kaiming initialisation ahead of a leaky ReLU.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Half-width of the Kaiming-uniform distribution:
/// `gain * sqrt(3 / fan_in)`, i.e. the uniform law whose variance is
/// `gain² / fan_in`.
pub fn kaiming_uniform_bound(fan_in: usize, gain: f64) -> f64 {
    gain * (3.0 / fan_in as f64).sqrt()
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..=bound));
    }
    t
}

/// Inverted dropout: in training, each element is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 - p)`. Identity when `rng` is `None`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}

/// `conv(k) → leaky_relu → dropout → conv(k) → tanh`, mapping `d` channels
/// through `hidden_ratio · d` hidden channels back to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionModule {
    pub conv_in_weight: ParamId,
    pub conv_in_bias: ParamId,
    pub conv_out_weight: ParamId,
    pub conv_out_bias: ParamId,
    pub channels: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct InteractionSpec {
    pub channels: usize,
    pub hidden_ratio: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    /// Zero the final convolution so the module starts out emitting zeros.
    pub identity_init: bool,
}

impl InteractionModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: InteractionSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = spec.channels;
        let h = spec.hidden_ratio * d;
        let k = spec.kernel_size;
        let gain = leaky_relu_gain(LEAKY_SLOPE);

        let fan_in = d * k;
        let w_in = uniform_tensor(&[h, d, k], kaiming_uniform_bound(fan_in, gain), rng);
        let b_in = uniform_tensor(&[h], 1.0 / (fan_in as f64).sqrt(), rng);

        let fan_out_layer = h * k;
        let (w_out, b_out) = if spec.identity_init {
            (Tensor::zeros(&[d, h, k]), Tensor::zeros(&[d]))
        } else {
            (
                uniform_tensor(&[d, h, k], kaiming_uniform_bound(fan_out_layer, gain), rng),
                uniform_tensor(&[d], 1.0 / (fan_out_layer as f64).sqrt(), rng),
            )
        };

        Self {
            conv_in_weight: store.add(format!("{prefix}.conv_in.weight"), w_in),
            conv_in_bias: store.add(format!("{prefix}.conv_in.bias"), b_in),
            conv_out_weight: store.add(format!("{prefix}.conv_out.weight"), w_out),
            conv_out_bias: store.add(format!("{prefix}.conv_out.bias"), b_out),
            channels: d,
            hidden: h,
            kernel_size: k,
            leaky_slope: LEAKY_SLOPE,
            dropout: spec.dropout,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [
            self.conv_in_weight,
            self.conv_in_bias,
            self.conv_out_weight,
            self.conv_out_bias,
        ]
    }

    /// `[B, d, n] → [B, d, n]`.
    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = fwd.tape.value(x).shape();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "interaction module expects [B, {}, n], got {:?}",
                self.channels, shape
            )));
        }
        let p = fwd.params;
        let h = fwd
            .tape
            .conv1d(x, p.var(self.conv_in_weight), p.var(self.conv_in_bias))?;
        let h = fwd.tape.leaky_relu(h, self.leaky_slope)?;
        let h = dropout(fwd.tape, h, self.dropout, fwd.rng.as_deref_mut())?;
        let y = fwd
            .tape
            .conv1d(h, p.var(self.conv_out_weight), p.var(self.conv_out_bias))?;
        fwd.tape.tanh(y)
    }
}

/// Linear map along the time axis, `T → τ`, shared by all variates.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub lookback: usize,
    pub horizon: usize,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        lookback: usize,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = uniform_tensor(&[horizon, lookback], kaiming_uniform_bound(lookback, 1.0), rng);
        let b = uniform_tensor(&[horizon], 1.0 / (lookback as f64).sqrt(), rng);
        Self {
            weight: store.add(format!("{prefix}.weight"), w),
            bias: store.add(format!("{prefix}.bias"), b),
            lookback,
            horizon,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let p = fwd.params;
        fwd.tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}
