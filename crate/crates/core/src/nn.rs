//! Named parameter storage and the few layer types the networks use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Batch-norm epsilon used by every layer.
pub const BN_EPS: f32 = 1e-5;
/// Std of the normal weight initializer.
pub const INIT_STD: f32 = 0.02;
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Replace every value from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter sets have different names"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {} vs {}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter on `tape`; `trainable = false` records constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        }
    }
}

/// A [`ParamSet`] recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of each parameter (None where backward never reached it).
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    }

    pub fn any_grad(&self, tape: &Tape) -> bool {
        self.vars.iter().any(|&v| tape.grad(v).is_some())
    }
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::randn(Shape::new(cout, cin, kernel, kernel), INIT_STD, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])));
        Conv {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.var(self.weight),
            self.bias.map(|b| bound.var(b)),
            self.stride,
            self.padding,
            1,
        )
    }
}

/// Transposed convolution without bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::randn(Shape::new(cin, cout, kernel, kernel), INIT_STD, rng),
        );
        ConvTranspose { weight, stride }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d_transpose(x, bound.var(self.weight), self.stride, 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones([1, channels, 1, 1])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.batch_norm2d(x, bound.var(self.gamma), bound.var(self.beta), BN_EPS)
    }
}

/// conv → batch norm → leaky ReLU(0.2).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(
            params,
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            stride,
            padding,
            false,
            rng,
        );
        let norm = BatchNorm::new(params, &format!("{name}.bn"), cout);
        ConvBlock { conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, bound, x)?;
        let y = self.norm.forward(tape, bound, y)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}
