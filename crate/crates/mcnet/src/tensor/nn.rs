//! Shared pointwise building blocks: the CBL unit (1x1 linear + batch norm +
//! leaky ReLU), the identity-shortcut residual block, and plain SGD.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NDArray, Tape, ValueId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Parameters of one CBL unit. The linear weights are differentiable;
/// running statistics are plain state updated during training forward passes.
#[derive(Debug, Clone)]
pub struct CBLParams {
    pub weight: NDArray,
    pub bias: NDArray,
    pub bn_gamma: NDArray,
    pub bn_beta: NDArray,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub leaky_slope: f64,
}

impl CBLParams {
    /// Fan-in scaled uniform init for the weight; bias/beta zero, gamma one,
    /// running stats at the identity.
    pub fn init(c_in: usize, c_out: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / c_in as f64).sqrt();
        let data: Vec<f64> = (0..c_in * c_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        CBLParams {
            weight: NDArray::new(vec![c_in, c_out], data).unwrap().with_grad(),
            bias: NDArray::zeros(vec![c_out]).with_grad(),
            bn_gamma: NDArray::filled(vec![c_out], 1.0).with_grad(),
            bn_beta: NDArray::zeros(vec![c_out]).with_grad(),
            bn_running_mean: vec![0.0; c_out],
            bn_running_var: vec![1.0; c_out],
            leaky_slope,
        }
    }

    /// All-zero parameters (tests use this to collapse the unit).
    pub fn zeroed(c_in: usize, c_out: usize, leaky_slope: f64) -> Self {
        CBLParams {
            weight: NDArray::zeros(vec![c_in, c_out]).with_grad(),
            bias: NDArray::zeros(vec![c_out]).with_grad(),
            bn_gamma: NDArray::zeros(vec![c_out]).with_grad(),
            bn_beta: NDArray::zeros(vec![c_out]).with_grad(),
            bn_running_mean: vec![0.0; c_out],
            bn_running_var: vec![1.0; c_out],
            leaky_slope,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Register the differentiable tensors on a tape.
    pub fn bind(&self, tape: &mut Tape) -> CBLBound {
        CBLBound {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            gamma: tape.leaf(self.bn_gamma.clone()),
            beta: tape.leaf(self.bn_beta.clone()),
        }
    }
}

/// Tape handles for one CBL unit within the current forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CBLBound {
    pub weight: ValueId,
    pub bias: ValueId,
    pub gamma: ValueId,
    pub beta: ValueId,
}

fn linear_bn(
    tape: &mut Tape,
    x: ValueId,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    let c_in = params.in_dim();
    let got = tape.value(x).shape().to_vec();
    if got.len() != 2 || got[1] != c_in {
        return Err(Error::Dimension(format!(
            "cbl: input {:?} does not match weight [{}, {}]",
            got,
            c_in,
            params.out_dim()
        )));
    }
    let z = tape.matmul(x, bound.weight)?;
    let z = tape.add_row_bias(z, bound.bias)?;
    if training {
        let (y, stats) = tape.batch_norm_train(z, bound.gamma, bound.beta, BN_EPS)?;
        for (r, b) in params.bn_running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in params.bn_running_var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        Ok(y)
    } else {
        tape.batch_norm_eval(
            z,
            bound.gamma,
            bound.beta,
            &params.bn_running_mean,
            &params.bn_running_var,
            BN_EPS,
        )
    }
}

/// Full CBL: linear, batch norm, leaky ReLU.
pub fn cbl(
    tape: &mut Tape,
    x: ValueId,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    let slope = params.leaky_slope;
    let y = linear_bn(tape, x, params, bound, training)?;
    tape.leaky_relu(y, slope)
}

/// CBL without the trailing activation (used right before a residual add).
pub fn cbl_no_activation(
    tape: &mut Tape,
    x: ValueId,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    linear_bn(tape, x, params, bound, training)
}

/// Identity-shortcut residual unit: activation comes after the add, the
/// second CBL omits its own activation.
#[derive(Debug, Clone)]
pub struct ResidualParams {
    pub cbl1: CBLParams,
    pub cbl2: CBLParams,
}

impl ResidualParams {
    pub fn init(channels: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self {
        ResidualParams {
            cbl1: CBLParams::init(channels, channels, leaky_slope, rng),
            cbl2: CBLParams::init(channels, channels, leaky_slope, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ResidualBound {
        ResidualBound { cbl1: self.cbl1.bind(tape), cbl2: self.cbl2.bind(tape) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualBound {
    pub cbl1: CBLBound,
    pub cbl2: CBLBound,
}

pub fn residual_block(
    tape: &mut Tape,
    x: ValueId,
    params: &mut ResidualParams,
    bound: &ResidualBound,
    training: bool,
) -> Result<ValueId> {
    let width = tape.value(x).shape().get(1).copied().unwrap_or(0);
    if params.cbl1.in_dim() != width || params.cbl2.out_dim() != width {
        return Err(Error::Dimension(format!(
            "residual_block: identity shortcut needs matching widths, input {} vs {} -> {}",
            width,
            params.cbl1.in_dim(),
            params.cbl2.out_dim()
        )));
    }
    let slope = params.cbl2.leaky_slope;
    let h = cbl(tape, x, &mut params.cbl1, &bound.cbl1, training)?;
    let h = cbl_no_activation(tape, h, &mut params.cbl2, &bound.cbl2, training)?;
    let s = tape.add(x, h)?;
    tape.leaky_relu(s, slope)
}

/// One SGD update `p <- p - lr * g` over (parameter, gradient) pairs.
/// Any NaN gradient aborts before any parameter is touched.
pub fn sgd_step(pairs: Vec<(&mut NDArray, &NDArray)>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("sgd_step: learning rate must be positive, got {lr}")));
    }
    for (p, g) in &pairs {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "sgd_step: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("sgd_step: NaN gradient, step aborted".into()));
        }
    }
    for (p, g) in pairs {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
