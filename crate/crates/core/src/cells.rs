//! Recurrent cells: the squeezed convolutional GRU plus the dense GRU, dense
//! LSTM and full convolutional GRU it is compared against.
//!
//! All cells share one update rule shape:
//!
//! ```text
//! z  = σ(G_z([x, h]))
//! r  = σ(G_r([x, h]))
//! h' = tanh(G_h([x, r ⊙ h]))
//! h_t = (1 − z) ⊙ h + z ⊙ h'
//! ```
//!
//! and differ only in the gate transform `G`. Every step is written once
//! against the [`Tape`], so the forward-only helpers and training share the
//! same code path.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::{ConvGeometry, ConvMode};
use crate::error::{Error, Result};
use crate::init::conv_kernel;
use crate::io::{read_tensor, write_tensor};
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_KERNEL: usize = 3;

/// How the squeezed GRU shrinks `[x, h]` before its depthwise-separable gate
/// convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqueezeFactorization {
    /// Each gate: 1×1 `(in + hid) → hid`, depthwise `k×k` on `hid`,
    /// pointwise `hid → hid` with bias.
    #[default]
    PerGate,
    /// One shared 1×1 `in → hid` on `x`; each gate then runs depthwise `k×k`
    /// on the `2·hid` channels of `[x̂, h]` and pointwise `2·hid → hid` with
    /// bias.
    SharedInput,
}

pub trait RecurrentCell<T: Scalar> {
    fn kind(&self) -> &'static str;

    fn in_channels(&self) -> usize;

    /// Channels of the recurrent state (the LSTM packs `[h, c]`).
    fn state_channels(&self) -> usize;

    /// Named parameters in a fixed order.
    fn params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// One step on the tape. `params` are leaves for [`Self::params`] in order.
    fn step_on(&self, tape: &mut Tape<T>, params: &[Var], x: Var, state: Var) -> Result<Var>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_state(&self, input: Shape) -> Tensor<T> {
        Tensor::zeros(input.with_channels(self.state_channels()))
    }

    fn leaves(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn step(&self, x: &Tensor<T>, state: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape);
        let xv = tape.leaf(x.clone());
        let sv = tape.leaf(state.clone());
        let out = self.step_on(&mut tape, &params, xv, sv)?;
        Ok(tape.value(out).clone())
    }
}

fn check_step_inputs<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    x: Var,
    state: Var,
    in_channels: usize,
    state_channels: usize,
) -> Result<()> {
    let (xs, hs) = (tape.shape(x), tape.shape(state));
    if xs.channels != in_channels {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("input x with {in_channels} channels"),
            actual: format!("x {xs}"),
        });
    }
    let expected = xs.with_channels(state_channels);
    if hs != expected {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("h_prev {expected}"),
            actual: format!("h_prev {hs} (x {xs})"),
        });
    }
    Ok(())
}

/// `h_t = (1 − z) ⊙ h + z ⊙ h'`.
fn blend<T: Scalar>(tape: &mut Tape<T>, z: Var, h_prev: Var, candidate: Var) -> Result<Var> {
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, h_prev)?;
    let b = tape.mul(z, candidate)?;
    tape.add(a, b)
}

fn bias_shape(channels: usize) -> Shape {
    Shape::new(1, channels, 1, 1)
}

fn param_check(what: &str, in_channels: usize, hidden: usize, kernel: usize) -> Result<()> {
    if in_channels == 0 || hidden == 0 || kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "{what}: need positive channels and an odd kernel, got in={in_channels} hidden={hidden} k={kernel}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Squeezed GRU

#[derive(Clone, Debug, PartialEq)]
pub struct SqueezedGate<T> {
    /// `(hid, in + hid, 1, 1)`; absent for [`SqueezeFactorization::SharedInput`].
    pub reduce: Option<Tensor<T>>,
    pub depthwise: Tensor<T>,
    pub pointwise: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Weights of the channel-reduced convolutional GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<T = f32> {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub factorization: SqueezeFactorization,
    /// `(hid, in, 1, 1)` for [`SqueezeFactorization::SharedInput`].
    pub input_reduce: Option<Tensor<T>>,
    pub z: SqueezedGate<T>,
    pub r: SqueezedGate<T>,
    pub h: SqueezedGate<T>,
}

impl<T: Scalar> GruWeights<T> {
    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        factorization: SqueezeFactorization,
        rng: &mut R,
    ) -> Result<Self> {
        param_check("squeezed GRU", in_channels, hidden, kernel)?;
        let gate_in = match factorization {
            SqueezeFactorization::PerGate => hidden,
            SqueezeFactorization::SharedInput => 2 * hidden,
        };
        let input_reduce = (factorization == SqueezeFactorization::SharedInput)
            .then(|| conv_kernel([hidden, in_channels, 1, 1], rng));
        let mut gate = || {
            let reduce = (factorization == SqueezeFactorization::PerGate)
                .then(|| conv_kernel([hidden, in_channels + hidden, 1, 1], rng));
            let depthwise = conv_kernel([gate_in, 1, kernel, kernel], rng);
            let pointwise = conv_kernel([hidden, gate_in, 1, 1], rng);
            let bias = crate::init::fan_in_uniform(bias_shape(hidden), gate_in, rng);
            SqueezedGate {
                reduce,
                depthwise,
                pointwise,
                bias,
            }
        };
        let (z, r, h) = (gate(), gate(), gate());
        Ok(GruWeights {
            in_channels,
            hidden,
            kernel,
            factorization,
            input_reduce,
            z,
            r,
            h,
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        factorization: SqueezeFactorization,
    ) -> Result<Self> {
        let mut w = Self::random(in_channels, hidden, kernel, factorization, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for p in w.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(w)
    }

    pub fn cast<U: Scalar>(&self) -> GruWeights<U> {
        let gate = |g: &SqueezedGate<T>| SqueezedGate {
            reduce: g.reduce.as_ref().map(Tensor::cast),
            depthwise: g.depthwise.cast(),
            pointwise: g.pointwise.cast(),
            bias: g.bias.cast(),
        };
        GruWeights {
            in_channels: self.in_channels,
            hidden: self.hidden,
            kernel: self.kernel,
            factorization: self.factorization,
            input_reduce: self.input_reduce.as_ref().map(Tensor::cast),
            z: gate(&self.z),
            r: gate(&self.r),
            h: gate(&self.h),
        }
    }

    fn gates(&self) -> [(&'static str, &SqueezedGate<T>); 3] {
        [("z", &self.z), ("r", &self.r), ("h", &self.h)]
    }
}

/// Gate transform: optional 1×1 reduction, depthwise `k×k`, pointwise with
/// bias. `vars` holds the gate's leaves in parameter order.
fn squeezed_gate<T: Scalar>(tape: &mut Tape<T>, input: Var, vars: &[Var], kernel: usize, reduce: bool) -> Result<Var> {
    let (mut x, rest) = if reduce {
        (tape.conv2d(input, vars[0], None, ConvGeometry::pointwise())?, &vars[1..])
    } else {
        (input, vars)
    };
    x = tape.conv2d(x, rest[0], None, ConvGeometry::same(kernel, ConvMode::Depthwise))?;
    tape.conv2d(x, rest[1], Some(rest[2]), ConvGeometry::pointwise())
}

impl<T: Scalar> RecurrentCell<T> for GruWeights<T> {
    fn kind(&self) -> &'static str {
        "squeezed_gru"
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn state_channels(&self) -> usize {
        self.hidden
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(t) = &self.input_reduce {
            out.push(("input_reduce".to_string(), t));
        }
        for (name, g) in self.gates() {
            if let Some(t) = &g.reduce {
                out.push((format!("{name}.reduce"), t));
            }
            out.push((format!("{name}.depthwise"), &g.depthwise));
            out.push((format!("{name}.pointwise"), &g.pointwise));
            out.push((format!("{name}.bias"), &g.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.input_reduce {
            out.push(t);
        }
        for g in [&mut self.z, &mut self.r, &mut self.h] {
            if let Some(t) = &mut g.reduce {
                out.push(t);
            }
            out.push(&mut g.depthwise);
            out.push(&mut g.pointwise);
            out.push(&mut g.bias);
        }
        out
    }

    fn step_on(&self, tape: &mut Tape<T>, params: &[Var], x: Var, h_prev: Var) -> Result<Var> {
        check_step_inputs("squeezed_gru_step", tape, x, h_prev, self.in_channels, self.hidden)?;
        let per_gate = self.factorization == SqueezeFactorization::PerGate;
        let (x_in, gate_vars) = if per_gate {
            (x, params)
        } else {
            let xr = tape.conv2d(x, params[0], None, ConvGeometry::pointwise())?;
            (xr, &params[1..])
        };
        let n = if per_gate { 4 } else { 3 };
        let (zv, rest) = gate_vars.split_at(n);
        let (rv, hv) = rest.split_at(n);

        let xh = tape.concat(x_in, h_prev)?;
        let z_pre = squeezed_gate(tape, xh, zv, self.kernel, per_gate)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = squeezed_gate(tape, xh, rv, self.kernel, per_gate)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h_prev)?;
        let xrh = tape.concat(x_in, rh)?;
        let c_pre = squeezed_gate(tape, xrh, hv, self.kernel, per_gate)?;
        let candidate = tape.tanh(c_pre);
        blend(tape, z, h_prev, candidate)
    }
}

pub fn squeezed_gru_step<T: Scalar>(x: &Tensor<T>, h_prev: &Tensor<T>, w: &GruWeights<T>) -> Result<Tensor<T>> {
    w.step(x, h_prev)
}

// ---------------------------------------------------------------------------
// Convolutional GRU

/// Full convolutional GRU: each gate is one `k×k` convolution
/// `(in + hid) → hid` with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGruWeights<T = f32> {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// `[z, r, h]`, each `(hid, in + hid, k, k)`.
    pub kernels: [Tensor<T>; 3],
    pub biases: [Tensor<T>; 3],
}

impl<T: Scalar> ConvGruWeights<T> {
    pub fn random<R: Rng + ?Sized>(in_channels: usize, hidden: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        param_check("conv GRU", in_channels, hidden, kernel)?;
        let fan_in = (in_channels + hidden) * kernel * kernel;
        let mut k = || conv_kernel([hidden, in_channels + hidden, kernel, kernel], rng);
        let kernels = [k(), k(), k()];
        let mut b = || crate::init::fan_in_uniform(bias_shape(hidden), fan_in, rng);
        let biases = [b(), b(), b()];
        Ok(ConvGruWeights {
            in_channels,
            hidden,
            kernel,
            kernels,
            biases,
        })
    }

    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Result<Self> {
        param_check("conv GRU", in_channels, hidden, kernel)?;
        let k = || Tensor::zeros([hidden, in_channels + hidden, kernel, kernel]);
        let b = || Tensor::zeros(bias_shape(hidden));
        Ok(ConvGruWeights {
            in_channels,
            hidden,
            kernel,
            kernels: [k(), k(), k()],
            biases: [b(), b(), b()],
        })
    }

    pub fn cast<U: Scalar>(&self) -> ConvGruWeights<U> {
        ConvGruWeights {
            in_channels: self.in_channels,
            hidden: self.hidden,
            kernel: self.kernel,
            kernels: self.kernels.each_ref().map(Tensor::cast),
            biases: self.biases.each_ref().map(Tensor::cast),
        }
    }
}

impl<T: Scalar> RecurrentCell<T> for ConvGruWeights<T> {
    fn kind(&self) -> &'static str {
        "conv_gru"
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn state_channels(&self) -> usize {
        self.hidden
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, g) in ["z", "r", "h"].iter().enumerate() {
            out.push((format!("{g}.kernel"), &self.kernels[i]));
            out.push((format!("{g}.bias"), &self.biases[i]));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.kernels
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    fn step_on(&self, tape: &mut Tape<T>, p: &[Var], x: Var, h_prev: Var) -> Result<Var> {
        check_step_inputs("conv_gru_step", tape, x, h_prev, self.in_channels, self.hidden)?;
        let geom = ConvGeometry::same(self.kernel, ConvMode::Standard);
        let xh = tape.concat(x, h_prev)?;
        let z_pre = tape.conv2d(xh, p[0], Some(p[1]), geom)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = tape.conv2d(xh, p[2], Some(p[3]), geom)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h_prev)?;
        let xrh = tape.concat(x, rh)?;
        let c_pre = tape.conv2d(xrh, p[4], Some(p[5]), geom)?;
        let candidate = tape.tanh(c_pre);
        blend(tape, z, h_prev, candidate)
    }
}

pub fn conv_gru_step<T: Scalar>(x: &Tensor<T>, h_prev: &Tensor<T>, w: &ConvGruWeights<T>) -> Result<Tensor<T>> {
    w.step(x, h_prev)
}

// ---------------------------------------------------------------------------
// Dense cells

/// Dense GRU or LSTM. Vectors travel as `(batch, len, 1, 1)` tensors; each
/// gate matrix is stored as a `(hid, in + hid, 1, 1)` pointwise kernel, so a
/// larger spatial extent applies the cell independently at every location.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCellWeights<T = f32> {
    pub in_channels: usize,
    pub hidden: usize,
    /// GRU: `[z, r, h]`. LSTM: `[i, f, g, o]`.
    pub matrices: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DenseKind {
    Gru,
    Lstm,
}

impl DenseKind {
    fn gates(self) -> &'static [&'static str] {
        match self {
            DenseKind::Gru => &["z", "r", "h"],
            DenseKind::Lstm => &["i", "f", "g", "o"],
        }
    }
}

impl<T: Scalar> DenseCellWeights<T> {
    fn random<R: Rng + ?Sized>(kind: DenseKind, in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        param_check("dense cell", in_channels, hidden, 1)?;
        let fan_in = in_channels + hidden;
        let n = kind.gates().len();
        let matrices = (0..n).map(|_| conv_kernel([hidden, fan_in, 1, 1], rng)).collect();
        let biases = (0..n)
            .map(|_| crate::init::fan_in_uniform(bias_shape(hidden), fan_in, rng))
            .collect();
        Ok(DenseCellWeights {
            in_channels,
            hidden,
            matrices,
            biases,
        })
    }

    fn zeros(kind: DenseKind, in_channels: usize, hidden: usize) -> Result<Self> {
        param_check("dense cell", in_channels, hidden, 1)?;
        let n = kind.gates().len();
        Ok(DenseCellWeights {
            in_channels,
            hidden,
            matrices: vec![Tensor::zeros([hidden, in_channels + hidden, 1, 1]); n],
            biases: vec![Tensor::zeros(bias_shape(hidden)); n],
        })
    }

    pub fn cast<U: Scalar>(&self) -> DenseCellWeights<U> {
        DenseCellWeights {
            in_channels: self.in_channels,
            hidden: self.hidden,
            matrices: self.matrices.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }

    fn named(&self, kind: DenseKind) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, g) in kind.gates().iter().enumerate() {
            out.push((format!("{g}.matrix"), &self.matrices[i]));
            out.push((format!("{g}.bias"), &self.biases[i]));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.matrices
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k, b])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGru<T = f32>(pub DenseCellWeights<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLstm<T = f32>(pub DenseCellWeights<T>);

impl<T: Scalar> DenseGru<T> {
    pub fn random<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        DenseCellWeights::random(DenseKind::Gru, in_channels, hidden, rng).map(DenseGru)
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
        DenseCellWeights::zeros(DenseKind::Gru, in_channels, hidden).map(DenseGru)
    }
}

impl<T: Scalar> DenseLstm<T> {
    pub fn random<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        DenseCellWeights::random(DenseKind::Lstm, in_channels, hidden, rng).map(DenseLstm)
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
        DenseCellWeights::zeros(DenseKind::Lstm, in_channels, hidden).map(DenseLstm)
    }
}

impl<T: Scalar> RecurrentCell<T> for DenseGru<T> {
    fn kind(&self) -> &'static str {
        "dense_gru"
    }

    fn in_channels(&self) -> usize {
        self.0.in_channels
    }

    fn state_channels(&self) -> usize {
        self.0.hidden
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.0.named(DenseKind::Gru)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.0.named_mut()
    }

    fn step_on(&self, tape: &mut Tape<T>, p: &[Var], x: Var, h_prev: Var) -> Result<Var> {
        check_step_inputs("dense_gru_step", tape, x, h_prev, self.0.in_channels, self.0.hidden)?;
        let geom = ConvGeometry::pointwise();
        let xh = tape.concat(x, h_prev)?;
        let z_pre = tape.conv2d(xh, p[0], Some(p[1]), geom)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = tape.conv2d(xh, p[2], Some(p[3]), geom)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h_prev)?;
        let xrh = tape.concat(x, rh)?;
        let c_pre = tape.conv2d(xrh, p[4], Some(p[5]), geom)?;
        let candidate = tape.tanh(c_pre);
        blend(tape, z, h_prev, candidate)
    }
}

impl<T: Scalar> RecurrentCell<T> for DenseLstm<T> {
    fn kind(&self) -> &'static str {
        "dense_lstm"
    }

    fn in_channels(&self) -> usize {
        self.0.in_channels
    }

    /// `[h, c]`.
    fn state_channels(&self) -> usize {
        2 * self.0.hidden
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.0.named(DenseKind::Lstm)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.0.named_mut()
    }

    fn step_on(&self, tape: &mut Tape<T>, p: &[Var], x: Var, state: Var) -> Result<Var> {
        let hid = self.0.hidden;
        check_step_inputs("dense_lstm_step", tape, x, state, self.0.in_channels, 2 * hid)?;
        let geom = ConvGeometry::pointwise();
        let h_prev = tape.narrow(state, 0, hid)?;
        let c_prev = tape.narrow(state, hid, hid)?;
        let xh = tape.concat(x, h_prev)?;
        let gate = |tape: &mut Tape<T>, k: usize| tape.conv2d(xh, p[2 * k], Some(p[2 * k + 1]), geom);
        let i_pre = gate(tape, 0)?;
        let f_pre = gate(tape, 1)?;
        let g_pre = gate(tape, 2)?;
        let o_pre = gate(tape, 3)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        tape.concat(h, c)
    }
}

pub fn dense_gru_step<T: Scalar>(x: &Tensor<T>, h_prev: &Tensor<T>, w: &DenseGru<T>) -> Result<Tensor<T>> {
    w.step(x, h_prev)
}

/// Returns `(h_t, c_t)`.
pub fn dense_lstm_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    w: &DenseLstm<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let state = crate::ops::concat_channels(h_prev, c_prev)?;
    let next = w.step(x, &state)?;
    let hid = w.0.hidden;
    Ok((
        crate::ops::narrow_channels(&next, 0, hid)?,
        crate::ops::narrow_channels(&next, hid, hid)?,
    ))
}

/// Runs `cell` over `frames` from `h0`, returning the state after each step.
pub fn run_sequence<T: Scalar, C: RecurrentCell<T> + ?Sized>(
    cell: &C,
    frames: &[Tensor<T>],
    h0: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if frames.is_empty() {
        return Err(Error::invalid("run_sequence: empty frame sequence"));
    }
    let shape = frames[0].shape();
    let mut state = h0.clone();
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "run_sequence",
                expected: format!("frame {shape}"),
                actual: format!("frame {t} {}", f.shape()),
            });
        }
        state = cell.step(f, &state)?;
        out.push(state.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub kind: String,
    pub in_channels: usize,
    pub state_channels: usize,
    pub params: Vec<ParamEntry>,
}

/// Writes `manifest.json` plus one tensor dump per parameter into `dir`.
pub fn save_cell<T: Scalar, C: RecurrentCell<T> + ?Sized>(dir: &Path, cell: &C) -> Result<WeightManifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, t) in cell.params() {
        let file = format!("{}.bin", name.replace('.', "_"));
        write_tensor(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name,
            shape: t.shape().dims(),
            file,
        });
    }
    let manifest = WeightManifest {
        kind: cell.kind().to_string(),
        in_channels: cell.in_channels(),
        state_channels: cell.state_channels(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads parameters saved by [`save_cell`] into an already-shaped `cell`.
pub fn load_cell_into<T: Scalar, C: RecurrentCell<T> + ?Sized>(dir: &Path, cell: &mut C) -> Result<()> {
    let manifest: WeightManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let expected: Vec<(String, Shape)> = cell.params().into_iter().map(|(n, t)| (n, t.shape())).collect();
    if manifest.kind != cell.kind() || manifest.params.len() != expected.len() {
        return Err(Error::Format(format!(
            "manifest describes {} with {} tensors, cell is {} with {}",
            manifest.kind,
            manifest.params.len(),
            cell.kind(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.params.iter().zip(&expected) {
        let t: Tensor<T> = read_tensor(&dir.join(&entry.file))?;
        if &entry.name != name || t.shape() != *shape {
            return Err(Error::Format(format!(
                "parameter {} {} does not match expected {} {}",
                entry.name,
                t.shape(),
                name,
                shape
            )));
        }
        loaded.push(t);
    }
    for (slot, t) in cell.params_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_halve_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform([1, 3, 4, 4], 1.0, &mut rng);
        let h = Tensor::<f32>::uniform([1, 2, 4, 4], 1.0, &mut rng);
        for f in [SqueezeFactorization::PerGate, SqueezeFactorization::SharedInput] {
            let w = GruWeights::zeros(3, 2, 3, f).unwrap();
            assert_eq!(squeezed_gru_step(&x, &h, &w).unwrap(), h.scale(0.5));
        }
        let w = ConvGruWeights::zeros(3, 2, 3).unwrap();
        assert_eq!(conv_gru_step(&x, &h, &w).unwrap(), h.scale(0.5));
    }

    #[test]
    fn zero_weights_dense_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(Shape::vector(1, 5), 1.0, &mut rng);
        let h = Tensor::<f64>::uniform(Shape::vector(1, 4), 1.0, &mut rng);
        let c = Tensor::<f64>::uniform(Shape::vector(1, 4), 1.0, &mut rng);
        let gru = DenseGru::zeros(5, 4).unwrap();
        assert_eq!(dense_gru_step(&x, &h, &gru).unwrap(), h.scale(0.5));
        let lstm = DenseLstm::zeros(5, 4).unwrap();
        let (h1, c1) = dense_lstm_step(&x, &h, &c, &lstm).unwrap();
        assert_eq!(c1, c.scale(0.5));
        assert_eq!(h1, c1.map(|v| 0.5 * v.tanh()));
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = GruWeights::<f64>::random(4, 3, 3, SqueezeFactorization::PerGate, &mut rng).unwrap();
        for p in w.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        w.z.bias.data_mut().iter_mut().for_each(|v| *v = -20.0);
        let x = Tensor::uniform([1, 4, 5, 5], 1.0, &mut rng);
        let h = Tensor::uniform([1, 3, 5, 5], 1.0, &mut rng);
        let out = squeezed_gru_step(&x, &h, &w).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-8);
    }

    #[test]
    fn shape_errors_name_tensors() {
        let w = GruWeights::<f32>::zeros(4, 3, 3, SqueezeFactorization::PerGate).unwrap();
        let err = squeezed_gru_step(&Tensor::zeros([1, 5, 4, 4]), &Tensor::zeros([1, 3, 4, 4]), &w)
            .unwrap_err()
            .to_string();
        assert!(err.contains("x 1x5x4x4"), "{err}");
        let err = squeezed_gru_step(&Tensor::zeros([1, 4, 4, 4]), &Tensor::zeros([1, 3, 2, 4]), &w)
            .unwrap_err()
            .to_string();
        assert!(err.contains("h_prev 1x3x2x4"), "{err}");
    }

    #[test]
    fn run_sequence_rejects_empty() {
        let w = ConvGruWeights::<f32>::zeros(1, 1, 3).unwrap();
        assert!(run_sequence(&w, &[], &Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn squeezed_param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let per_gate = GruWeights::<f32>::random(8, 4, 3, SqueezeFactorization::PerGate, &mut rng).unwrap();
        assert_eq!(per_gate.num_params(), 3 * (12 * 4 + 9 * 4 + 4 * 4 + 4));
        let shared = GruWeights::<f32>::random(8, 4, 3, SqueezeFactorization::SharedInput, &mut rng).unwrap();
        assert_eq!(shared.num_params(), 8 * 4 + 3 * (9 * 8 + 8 * 4 + 4));
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = GruWeights::<f32>::random(3, 2, 3, SqueezeFactorization::PerGate, &mut rng).unwrap();
        let manifest = save_cell(dir.path(), &w).unwrap();
        assert_eq!(manifest.params.len(), 12);
        assert_eq!(manifest.params[0].name, "z.reduce");
        let mut loaded = GruWeights::<f32>::zeros(3, 2, 3, SqueezeFactorization::PerGate).unwrap();
        load_cell_into(dir.path(), &mut loaded).unwrap();
        assert_eq!(loaded, w);
        let mut wrong = ConvGruWeights::<f32>::zeros(3, 2, 3).unwrap();
        assert!(load_cell_into(dir.path(), &mut wrong).is_err());
    }
}
