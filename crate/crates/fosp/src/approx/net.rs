//! The two fixed architectures: a feed-forward MLP and a gated recurrent cell.

use super::tape::{Tape, Var};
use super::{init_fan_in, LayoutBuilder, ParameterVector, PvVars};
use crate::{FospError, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    /// Raw outputs interpreted as categorical logits.
    Logits,
    /// Sigmoid output, values in [0, 1].
    UnitInterval,
}

/// Shape and nonlinearity of one MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ApproximatorSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl ApproximatorSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_layers: usize, hidden_units: usize) -> Self {
        ApproximatorSpec {
            input_dim,
            output_dim,
            hidden_layers,
            hidden_units,
            activation: Activation::Silu,
            output_head: OutputHead::Linear,
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_head(mut self, h: OutputHead) -> Self {
        self.output_head = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 1 {
            return Err(FospError::InvalidArgument("hidden_layers must be >= 1".into()));
        }
        if self.input_dim < 1 || self.output_dim < 1 || self.hidden_units < 1 {
            return Err(FospError::InvalidArgument("dims must be >= 1".into()));
        }
        Ok(())
    }
}

fn activate_value(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Silu => {
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            x * s
        }
        Activation::Tanh => x.tanh(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multilayer perceptron whose parameters live in a shared
/// [`ParameterVector`]; the struct records only its segment indices.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: ApproximatorSpec,
    /// Interleaved (weight, bias) segment indices, hidden layers then output.
    segs: Vec<usize>,
}

impl Mlp {
    /// Declares this net's segments on `builder` under `prefix`.
    pub fn new(spec: ApproximatorSpec, prefix: &str, builder: &mut LayoutBuilder) -> Result<Mlp> {
        spec.validate()?;
        let mut segs = Vec::new();
        let mut in_dim = spec.input_dim;
        for layer in 0..spec.hidden_layers {
            segs.push(builder.add(format!("{prefix}/w{layer}"), in_dim, spec.hidden_units));
            segs.push(builder.add(format!("{prefix}/b{layer}"), 1, spec.hidden_units));
            in_dim = spec.hidden_units;
        }
        segs.push(builder.add(format!("{prefix}/w_out"), in_dim, spec.output_dim));
        segs.push(builder.add(format!("{prefix}/b_out"), 1, spec.output_dim));
        Ok(Mlp { spec, segs })
    }

    /// Standalone net: its own single-purpose layout, zero-initialized.
    pub fn standalone(spec: &ApproximatorSpec) -> Result<Mlp> {
        let mut b = LayoutBuilder::new();
        Mlp::new(*spec, "mlp", &mut b)
    }

    /// The zeroed parameter vector matching [`Mlp::standalone`].
    pub fn standalone_params(spec: &ApproximatorSpec) -> Result<ParameterVector> {
        let mut b = LayoutBuilder::new();
        Mlp::new(*spec, "mlp", &mut b)?;
        Ok(b.build())
    }

    pub fn check_params(&self, pv: &ParameterVector) -> Result<()> {
        for (k, &idx) in self.segs.iter().enumerate() {
            let expected = self.seg_shape(k);
            let got = pv
                .segments()
                .get(idx)
                .map(|s| (s.rows, s.cols))
                .ok_or_else(|| FospError::shape("params", "segment present", "missing"))?;
            if expected != got {
                return Err(FospError::shape(
                    "params",
                    format!("{expected:?}"),
                    format!("{got:?}"),
                ));
            }
        }
        Ok(())
    }

    fn seg_shape(&self, k: usize) -> (usize, usize) {
        let layer = k / 2;
        let is_bias = k % 2 == 1;
        let (rows, cols) = if layer < self.spec.hidden_layers {
            let in_dim = if layer == 0 { self.spec.input_dim } else { self.spec.hidden_units };
            (in_dim, self.spec.hidden_units)
        } else {
            let in_dim = self.spec.hidden_units;
            (in_dim, self.spec.output_dim)
        };
        if is_bias {
            (1, cols)
        } else {
            (rows, cols)
        }
    }

    /// Fan-in uniform init of weights; biases stay zero.
    pub fn init(&self, pv: &mut ParameterVector, rng: &mut impl Rng) {
        for (k, &idx) in self.segs.iter().enumerate() {
            if k % 2 == 0 {
                let fan_in = pv.segments()[idx].rows;
                init_fan_in(&mut pv.seg_mut(idx), fan_in, rng);
            }
        }
    }

    /// Batched inference, rows are samples.
    pub fn forward(&self, pv: &ParameterVector, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.spec.input_dim, "mlp input dim");
        let mut h = x.to_owned();
        for layer in 0..self.spec.hidden_layers {
            let w = pv.seg(self.segs[2 * layer]);
            let b = pv.seg(self.segs[2 * layer + 1]);
            h = h.dot(&w) + &b;
            h.mapv_inplace(|v| activate_value(self.spec.activation, v));
        }
        let w = pv.seg(self.segs[2 * self.spec.hidden_layers]);
        let b = pv.seg(self.segs[2 * self.spec.hidden_layers + 1]);
        let mut y = h.dot(&w) + &b;
        if self.spec.output_head == OutputHead::UnitInterval {
            y.mapv_inplace(sigmoid);
        }
        y
    }

    /// Tape twin of [`Mlp::forward`]; same arithmetic, differentiable.
    pub fn apply(&self, tape: &mut Tape, vars: &PvVars, x: Var) -> Var {
        let mut h = x;
        for layer in 0..self.spec.hidden_layers {
            let w = vars.var(self.segs[2 * layer]);
            let b = vars.var(self.segs[2 * layer + 1]);
            let z = tape.matmul(h, w);
            let z = tape.add_row_vec(z, b);
            h = match self.spec.activation {
                Activation::Identity => z,
                Activation::Relu => tape.relu(z),
                Activation::Silu => tape.silu(z),
                Activation::Tanh => tape.tanh(z),
            };
        }
        let w = vars.var(self.segs[2 * self.spec.hidden_layers]);
        let b = vars.var(self.segs[2 * self.spec.hidden_layers + 1]);
        let z = tape.matmul(h, w);
        let y = tape.add_row_vec(z, b);
        match self.spec.output_head {
            OutputHead::UnitInterval => tape.sigmoid(y),
            _ => y,
        }
    }
}

/// Gated recurrent cell. With zero weights and zero hidden state the output
/// stays exactly zero regardless of inputs.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// wx_r, wh_r, b_r, wx_u, wh_u, b_u, wx_c, wh_c, b_c
    segs: [usize; 9],
}

impl GruCell {
    pub fn new(input_dim: usize, hidden_dim: usize, prefix: &str, builder: &mut LayoutBuilder) -> GruCell {
        let segs = [
            builder.add(format!("{prefix}/wx_r"), input_dim, hidden_dim),
            builder.add(format!("{prefix}/wh_r"), hidden_dim, hidden_dim),
            builder.add(format!("{prefix}/b_r"), 1, hidden_dim),
            builder.add(format!("{prefix}/wx_u"), input_dim, hidden_dim),
            builder.add(format!("{prefix}/wh_u"), hidden_dim, hidden_dim),
            builder.add(format!("{prefix}/b_u"), 1, hidden_dim),
            builder.add(format!("{prefix}/wx_c"), input_dim, hidden_dim),
            builder.add(format!("{prefix}/wh_c"), hidden_dim, hidden_dim),
            builder.add(format!("{prefix}/b_c"), 1, hidden_dim),
        ];
        GruCell {
            input_dim,
            hidden_dim,
            segs,
        }
    }

    pub fn init(&self, pv: &mut ParameterVector, rng: &mut impl Rng) {
        for (k, &idx) in self.segs.iter().enumerate() {
            if k % 3 != 2 {
                let fan_in = pv.segments()[idx].rows;
                init_fan_in(&mut pv.seg_mut(idx), fan_in, rng);
            }
        }
    }

    pub fn forward(&self, pv: &ParameterVector, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim, "gru input dim");
        assert_eq!(h.ncols(), self.hidden_dim, "gru hidden dim");
        let lin = |wx: usize, wh: usize, b: usize, hin: &ArrayView2<'_, f64>| {
            x.dot(&pv.seg(self.segs[wx])) + hin.dot(&pv.seg(self.segs[wh])) + &pv.seg(self.segs[b])
        };
        let mut r = lin(0, 1, 2, &h);
        r.mapv_inplace(sigmoid);
        let mut u = lin(3, 4, 5, &h);
        u.mapv_inplace(sigmoid);
        let rh = &r * &h;
        let mut c = x.dot(&pv.seg(self.segs[6])) + rh.dot(&pv.seg(self.segs[7])) + &pv.seg(self.segs[8]);
        c.mapv_inplace(f64::tanh);
        &u * &h + &(1.0 - &u) * &c
    }

    pub fn apply(&self, tape: &mut Tape, vars: &PvVars, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, wx: usize, wh: usize, b: usize, hin: Var| {
            let a = tape.matmul(x, vars.var(self.segs[wx]));
            let bmat = tape.matmul(hin, vars.var(self.segs[wh]));
            let sum = tape.add(a, bmat);
            tape.add_row_vec(sum, vars.var(self.segs[b]))
        };
        let r_pre = gate(tape, 0, 1, 2, h);
        let r = tape.sigmoid(r_pre);
        let u_pre = gate(tape, 3, 4, 5, h);
        let u = tape.sigmoid(u_pre);
        let rh = tape.mul(r, h);
        let c_pre = gate(tape, 6, 7, 8, rh);
        let c = tape.tanh(c_pre);
        // h' = u*h + (1-u)*c
        let uh = tape.mul(u, h);
        let one_minus_u = {
            let neg = tape.neg(u);
            tape.add_scalar(neg, 1.0)
        };
        let uc = tape.mul(one_minus_u, c);
        tape.add(uh, uc)
    }
}
