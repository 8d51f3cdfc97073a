//! Differentiable function-approximator substrate: small MLPs and a gated
//! recurrent cell over a reverse-mode tape, an adaptive-moment optimizer, a
//! finite-difference gradient audit, and the parameter checkpoint format.

pub mod audit;
pub mod checkpoint;
pub mod net;
pub mod optim;
pub mod tape;

pub use audit::gradient_audit;
pub use checkpoint::Checkpoint;
pub use net::{Activation, ApproximatorSpec, GruCell, Mlp, OutputHead};
pub use optim::{clip_global_norm, optimizer_step, OptimizerState};
pub use tape::{Grads, Tape, Var};

use crate::{FospError, Result};
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

/// One named block of a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat f64 parameter storage with a named-segment layout.
///
/// Initialization is deterministic given a seed, and all entries are kept
/// finite by the optimizer path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, all-zero values.
    pub fn zeros_like(&self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn seg(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.segments[idx];
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.offset..s.offset + s.len()])
            .expect("segment view")
    }

    pub fn seg_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.segments[idx].clone();
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.values[s.offset..s.offset + s.len()])
            .expect("segment view")
    }

    pub fn seg_to_owned(&self, idx: usize) -> Array2<f64> {
        self.seg(idx).to_owned()
    }

    pub fn seg_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// True when layouts (names and shapes) agree.
    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.segments == other.segments
    }
}

/// Accumulates segment declarations, then materializes a zeroed
/// [`ParameterVector`].
#[derive(Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        LayoutBuilder::default()
    }

    /// Declares a `rows x cols` segment; returns its index.
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let seg = Segment {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        };
        self.len += seg.len();
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn build(self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.len],
            segments: self.segments,
        }
    }
}

/// Tape leaves registered for every segment of a parameter vector.
pub struct PvVars {
    vars: Vec<Var>,
}

impl PvVars {
    pub fn var(&self, seg_idx: usize) -> Var {
        self.vars[seg_idx]
    }
}

/// Registers all segments of `pv` as gradient-carrying leaves.
pub fn register_params(tape: &mut Tape, pv: &ParameterVector) -> PvVars {
    let vars = (0..pv.segments().len())
        .map(|i| tape.leaf(pv.seg_to_owned(i)))
        .collect();
    PvVars { vars }
}

/// Collects the gradient for every segment of `pv` into a parameter vector
/// with the same layout.
pub fn collect_grad(tape: &Tape, grads: &Grads, pv: &ParameterVector, vars: &PvVars) -> ParameterVector {
    let mut out = pv.zeros_like();
    for (i, seg) in pv.segments().iter().enumerate() {
        let g = grads.wrt(vars.var(i), (seg.rows, seg.cols));
        out.seg_mut(i).assign(&g);
        let _ = tape; // gradients are already materialized
    }
    out
}

/// Fan-in scaled uniform init for a weight matrix segment (biases stay zero).
pub fn init_fan_in(seg: &mut ArrayViewMut2<'_, f64>, fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in seg.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Single forward pass of an MLP described by `spec` on one input vector.
pub fn forward(spec: &ApproximatorSpec, params: &ParameterVector, input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(FospError::shape(
            "forward input",
            format!("{}", spec.input_dim),
            format!("{}", input.len()),
        ));
    }
    let mlp = Mlp::standalone(spec)?;
    mlp.check_params(params)?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("input view");
    let y = mlp.forward(params, x);
    Ok(y.row(0).to_vec())
}

/// Gradient of `adjoint . output` with respect to the parameters.
pub fn backward(
    spec: &ApproximatorSpec,
    params: &ParameterVector,
    input: &[f64],
    output_adjoint: &[f64],
) -> Result<ParameterVector> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(FospError::shape(
            "backward input",
            format!("{}", spec.input_dim),
            format!("{}", input.len()),
        ));
    }
    if output_adjoint.len() != spec.output_dim {
        return Err(FospError::shape(
            "backward adjoint",
            format!("{}", spec.output_dim),
            format!("{}", output_adjoint.len()),
        ));
    }
    let mlp = Mlp::standalone(spec)?;
    mlp.check_params(params)?;

    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let x = tape.constant(Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("input"));
    let y = mlp.apply(&mut tape, &vars, x);
    let adj = tape.constant(
        Array2::from_shape_vec((1, output_adjoint.len()), output_adjoint.to_vec()).expect("adjoint"),
    );
    let weighted = tape.mul(y, adj);
    let scalar = tape.sum_all(weighted);
    let grads = tape.backward(scalar);
    let g = collect_grad(&tape, &grads, params, &vars);
    for (i, v) in g.values().iter().enumerate() {
        if !v.is_finite() {
            let seg = g
                .segments()
                .iter()
                .find(|s| i >= s.offset && i < s.offset + s.len())
                .map(|s| s.name.clone())
                .unwrap_or_else(|| "unknown".to_string());
            return Err(FospError::non_finite("backward", format!("segment {seg}")));
        }
    }
    Ok(g)
}
