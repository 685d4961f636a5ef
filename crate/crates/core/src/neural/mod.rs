//! Fixed-topology feed-forward network with hand-derived gradients.
//!
//! The torso is `input -> hidden -> hidden` with ReLU after both layers. The head
//! is one of:
//!
//! * `Plain`: a linear layer to `output_dim` Q-values.
//! * `Dueling`: an advantage layer (`output_dim`) and a value layer (1), combined
//!   as `Q(a) = V + A(a) - mean(A)`.
//! * `ActorCritic`: a policy-logit layer (`output_dim`) and a value layer (1).
//!
//! All parameters live in one flat vector so the optimizer and the checkpoint
//! format treat them uniformly. Layer order is `W0 b0 W1 b1` followed by the head
//! layers (advantage or policy before value), each weight matrix row-major
//! `[out][in]` followed by its bias.

mod adam;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use adam::{AdamConfig, AdamState};
pub use io::{load_weights, load_weights_expecting, read_weights, save_weights, write_weights};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Plain,
    Dueling,
    ActorCritic,
}

impl HeadKind {
    pub fn code(self) -> u8 {
        match self {
            HeadKind::Plain => 0,
            HeadKind::Dueling => 1,
            HeadKind::ActorCritic => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HeadKind::Plain),
            1 => Some(HeadKind::Dueling),
            2 => Some(HeadKind::ActorCritic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Plain => "plain",
            HeadKind::Dueling => "dueling",
            HeadKind::ActorCritic => "actor_critic",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(HeadKind::Plain),
            "dueling" => Ok(HeadKind::Dueling),
            "actor_critic" => Ok(HeadKind::ActorCritic),
            other => Err(format!("unknown head kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub head: HeadKind,
}

impl MlpSpec {
    pub const HIDDEN: usize = 256;
    pub const ACTIONS: usize = 4;

    pub fn new(input_dim: usize, head: HeadKind) -> Self {
        Self {
            input_dim,
            hidden_dim: Self::HIDDEN,
            output_dim: Self::ACTIONS,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Usage(format!("network dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the per-sample output vector: Q-values, or logits followed by V.
    pub fn output_width(&self) -> usize {
        match self.head {
            HeadKind::Plain | HeadKind::Dueling => self.output_dim,
            HeadKind::ActorCritic => self.output_dim + 1,
        }
    }

    fn head_raw_width(&self) -> usize {
        match self.head {
            HeadKind::Plain => self.output_dim,
            HeadKind::Dueling | HeadKind::ActorCritic => self.output_dim + 1,
        }
    }

    pub fn layout(&self) -> Layout {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut offset = 0;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            };
            offset += rows * cols + rows;
            d
        };
        let l0 = dense(h, i);
        let l1 = dense(h, h);
        let head = dense(o, h);
        let value = match self.head {
            HeadKind::Plain => None,
            HeadKind::Dueling | HeadKind::ActorCritic => Some(dense(1, h)),
        };
        Layout {
            l0,
            l1,
            head,
            value,
            len: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub l0: Dense,
    pub l1: Dense,
    /// Q, advantage or policy-logit layer.
    pub head: Dense,
    /// Value layer of dueling and actor-critic heads.
    pub value: Option<Dense>,
    pub len: usize,
}

impl Layout {
    pub fn layers(&self) -> Vec<Dense> {
        let mut v = vec![self.l0, self.l1, self.head];
        v.extend(self.value);
        v
    }
}

/// Head outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Q(Vec<f64>),
    Dueling {
        value: f64,
        advantages: Vec<f64>,
        q: Vec<f64>,
    },
    ActorCritic {
        logits: Vec<f64>,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    spec: MlpSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl MlpWeights {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layout = spec.layout();
        Self {
            spec,
            layout,
            params: vec![0.0; layout.len],
        }
    }

    /// Kaiming-uniform fan-in weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec);
        for layer in w.layout.layers() {
            let bound = (6.0 / layer.cols as f64).sqrt();
            for p in &mut w.params[layer.w..layer.b] {
                *p = rng.random_range(-bound..bound);
            }
        }
        w
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if params.len() != layout.len {
            return Err(Error::SpecMismatch(format!(
                "expected {} parameters for {spec:?}, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn copy_from(&mut self, other: &MlpWeights) {
        debug_assert_eq!(self.spec, other.spec);
        self.params.copy_from_slice(&other.params);
    }

    /// Output vector for one input: Q-values, or logits followed by V.
    pub fn forward_vec(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.spec.input_dim {
            return Err(Error::Usage(format!(
                "observation has {} features, network expects {}",
                obs.len(),
                self.spec.input_dim
            )));
        }
        let mut tape = Tape::new(&self.spec, 1);
        self.forward_batch(obs, &mut tape);
        Ok(tape.output(0).to_vec())
    }

    pub fn forward(&self, obs: &[f64]) -> Result<HeadOutput> {
        if obs.len() != self.spec.input_dim {
            return Err(Error::Usage(format!(
                "observation has {} features, network expects {}",
                obs.len(),
                self.spec.input_dim
            )));
        }
        let mut tape = Tape::new(&self.spec, 1);
        self.forward_batch(obs, &mut tape);
        let o = self.spec.output_dim;
        let raw = &tape.raw[..self.spec.head_raw_width()];
        Ok(match self.spec.head {
            HeadKind::Plain => HeadOutput::Q(raw.to_vec()),
            HeadKind::Dueling => HeadOutput::Dueling {
                value: raw[o],
                advantages: raw[..o].to_vec(),
                q: tape.output(0).to_vec(),
            },
            HeadKind::ActorCritic => HeadOutput::ActorCritic {
                logits: raw[..o].to_vec(),
                value: raw[o],
            },
        })
    }

    /// Runs `inputs` (row-major, `tape.batch` rows) through the network.
    pub fn forward_batch(&self, inputs: &[f64], tape: &mut Tape) {
        let s = &self.spec;
        let batch = tape.batch;
        assert_eq!(inputs.len(), batch * s.input_dim, "input batch shape");
        tape.input.clear();
        tape.input.extend_from_slice(inputs);
        let p = &self.params;
        let l = &self.layout;
        let (id, hd) = (s.input_dim, s.hidden_dim);
        let o = s.output_dim;
        let rw = s.head_raw_width();
        let ow = s.output_width();
        dense_forward(p, &l.l0, &tape.input, id, &mut tape.h0, hd, batch);
        relu(&mut tape.h0);
        dense_forward(p, &l.l1, &tape.h0, hd, &mut tape.h1, hd, batch);
        relu(&mut tape.h1);
        dense_forward(p, &l.head, &tape.h1, hd, &mut tape.raw, rw, batch);
        if let Some(v) = &l.value {
            dense_forward(p, v, &tape.h1, hd, &mut tape.raw[o..], rw, batch);
        }
        for b in 0..batch {
            let raw = &tape.raw[b * rw..(b + 1) * rw];
            let out = &mut tape.out[b * ow..(b + 1) * ow];
            match s.head {
                HeadKind::Plain | HeadKind::ActorCritic => out.copy_from_slice(raw),
                HeadKind::Dueling => {
                    let mean = raw[..o].iter().sum::<f64>() / o as f64;
                    let value = raw[o];
                    for (q, a) in out.iter_mut().zip(&raw[..o]) {
                        *q = value + a - mean;
                    }
                }
            }
        }
    }

    /// Accumulates into `grads` the gradient of `sum(upstream * outputs)` over the
    /// batch last run through `tape`.
    pub fn backward_batch(&self, tape: &mut Tape, upstream: &[f64], grads: &mut [f64]) {
        let s = &self.spec;
        let batch = tape.batch;
        let o = s.output_dim;
        let hd = s.hidden_dim;
        let rw = s.head_raw_width();
        let ow = s.output_width();
        assert_eq!(upstream.len(), batch * ow, "upstream gradient shape");
        assert_eq!(grads.len(), self.layout.len, "gradient buffer shape");
        let p = &self.params;
        let l = &self.layout;

        for b in 0..batch {
            let up = &upstream[b * ow..(b + 1) * ow];
            let d = &mut tape.draw[b * rw..(b + 1) * rw];
            match s.head {
                HeadKind::Plain | HeadKind::ActorCritic => d.copy_from_slice(up),
                HeadKind::Dueling => {
                    let total: f64 = up.iter().sum();
                    let mean = total / o as f64;
                    for (da, u) in d[..o].iter_mut().zip(up) {
                        *da = u - mean;
                    }
                    d[o] = total;
                }
            }
        }

        tape.dh1.iter_mut().for_each(|x| *x = 0.0);
        dense_backward(
            p,
            &l.head,
            &tape.h1,
            hd,
            &tape.draw,
            rw,
            Some(&mut tape.dh1),
            grads,
            batch,
        );
        if let Some(v) = &l.value {
            dense_backward(
                p,
                v,
                &tape.h1,
                hd,
                &tape.draw[o..],
                rw,
                Some(&mut tape.dh1),
                grads,
                batch,
            );
        }
        relu_backward(&tape.h1, &mut tape.dh1);

        tape.dh0.iter_mut().for_each(|x| *x = 0.0);
        dense_backward(p, &l.l1, &tape.h0, hd, &tape.dh1, hd, Some(&mut tape.dh0), grads, batch);
        relu_backward(&tape.h0, &mut tape.dh0);

        let id = s.input_dim;
        dense_backward(p, &l.l0, &tape.input, id, &tape.dh0, hd, None, grads, batch);
    }

    /// Gradient of `sum(upstream * outputs)` for a single input.
    pub fn backward(&self, obs: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.spec.input_dim {
            return Err(Error::Usage("observation shape".into()));
        }
        if upstream.len() != self.spec.output_width() {
            return Err(Error::Usage(format!(
                "upstream gradient has {} entries, head has {} outputs",
                upstream.len(),
                self.spec.output_width()
            )));
        }
        let mut tape = Tape::new(&self.spec, 1);
        self.forward_batch(obs, &mut tape);
        let mut grads = vec![0.0; self.layout.len];
        self.backward_batch(&mut tape, upstream, &mut grads);
        Ok(grads)
    }
}

/// Activation storage for one batch; reused across calls to avoid allocation.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    input: Vec<f64>,
    h0: Vec<f64>,
    h1: Vec<f64>,
    raw: Vec<f64>,
    out: Vec<f64>,
    draw: Vec<f64>,
    dh1: Vec<f64>,
    dh0: Vec<f64>,
    output_width: usize,
}

impl Tape {
    pub fn new(spec: &MlpSpec, batch: usize) -> Self {
        let hd = spec.hidden_dim * batch;
        let rw = spec.head_raw_width() * batch;
        Self {
            batch,
            input: Vec::with_capacity(spec.input_dim * batch),
            h0: vec![0.0; hd],
            h1: vec![0.0; hd],
            raw: vec![0.0; rw],
            out: vec![0.0; spec.output_width() * batch],
            draw: vec![0.0; rw],
            dh1: vec![0.0; hd],
            dh0: vec![0.0; hd],
            output_width: spec.output_width(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self, row: usize) -> &[f64] {
        &self.out[row * self.output_width..(row + 1) * self.output_width]
    }

    pub fn outputs(&self) -> &[f64] {
        &self.out
    }
}

fn relu(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Zeroes gradient where the activation was clamped; the subgradient at 0 is 0.
fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `out[b] = W x[b] + bias` for each batch row; rows are `x_rs` and `out_rs` apart.
fn dense_forward(p: &[f64], layer: &Dense, x: &[f64], x_rs: usize, out: &mut [f64], out_rs: usize, batch: usize) {
    if batch == 0 {
        return;
    }
    assert!(x.len() >= (batch - 1) * x_rs + layer.cols, "input rows");
    assert!(out.len() >= (batch - 1) * out_rs + layer.rows, "output rows");
    let bias = &p[layer.b..layer.b + layer.rows];
    for b in 0..batch {
        out[b * out_rs..b * out_rs + layer.rows].copy_from_slice(bias);
    }
    let w = &p[layer.w..layer.b];
    // SAFETY: the asserts above bound every strided access of x and out; w is
    // exactly rows * cols long.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            layer.cols,
            layer.rows,
            1.0,
            x.as_ptr(),
            x_rs as isize,
            1,
            w.as_ptr(),
            1,
            layer.cols as isize,
            1.0,
            out.as_mut_ptr(),
            out_rs as isize,
            1,
        );
    }
}

/// Accumulates parameter gradients for upstream `d` (batch rows `d_rs` apart)
/// and, when given, the input gradient `d_in` (rows `cols` apart).
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    p: &[f64],
    layer: &Dense,
    x: &[f64],
    x_rs: usize,
    d: &[f64],
    d_rs: usize,
    d_in: Option<&mut [f64]>,
    grads: &mut [f64],
    batch: usize,
) {
    if batch == 0 {
        return;
    }
    let (rows, cols) = (layer.rows, layer.cols);
    assert!(x.len() >= (batch - 1) * x_rs + cols, "input rows");
    assert!(d.len() >= (batch - 1) * d_rs + rows, "upstream rows");
    let gw = &mut grads[layer.w..layer.b];
    // SAFETY: gw is rows * cols long; x and d are bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            batch,
            cols,
            1.0,
            d.as_ptr(),
            1,
            d_rs as isize,
            x.as_ptr(),
            x_rs as isize,
            1,
            1.0,
            gw.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    let gb = &mut grads[layer.b..layer.b + rows];
    for b in 0..batch {
        for (g, v) in gb.iter_mut().zip(&d[b * d_rs..b * d_rs + rows]) {
            *g += v;
        }
    }
    if let Some(d_in) = d_in {
        assert!(d_in.len() >= batch * cols, "input gradient rows");
        let w = &p[layer.w..layer.b];
        // SAFETY: d_in holds batch * cols entries; w is rows * cols long.
        unsafe {
            matrixmultiply::dgemm(
                batch,
                rows,
                cols,
                1.0,
                d.as_ptr(),
                d_rs as isize,
                1,
                w.as_ptr(),
                cols as isize,
                1,
                1.0,
                d_in.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
    }
}
