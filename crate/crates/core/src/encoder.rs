//! Single-layer unidirectional LSTM over visit embeddings.
//!
//! Gate rows are stacked in the order input, forget, candidate, output:
//! rows `[0, d_h)` belong to the input gate, `[d_h, 2 d_h)` to the forget
//! gate and so on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, sigmoid, Matrix};
use crate::params::param_group;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    /// `4 d_h x d_e`
    pub input_weight: Matrix,
    /// `4 d_h x d_h`
    pub recurrent_weight: Matrix,
    /// `4 d_h`
    pub bias: Matrix,
}

param_group!(RecurrentParams, "encoder", [input_weight, recurrent_weight, bias]);

impl RecurrentParams {
    pub fn zeros(d_e: usize, d_h: usize) -> Self {
        RecurrentParams {
            input_weight: Matrix::zeros(4 * d_h, d_e),
            recurrent_weight: Matrix::zeros(4 * d_h, d_h),
            bias: Matrix::zeros(4 * d_h, 1),
        }
    }

    pub fn init<R: Rng>(d_e: usize, d_h: usize, rng: &mut R) -> Self {
        RecurrentParams {
            input_weight: Matrix::uniform_init(4 * d_h, d_e, d_h, rng),
            recurrent_weight: Matrix::uniform_init(4 * d_h, d_h, d_h, rng),
            bias: Matrix::uniform_init(4 * d_h, 1, d_h, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.rows / 4
    }

    pub fn input_dim(&self) -> usize {
        self.input_weight.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(d_h: usize) -> Self {
        HiddenState {
            h: vec![0.0; d_h],
            c: vec![0.0; d_h],
        }
    }
}

#[derive(Debug, Clone)]
struct StepTrace {
    input: Vec<f64>,
    /// Activated gates, stacked i, f, g, o.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Everything the backward pass needs from one sequence.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    steps: Vec<StepTrace>,
    /// `states[k]` is the state after step k; `h_0 = c_0 = 0` is implicit.
    pub states: Vec<HiddenState>,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Hidden vector preceding step `k` (zero for `k == 0`).
    pub fn h_before(&self, k: usize) -> Vec<f64> {
        if k == 0 {
            vec![0.0; self.states[0].h.len()]
        } else {
            self.states[k - 1].h.clone()
        }
    }

    pub fn last_h(&self) -> &[f64] {
        &self.states.last().expect("non-empty trace").h
    }
}

fn step(input: &[f64], prev: &HiddenState, params: &RecurrentParams) -> (HiddenState, StepTrace) {
    let d_h = prev.h.len();
    let mut z = vec![0.0; 4 * d_h];
    params.input_weight.matvec(input, &mut z);
    params.recurrent_weight.matvec_acc(&prev.h, &mut z);
    crate::linalg::add_assign(&mut z, &params.bias.data);

    let mut gates = z;
    for (j, g) in gates.iter_mut().enumerate() {
        *g = if (2 * d_h..3 * d_h).contains(&j) {
            g.tanh()
        } else {
            sigmoid(*g)
        };
    }
    let (i, rest) = gates.split_at(d_h);
    let (f, rest) = rest.split_at(d_h);
    let (g, o) = rest.split_at(d_h);
    let c: Vec<f64> = (0..d_h).map(|j| f[j] * prev.c[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = (0..d_h).map(|j| o[j] * tanh_c[j]).collect();
    (
        HiddenState { h, c: c.clone() },
        StepTrace {
            input: input.to_vec(),
            gates,
            c_prev: prev.c.clone(),
            tanh_c,
        },
    )
}

fn check_shapes(inputs: &[Vec<f64>], params: &RecurrentParams) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Shape("empty input sequence".into()));
    }
    let d_e = params.input_dim();
    if let Some((k, x)) = inputs.iter().enumerate().find(|(_, x)| x.len() != d_e) {
        return Err(Error::Shape(format!(
            "embedding {k} has length {}, expected {d_e}",
            x.len()
        )));
    }
    Ok(())
}

pub fn encode_sequence_traced(inputs: &[Vec<f64>], params: &RecurrentParams) -> Result<SequenceTrace> {
    check_shapes(inputs, params)?;
    let mut state = HiddenState::zeros(params.hidden_dim());
    let mut steps = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, trace) = step(x, &state, params);
        steps.push(trace);
        states.push(next.clone());
        state = next;
    }
    Ok(SequenceTrace { steps, states })
}

/// `[h_1, ..., h_K]` from `h_0 = c_0 = 0`.
pub fn encode_sequence(inputs: &[Vec<f64>], params: &RecurrentParams) -> Result<Vec<HiddenState>> {
    Ok(encode_sequence_traced(inputs, params)?.states)
}

/// Backpropagation through time.
///
/// `d_h[k]` is the external gradient arriving at `h_k` (from any consumer).
/// Accumulates parameter gradients into `grads` and returns `dL/dx_k` for
/// every input.
pub fn encode_backward(
    trace: &SequenceTrace,
    d_h: &[Vec<f64>],
    params: &RecurrentParams,
    grads: &mut RecurrentParams,
) -> Vec<Vec<f64>> {
    let n = params.hidden_dim();
    let k_len = trace.steps.len();
    debug_assert_eq!(d_h.len(), k_len);
    let mut d_inputs = vec![Vec::new(); k_len];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let zero_h = vec![0.0; n];

    for k in (0..k_len).rev() {
        let s = &trace.steps[k];
        let (i, rest) = s.gates.split_at(n);
        let (f, rest) = rest.split_at(n);
        let (g, o) = rest.split_at(n);

        let mut dz = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let dh = d_h[k][j] + dh_next[j];
            let d_o = dh * s.tanh_c[j];
            let dc = dc_next[j] + dh * o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
            let d_i = dc * g[j];
            let d_f = dc * s.c_prev[j];
            let d_g = dc * i[j];
            dc_prev[j] = dc * f[j];
            dz[j] = d_i * i[j] * (1.0 - i[j]);
            dz[n + j] = d_f * f[j] * (1.0 - f[j]);
            dz[2 * n + j] = d_g * (1.0 - g[j] * g[j]);
            dz[3 * n + j] = d_o * o[j] * (1.0 - o[j]);
        }

        let h_prev = if k == 0 { &zero_h } else { &trace.states[k - 1].h };
        grads.input_weight.outer_acc(&dz, &s.input);
        grads.recurrent_weight.outer_acc(&dz, h_prev);
        axpy(1.0, &dz, &mut grads.bias.data);

        let mut dx = vec![0.0; s.input.len()];
        params.input_weight.t_matvec_acc(&dz, &mut dx);
        d_inputs[k] = dx;

        let mut dh_prev = vec![0.0; n];
        params.recurrent_weight.t_matvec_acc(&dz, &mut dh_prev);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    d_inputs
}
