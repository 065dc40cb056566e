//! Visit embedding: a ReLU code embedding plus a time-gap embedding.
//!
//! `e = relu(W_v c + b_v) + W_t (1 - tanh((W_f dt/180 + b_f)^2)) + b_t`
//! where `c` is the multi-hot code vector and `dt` the gap in days to the
//! record's last visit. The square inside `tanh` is elementwise.

use rand::Rng;

use crate::corpus::Visit;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::params::param_group;

/// Days per unit of the time-gap feature.
pub const GAP_SCALE_DAYS: f64 = 180.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    /// `d_e x M`
    pub code_weight: Matrix,
    pub code_bias: Matrix,
    /// `d_f`
    pub gap_weight: Matrix,
    pub gap_bias: Matrix,
    /// `d_e x d_f`
    pub time_weight: Matrix,
    pub time_bias: Matrix,
}

param_group!(
    EmbedderParams,
    "embedder",
    [code_weight, code_bias, gap_weight, gap_bias, time_weight, time_bias]
);

impl EmbedderParams {
    pub fn zeros(vocab: usize, d_e: usize, d_f: usize) -> Self {
        EmbedderParams {
            code_weight: Matrix::zeros(d_e, vocab),
            code_bias: Matrix::zeros(d_e, 1),
            gap_weight: Matrix::zeros(d_f, 1),
            gap_bias: Matrix::zeros(d_f, 1),
            time_weight: Matrix::zeros(d_e, d_f),
            time_bias: Matrix::zeros(d_e, 1),
        }
    }

    pub fn init<R: Rng>(vocab: usize, d_e: usize, d_f: usize, rng: &mut R) -> Self {
        EmbedderParams {
            code_weight: Matrix::uniform_init(d_e, vocab, vocab, rng),
            code_bias: Matrix::uniform_init(d_e, 1, vocab, rng),
            gap_weight: Matrix::uniform_init(d_f, 1, 1, rng),
            gap_bias: Matrix::uniform_init(d_f, 1, 1, rng),
            time_weight: Matrix::uniform_init(d_e, d_f, d_f, rng),
            time_bias: Matrix::uniform_init(d_e, 1, d_f, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.code_weight.cols
    }

    pub fn dim(&self) -> usize {
        self.code_weight.rows
    }
}

/// Pre-activation `W_v c + b_v`.
fn code_preactivation(codes: &[usize], params: &EmbedderParams) -> Result<Vec<f64>> {
    let w = &params.code_weight;
    let mut pre = params.code_bias.data.clone();
    for &c in codes {
        if c >= w.cols {
            return Err(Error::validation(format!(
                "code {c} outside vocabulary of size {}",
                w.cols
            )));
        }
        for (r, p) in pre.iter_mut().enumerate() {
            *p += w.get(r, c);
        }
    }
    Ok(pre)
}

/// `relu(W_v c + b_v)` for the multi-hot vector of `codes`.
pub fn embed_codes(codes: &[usize], params: &EmbedderParams) -> Result<Vec<f64>> {
    let mut v = code_preactivation(codes, params)?;
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(v)
}

struct GapFeature {
    scaled: f64,
    affine: Vec<f64>,
    feature: Vec<f64>,
}

fn gap_feature(delta_days: u32, params: &EmbedderParams) -> GapFeature {
    let scaled = f64::from(delta_days) / GAP_SCALE_DAYS;
    let affine: Vec<f64> = params
        .gap_weight
        .data
        .iter()
        .zip(&params.gap_bias.data)
        .map(|(w, b)| w * scaled + b)
        .collect();
    let feature = affine.iter().map(|u| 1.0 - (u * u).tanh()).collect();
    GapFeature {
        scaled,
        affine,
        feature,
    }
}

/// `W_t (1 - tanh((W_f dt/180 + b_f)^2)) + b_t`
pub fn embed_time(delta_days: u32, params: &EmbedderParams) -> Vec<f64> {
    let g = gap_feature(delta_days, params);
    let mut t = params.time_weight.mul_vec(&g.feature);
    crate::linalg::add_assign(&mut t, &params.time_bias.data);
    t
}

/// Sum of the code and time embeddings, with the gap measured to `anchor_day`.
pub fn embed_visit(visit: &Visit, anchor_day: u32, params: &EmbedderParams) -> Result<Vec<f64>> {
    let delta = anchor_day
        .checked_sub(visit.day)
        .ok_or_else(|| Error::validation(format!("anchor day {anchor_day} precedes visit day {}", visit.day)))?;
    let mut e = embed_codes(visit.codes(), params)?;
    crate::linalg::add_assign(&mut e, &embed_time(delta, params));
    Ok(e)
}

/// Forward intermediates of one visit, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VisitTrace {
    codes: Vec<usize>,
    code_pre: Vec<f64>,
    gap_scaled: f64,
    gap_affine: Vec<f64>,
    gap_feature: Vec<f64>,
}

pub fn embed_visit_traced(visit: &Visit, anchor_day: u32, params: &EmbedderParams) -> Result<(Vec<f64>, VisitTrace)> {
    let delta = anchor_day
        .checked_sub(visit.day)
        .ok_or_else(|| Error::validation("negative time gap"))?;
    let code_pre = code_preactivation(visit.codes(), params)?;
    let g = gap_feature(delta, params);
    let mut t = params.time_weight.mul_vec(&g.feature);
    crate::linalg::add_assign(&mut t, &params.time_bias.data);
    let e = code_pre.iter().zip(&t).map(|(p, ti)| p.max(0.0) + ti).collect();
    Ok((
        e,
        VisitTrace {
            codes: visit.codes().to_vec(),
            code_pre,
            gap_scaled: g.scaled,
            gap_affine: g.affine,
            gap_feature: g.feature,
        },
    ))
}

/// Accumulates parameter gradients for `dL/de`.
pub fn embed_visit_backward(trace: &VisitTrace, d_e: &[f64], params: &EmbedderParams, grads: &mut EmbedderParams) {
    let d_code: Vec<f64> = d_e
        .iter()
        .zip(&trace.code_pre)
        .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
        .collect();
    let cols = grads.code_weight.cols;
    for &c in &trace.codes {
        for (r, g) in d_code.iter().enumerate() {
            grads.code_weight.data[r * cols + c] += g;
        }
    }
    axpy(1.0, &d_code, &mut grads.code_bias.data);

    grads.time_weight.outer_acc(d_e, &trace.gap_feature);
    axpy(1.0, d_e, &mut grads.time_bias.data);
    let mut d_feature = vec![0.0; trace.gap_feature.len()];
    params.time_weight.t_matvec_acc(d_e, &mut d_feature);
    for (j, (&df, &u)) in d_feature.iter().zip(&trace.gap_affine).enumerate() {
        let th = (u * u).tanh();
        let d_u = -df * (1.0 - th * th) * 2.0 * u;
        grads.gap_weight.data[j] += d_u * trace.gap_scaled;
        grads.gap_bias.data[j] += d_u;
    }
}

/// Convenience for tests and probes: the multi-hot column view.
pub fn multi_hot(codes: &[usize], vocab: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab];
    for &c in codes {
        v[c] = 1.0;
    }
    v
}
