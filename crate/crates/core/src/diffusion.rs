//! History-conditioned denoising diffusion over visit embeddings.
//!
//! The reverse chain for visit `k` starts from `x_N ~ N(0, I)`. At every step
//! the latent is fused with the projected previous hidden state through a
//! two-way attention, and the fused vector `x̂_n` takes a standard
//! ε-parameterized DDPM step:
//!
//! ```text
//! [γe, γh] = softmax(W_a tanh(W_b [x_n; W_h h] + b_b))
//! x̂_n      = γe x_n + γh W_h h
//! x_{n-1}  = (x̂_n - β_n / sqrt(1 - ᾱ_n) ε_θ(x̂_n, n)) / sqrt(α_n) + sqrt(β̃_n) ξ
//! ```
//!
//! with no noise injected at `n = 1`. Training uses the simplified
//! noise-regression objective on the fused clean embedding.
//!
//! Every forward routine used in training has a traced twin and a backward
//! pass; `crate::model` stitches them together.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax, softmax_backward, Matrix};
use crate::params::param_group;
use crate::rng::{self, standard_normal_vec, StreamRng};

/// Noise levels `β_n` and their derived products, indexed from `n = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly spaced `β` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("diffusion needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::validation("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    /// `ᾱ_n`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    /// Reverse-step variance `β̃_n = β_n (1 - ᾱ_{n-1}) / (1 - ᾱ_n)`.
    pub fn posterior_variance(&self, n: usize) -> f64 {
        self.beta(n) * (1.0 - self.alpha_bar(n - 1)) / (1.0 - self.alpha_bar(n))
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::validation(format!("step {n} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `x_n = sqrt(ᾱ_n) x_0 + sqrt(1 - ᾱ_n) ε`
pub fn forward_noise(x0: &[f64], n: usize, schedule: &DiffusionSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "x0 has {} entries, noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let (a, b) = noise_coefficients(schedule, n);
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

fn noise_coefficients(schedule: &DiffusionSchedule, n: usize) -> (f64, f64) {
    let ab = schedule.alpha_bar(n);
    (ab.sqrt(), (1.0 - ab).sqrt())
}

// ---------------------------------------------------------------------------
// Attention fusion

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `W_a`, `2 x d_b`
    pub score_weight: Matrix,
    /// `W_b`, `d_b x 2 d_e`; columns `[0, d_e)` act on the latent.
    pub mix_weight: Matrix,
    /// `b_b`, `d_b`
    pub mix_bias: Matrix,
    /// `W_h`, `d_e x d_h`
    pub hidden_proj: Matrix,
}

param_group!(
    FusionParams,
    "fusion",
    [score_weight, mix_weight, mix_bias, hidden_proj]
);

impl FusionParams {
    pub fn zeros(d_e: usize, d_h: usize, d_b: usize) -> Self {
        FusionParams {
            score_weight: Matrix::zeros(2, d_b),
            mix_weight: Matrix::zeros(d_b, 2 * d_e),
            mix_bias: Matrix::zeros(d_b, 1),
            hidden_proj: Matrix::zeros(d_e, d_h),
        }
    }

    pub fn init<R: Rng>(d_e: usize, d_h: usize, d_b: usize, rng: &mut R) -> Self {
        FusionParams {
            score_weight: Matrix::uniform_init(2, d_b, d_b, rng),
            mix_weight: Matrix::uniform_init(d_b, 2 * d_e, 2 * d_e, rng),
            mix_bias: Matrix::uniform_init(d_b, 1, 2 * d_e, rng),
            hidden_proj: Matrix::uniform_init(d_e, d_h, d_h, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.hidden_proj.rows
    }
}

/// How the latent and the history are combined at each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Learned step-wise attention.
    #[default]
    Attention,
    /// History ignored: the fused vector is the latent itself.
    NoHistory,
    /// Fixed weights `(0.5, 0.5)`; attention parameters unused.
    EqualWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    pub gamma_e: f64,
    pub gamma_h: f64,
    pub fused: Vec<f64>,
}

/// Per-visit quantities that do not change across reverse steps.
#[derive(Debug, Clone)]
pub struct FusionContext {
    mode: FusionMode,
    h_prev: Vec<f64>,
    /// `W_h h`
    projected: Vec<f64>,
    /// `W_b[:, d_e..] W_h h + b_b`
    history_score: Vec<f64>,
}

/// Forward intermediates of one fusion evaluation.
#[derive(Debug, Clone)]
pub struct FuseTrace {
    hidden: Vec<f64>,
    gamma: [f64; 2],
}

/// Gradient accumulated over all fusion evaluations of a visit.
#[derive(Debug, Clone)]
pub struct FusionGrad {
    d_projected: Vec<f64>,
    d_history_score: Vec<f64>,
}

impl FusionContext {
    pub fn new(h_prev: &[f64], params: &FusionParams, mode: FusionMode) -> Result<Self> {
        let d_e = params.latent_dim();
        if h_prev.len() != params.hidden_proj.cols {
            return Err(Error::Shape(format!(
                "hidden state has {} entries, projection expects {}",
                h_prev.len(),
                params.hidden_proj.cols
            )));
        }
        let projected = match mode {
            FusionMode::NoHistory => vec![0.0; d_e],
            _ => params.hidden_proj.mul_vec(h_prev),
        };
        let history_score = match mode {
            FusionMode::Attention => {
                let mut s = vec![0.0; params.mix_bias.rows];
                params.mix_weight.matvec_cols(d_e, &projected, &mut s);
                crate::linalg::add_assign(&mut s, &params.mix_bias.data);
                s
            }
            _ => Vec::new(),
        };
        Ok(FusionContext {
            mode,
            h_prev: h_prev.to_vec(),
            projected,
            history_score,
        })
    }

    pub fn projected(&self) -> &[f64] {
        &self.projected
    }

    pub fn fuse(&self, latent: &[f64], params: &FusionParams) -> (FuseOutput, FuseTrace) {
        let (gamma, hidden) = match self.mode {
            FusionMode::NoHistory => {
                return (
                    FuseOutput {
                        gamma_e: 1.0,
                        gamma_h: 0.0,
                        fused: latent.to_vec(),
                    },
                    FuseTrace {
                        hidden: Vec::new(),
                        gamma: [1.0, 0.0],
                    },
                );
            }
            FusionMode::EqualWeights => ([0.5, 0.5], Vec::new()),
            FusionMode::Attention => {
                let mut pre = self.history_score.clone();
                for (r, p) in pre.iter_mut().enumerate() {
                    let row = &params.mix_weight.row(r)[..latent.len()];
                    *p += dot(row, latent);
                }
                let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let logits = params.score_weight.mul_vec(&hidden);
                let g = softmax(&logits);
                ([g[0], g[1]], hidden)
            }
        };
        let fused = latent
            .iter()
            .zip(&self.projected)
            .map(|(x, p)| gamma[0] * x + gamma[1] * p)
            .collect();
        (
            FuseOutput {
                gamma_e: gamma[0],
                gamma_h: gamma[1],
                fused,
            },
            FuseTrace { hidden, gamma },
        )
    }

    pub fn new_grad(&self) -> FusionGrad {
        FusionGrad {
            d_projected: vec![0.0; self.projected.len()],
            d_history_score: vec![0.0; self.history_score.len()],
        }
    }

    /// Backward of one `fuse` call; returns `dL/d latent`.
    pub fn fuse_backward(
        &self,
        latent: &[f64],
        trace: &FuseTrace,
        d_fused: &[f64],
        params: &FusionParams,
        grads: &mut FusionParams,
        acc: &mut FusionGrad,
    ) -> Vec<f64> {
        let [ge, gh] = trace.gamma;
        match self.mode {
            FusionMode::NoHistory => return d_fused.to_vec(),
            FusionMode::EqualWeights => {
                axpy(gh, d_fused, &mut acc.d_projected);
                return d_fused.iter().map(|g| ge * g).collect();
            }
            FusionMode::Attention => {}
        }
        let mut d_latent: Vec<f64> = d_fused.iter().map(|g| ge * g).collect();
        axpy(gh, d_fused, &mut acc.d_projected);

        let d_gamma = [dot(d_fused, latent), dot(d_fused, &self.projected)];
        let d_logits = softmax_backward(&trace.gamma, &d_gamma);
        grads.score_weight.outer_acc(&d_logits, &trace.hidden);
        let mut d_hidden = vec![0.0; trace.hidden.len()];
        params.score_weight.t_matvec_acc(&d_logits, &mut d_hidden);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.hidden)
            .map(|(d, t)| d * (1.0 - t * t))
            .collect();
        grads.mix_weight.outer_cols_acc(0, &d_pre, latent);
        params.mix_weight.t_matvec_cols_acc(0, &d_pre, &mut d_latent);
        axpy(1.0, &d_pre, &mut acc.d_history_score);
        d_latent
    }

    /// Flushes the per-visit accumulator; returns `dL/dh_prev`.
    pub fn finish_backward(&self, acc: FusionGrad, params: &FusionParams, grads: &mut FusionParams) -> Vec<f64> {
        let d_e = params.latent_dim();
        let mut d_projected = acc.d_projected;
        if self.mode == FusionMode::Attention {
            grads
                .mix_weight
                .outer_cols_acc(d_e, &acc.d_history_score, &self.projected);
            axpy(1.0, &acc.d_history_score, &mut grads.mix_bias.data);
            params
                .mix_weight
                .t_matvec_cols_acc(d_e, &acc.d_history_score, &mut d_projected);
        }
        let mut d_h = vec![0.0; self.h_prev.len()];
        if self.mode != FusionMode::NoHistory {
            grads.hidden_proj.outer_acc(&d_projected, &self.h_prev);
            params.hidden_proj.t_matvec_acc(&d_projected, &mut d_h);
        }
        d_h
    }
}

/// Attention fusion of a latent with the previous hidden state.
pub fn fuse_step(latent: &[f64], h_prev: &[f64], params: &FusionParams) -> Result<FuseOutput> {
    fuse_step_with_mode(latent, h_prev, params, FusionMode::Attention)
}

pub fn fuse_step_with_mode(
    latent: &[f64],
    h_prev: &[f64],
    params: &FusionParams,
    mode: FusionMode,
) -> Result<FuseOutput> {
    if latent.len() != params.latent_dim() {
        return Err(Error::Shape(format!(
            "latent has {} entries, expected {}",
            latent.len(),
            params.latent_dim()
        )));
    }
    let ctx = FusionContext::new(h_prev, params, mode)?;
    Ok(ctx.fuse(latent, params).0)
}

// ---------------------------------------------------------------------------
// Noise predictor

/// Two-layer perceptron `ε_θ(x, n) = W_2 tanh(W_1 [x; s(n)] + b_1) + b_2`
/// where `s(n)` is a sinusoidal step encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictorParams {
    /// `d_e x (d_e + d_s)`; columns `[0, d_e)` act on the latent.
    pub in_weight: Matrix,
    pub in_bias: Matrix,
    /// `d_e x d_e`
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

param_group!(
    NoisePredictorParams,
    "noise",
    [in_weight, in_bias, out_weight, out_bias]
);

impl NoisePredictorParams {
    pub fn zeros(d_e: usize, d_s: usize) -> Self {
        NoisePredictorParams {
            in_weight: Matrix::zeros(d_e, d_e + d_s),
            in_bias: Matrix::zeros(d_e, 1),
            out_weight: Matrix::zeros(d_e, d_e),
            out_bias: Matrix::zeros(d_e, 1),
        }
    }

    pub fn init<R: Rng>(d_e: usize, d_s: usize, rng: &mut R) -> Self {
        NoisePredictorParams {
            in_weight: Matrix::uniform_init(d_e, d_e + d_s, d_e + d_s, rng),
            in_bias: Matrix::uniform_init(d_e, 1, d_e + d_s, rng),
            out_weight: Matrix::uniform_init(d_e, d_e, d_e, rng),
            out_bias: Matrix::uniform_init(d_e, 1, d_e, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.out_weight.rows
    }

    pub fn step_dim(&self) -> usize {
        self.in_weight.cols - self.latent_dim()
    }
}

/// Sinusoidal encoding: `[sin(n w_0), cos(n w_0), sin(n w_1), ...]` with
/// `w_i = 10000^(-2i / d_s)`.
pub fn step_encoding(n: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 10000f64.powf(-2.0 * i / dim as f64);
            let arg = n as f64 * freq;
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// The noise predictor with a lazily filled table of per-step input biases
/// `W_1[:, d_e..] s(n) + b_1`, shared by every visit of a patient.
pub struct NoiseNet<'a> {
    params: &'a NoisePredictorParams,
    step_bias: Vec<Option<Vec<f64>>>,
}

/// Gradient w.r.t. the per-step biases, folded into the parameters by
/// [`NoiseNet::finish_backward`].
pub struct NoiseNetGrad {
    d_step_bias: Vec<Option<Vec<f64>>>,
}

/// Hidden activation of one forward call.
pub type NoiseTrace = Vec<f64>;

impl<'a> NoiseNet<'a> {
    pub fn new(params: &'a NoisePredictorParams, steps: usize) -> Self {
        NoiseNet {
            params,
            step_bias: vec![None; steps + 1],
        }
    }

    fn bias_for(&mut self, n: usize) -> &[f64] {
        if n >= self.step_bias.len() {
            self.step_bias.resize(n + 1, None);
        }
        let p = self.params;
        self.step_bias[n].get_or_insert_with(|| {
            let d_e = p.latent_dim();
            let enc = step_encoding(n, p.step_dim());
            let mut b = vec![0.0; d_e];
            p.in_weight.matvec_cols(d_e, &enc, &mut b);
            crate::linalg::add_assign(&mut b, &p.in_bias.data);
            b
        })
    }

    pub fn forward(&mut self, x: &[f64], n: usize) -> (Vec<f64>, NoiseTrace) {
        let d_e = self.params.latent_dim();
        let mut pre = self.bias_for(n).to_vec();
        let p = self.params;
        for (r, v) in pre.iter_mut().enumerate() {
            *v += dot(&p.in_weight.row(r)[..d_e], x);
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut out = p.out_weight.mul_vec(&hidden);
        crate::linalg::add_assign(&mut out, &p.out_bias.data);
        (out, hidden)
    }

    pub fn new_grad(&self) -> NoiseNetGrad {
        NoiseNetGrad {
            d_step_bias: vec![None; self.step_bias.len()],
        }
    }

    /// Backward of one `forward` call; returns `dL/dx`.
    pub fn backward(
        &self,
        x: &[f64],
        hidden: &NoiseTrace,
        n: usize,
        d_out: &[f64],
        grads: &mut NoisePredictorParams,
        acc: &mut NoiseNetGrad,
    ) -> Vec<f64> {
        let p = self.params;
        let d_e = p.latent_dim();
        grads.out_weight.outer_acc(d_out, hidden);
        axpy(1.0, d_out, &mut grads.out_bias.data);
        let mut d_hidden = vec![0.0; d_e];
        p.out_weight.t_matvec_acc(d_out, &mut d_hidden);
        let d_pre: Vec<f64> = d_hidden.iter().zip(hidden).map(|(d, h)| d * (1.0 - h * h)).collect();
        grads.in_weight.outer_cols_acc(0, &d_pre, x);
        if n >= acc.d_step_bias.len() {
            acc.d_step_bias.resize(n + 1, None);
        }
        let slot = acc.d_step_bias[n].get_or_insert_with(|| vec![0.0; d_e]);
        axpy(1.0, &d_pre, slot);
        let mut d_x = vec![0.0; d_e];
        p.in_weight.t_matvec_cols_acc(0, &d_pre, &mut d_x);
        d_x
    }

    pub fn finish_backward(&self, acc: NoiseNetGrad, grads: &mut NoisePredictorParams) {
        let d_e = self.params.latent_dim();
        let d_s = self.params.step_dim();
        for (n, d) in acc.d_step_bias.into_iter().enumerate() {
            if let Some(d) = d {
                grads.in_weight.outer_cols_acc(d_e, &d, &step_encoding(n, d_s));
                axpy(1.0, &d, &mut grads.in_bias.data);
            }
        }
    }
}

/// Anything that predicts the noise in a latent at step `n`.
pub trait NoisePredictor {
    fn predict(&mut self, x: &[f64], n: usize) -> Vec<f64>;
}

impl NoisePredictor for NoiseNet<'_> {
    fn predict(&mut self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward(x, n).0
    }
}

pub fn predict_noise(x: &[f64], n: usize, params: &NoisePredictorParams) -> Vec<f64> {
    NoiseNet::new(params, n).forward(x, n).0
}

// ---------------------------------------------------------------------------
// Training objective

/// Draws the step `n ~ U[1, N]` and the noise for one loss term.
pub fn draw_loss_noise<R: Rng>(rng: &mut R, steps: usize, dim: usize) -> (usize, Vec<f64>) {
    let n = rng.gen_range(1..=steps);
    (n, standard_normal_vec(rng, dim))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Which steps the noise-regression loss visits for each target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSteps {
    /// One uniformly drawn step per target.
    #[default]
    Sampled,
    /// Every step `1..=N`, each with its own noise draw.
    All,
}

/// Noise-regression loss `Σ_k mean_d (ε - ε_θ(x_n, n))^2`.
///
/// `rng_for(k)` supplies the random stream of target `k`.
pub fn diffusion_loss<P, F>(
    targets: &[Vec<f64>],
    schedule: &DiffusionSchedule,
    predictor: &mut P,
    steps: LossSteps,
    mut rng_for: F,
) -> Result<f64>
where
    P: NoisePredictor,
    F: FnMut(usize) -> StreamRng,
{
    if targets.is_empty() {
        return Err(Error::validation("diffusion loss needs at least one target"));
    }
    let mut total = 0.0;
    for (k, x0) in targets.iter().enumerate() {
        let mut rng = rng_for(k);
        for (n, eps) in steps.draws(&mut rng, schedule, x0.len()) {
            let x_n = forward_noise(x0, n, schedule, &eps)?;
            total += mse(&eps, &predictor.predict(&x_n, n));
        }
    }
    Ok(total)
}

impl LossSteps {
    /// The `(n, ε)` pairs of one target, drawn in a fixed order.
    fn draws<R: Rng>(self, rng: &mut R, schedule: &DiffusionSchedule, dim: usize) -> Vec<(usize, Vec<f64>)> {
        match self {
            LossSteps::Sampled => vec![draw_loss_noise(rng, schedule.steps(), dim)],
            LossSteps::All => (1..=schedule.steps())
                .map(|n| (n, standard_normal_vec(rng, dim)))
                .collect(),
        }
    }
}

/// One traced loss term.
pub struct LossTerm {
    pub n: usize,
    eps: Vec<f64>,
    noised: Vec<f64>,
    predicted: Vec<f64>,
    hidden: NoiseTrace,
    pub value: f64,
}

/// Loss terms of a single target, replayable for the backward pass.
pub fn loss_terms_traced(
    x0: &[f64],
    schedule: &DiffusionSchedule,
    net: &mut NoiseNet<'_>,
    steps: LossSteps,
    rng: &mut StreamRng,
) -> Vec<LossTerm> {
    steps
        .draws(rng, schedule, x0.len())
        .into_iter()
        .map(|(n, eps)| {
            let (a, b) = noise_coefficients(schedule, n);
            let noised: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect();
            let (predicted, hidden) = net.forward(&noised, n);
            let value = mse(&eps, &predicted);
            LossTerm {
                n,
                eps,
                noised,
                predicted,
                hidden,
                value,
            }
        })
        .collect()
}

/// Backward of [`loss_terms_traced`] scaled by `weight`; returns `dL/dx0`.
pub fn loss_terms_backward(
    terms: &[LossTerm],
    weight: f64,
    schedule: &DiffusionSchedule,
    net: &NoiseNet<'_>,
    grads: &mut NoisePredictorParams,
    acc: &mut NoiseNetGrad,
) -> Vec<f64> {
    let d_e = net.params.latent_dim();
    let mut d_x0 = vec![0.0; d_e];
    for t in terms {
        let scale = 2.0 * weight / d_e as f64;
        let d_pred: Vec<f64> = t.predicted.iter().zip(&t.eps).map(|(p, e)| scale * (p - e)).collect();
        let d_noised = net.backward(&t.noised, &t.hidden, t.n, &d_pred, grads, acc);
        let (a, _) = noise_coefficients(schedule, t.n);
        axpy(a, &d_noised, &mut d_x0);
    }
    d_x0
}

// ---------------------------------------------------------------------------
// Reverse sampling

struct ReverseStep {
    n: usize,
    latent: Vec<f64>,
    fuse: FuseTrace,
    fused: Vec<f64>,
    hidden: NoiseTrace,
}

/// A sampled synthetic visit with everything needed to differentiate it.
pub struct SampleTrace {
    ctx: FusionContext,
    steps: Vec<ReverseStep>,
    pub output: Vec<f64>,
    /// Attention weights at each reverse step, `n = N` first.
    pub gammas: Vec<[f64; 2]>,
}

/// Runs the reverse chain for one visit conditioned on `h_prev`.
pub fn sample_visit_traced(
    h_prev: &[f64],
    schedule: &DiffusionSchedule,
    fusion: &FusionParams,
    mode: FusionMode,
    net: &mut NoiseNet<'_>,
    rng: &mut StreamRng,
) -> Result<SampleTrace> {
    let ctx = FusionContext::new(h_prev, fusion, mode)?;
    let d_e = fusion.latent_dim();
    let mut latent = standard_normal_vec(rng, d_e);
    let mut steps = Vec::with_capacity(schedule.steps());
    let mut gammas = Vec::with_capacity(schedule.steps());
    for n in (1..=schedule.steps()).rev() {
        let (out, fuse) = ctx.fuse(&latent, fusion);
        gammas.push(fuse.gamma);
        let (eps_hat, hidden) = net.forward(&out.fused, n);
        let c1 = schedule.beta(n) / (1.0 - schedule.alpha_bar(n)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(n).sqrt();
        let mut next: Vec<f64> = out
            .fused
            .iter()
            .zip(&eps_hat)
            .map(|(x, e)| (x - c1 * e) * inv_sqrt_alpha)
            .collect();
        if n > 1 {
            let sigma = schedule.posterior_variance(n).sqrt();
            let z = standard_normal_vec(rng, d_e);
            axpy(sigma, &z, &mut next);
        }
        steps.push(ReverseStep {
            n,
            latent: std::mem::replace(&mut latent, next),
            fuse,
            fused: out.fused,
            hidden,
        });
    }
    Ok(SampleTrace {
        ctx,
        steps,
        output: latent,
        gammas,
    })
}

/// Backward through the reverse chain; returns `dL/dh_prev`.
#[allow(clippy::too_many_arguments)]
pub fn sample_visit_backward(
    trace: &SampleTrace,
    d_output: &[f64],
    schedule: &DiffusionSchedule,
    fusion: &FusionParams,
    fusion_grads: &mut FusionParams,
    net: &NoiseNet<'_>,
    noise_grads: &mut NoisePredictorParams,
    noise_acc: &mut NoiseNetGrad,
) -> Vec<f64> {
    let mut fusion_acc = trace.ctx.new_grad();
    let mut d_next = d_output.to_vec();
    for s in trace.steps.iter().rev() {
        let n = s.n;
        let c1 = schedule.beta(n) / (1.0 - schedule.alpha_bar(n)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(n).sqrt();
        let mut d_fused: Vec<f64> = d_next.iter().map(|g| g * inv_sqrt_alpha).collect();
        let d_eps: Vec<f64> = d_next.iter().map(|g| -c1 * inv_sqrt_alpha * g).collect();
        let d_from_net = net.backward(&s.fused, &s.hidden, n, &d_eps, noise_grads, noise_acc);
        crate::linalg::add_assign(&mut d_fused, &d_from_net);
        d_next = trace
            .ctx
            .fuse_backward(&s.latent, &s.fuse, &d_fused, fusion, fusion_grads, &mut fusion_acc);
    }
    trace.ctx.finish_backward(fusion_acc, fusion, fusion_grads)
}

/// Samples one synthetic visit embedding conditioned on `h_prev`.
pub fn sample_synthetic_visit(
    h_prev: &[f64],
    schedule: &DiffusionSchedule,
    fusion: &FusionParams,
    noise: &NoisePredictorParams,
    mode: FusionMode,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut net = NoiseNet::new(noise, schedule.steps());
    Ok(sample_visit_traced(h_prev, schedule, fusion, mode, &mut net, rng)?.output)
}

/// Synthetic sequence `[e'_1, ..., e'_K]`; visit `k` is conditioned on the
/// original `h_{k-1}` (`h_0 = 0`) and drawn from its own substream of `seed`.
pub fn sample_synthetic_sequence(
    embeddings: &[Vec<f64>],
    hidden: &[Vec<f64>],
    schedule: &DiffusionSchedule,
    fusion: &FusionParams,
    noise: &NoisePredictorParams,
    mode: FusionMode,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if embeddings.is_empty() || embeddings.len() != hidden.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} hidden states",
            embeddings.len(),
            hidden.len()
        )));
    }
    let d_h = fusion.hidden_proj.cols;
    let zero = vec![0.0; d_h];
    let mut net = NoiseNet::new(noise, schedule.steps());
    (0..embeddings.len())
        .map(|k| {
            let h_prev = if k == 0 { &zero } else { &hidden[k - 1] };
            let mut rng = visit_stream(seed, k);
            Ok(sample_visit_traced(h_prev, schedule, fusion, mode, &mut net, &mut rng)?.output)
        })
        .collect()
}

/// Substream for sampling visit `k`.
pub fn visit_stream(seed: u64, k: usize) -> StreamRng {
    rng::stream(seed, &[rng::purpose::SAMPLING, k as u64])
}

/// Substream for the loss term of visit `k`.
pub fn loss_stream(seed: u64, k: usize) -> StreamRng {
    rng::stream(seed, &[rng::purpose::DIFFUSION_LOSS, k as u64])
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(r: &mut StreamRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn schedule_products() {
        let s = DiffusionSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        let one = DiffusionSchedule::linear(1, 1e-4, 1e-4).unwrap();
        assert!((one.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let last = s.alpha_bar(100);
        assert!(last > 0.0 && last < 1.0);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(100) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_plug_in() {
        let s = DiffusionSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let x = forward_noise(&[2.0, 0.0], 2, &s, &[0.0, 1.0]).unwrap();
        assert_eq!(x[0], 1.0);
        assert!((x[1] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(forward_noise(&[1.0], 3, &s, &[0.0]).is_err());
        assert!(forward_noise(&[1.0], 0, &s, &[0.0]).is_err());
    }

    #[test]
    fn forward_noise_noiseless_limit() {
        let s = DiffusionSchedule::linear(5, 1e-300, 1e-300).unwrap();
        let x0 = [0.3, -1.2];
        assert_eq!(forward_noise(&x0, 5, &s, &[1.0, -2.0]).unwrap(), x0.to_vec());
    }

    #[test]
    fn zero_attention_weights_give_midpoint() {
        let mut r = rng::stream(1, &[]);
        let mut p = FusionParams::init(3, 4, 5, &mut r);
        p.score_weight.fill(0.0);
        let x = rand_vec(&mut r, 3);
        let h = rand_vec(&mut r, 4);
        let out = fuse_step(&x, &h, &p).unwrap();
        assert_eq!((out.gamma_e, out.gamma_h), (0.5, 0.5));
        let proj = p.hidden_proj.mul_vec(&h);
        for i in 0..3 {
            assert!((out.fused[i] - 0.5 * (x[i] + proj[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_points_fuse_to_themselves() {
        let mut r = rng::stream(2, &[]);
        let p = FusionParams::init(3, 3, 4, &mut r);
        let h = rand_vec(&mut r, 3);
        let x = p.hidden_proj.mul_vec(&h);
        let out = fuse_step(&x, &h, &p).unwrap();
        for i in 0..3 {
            assert!((out.fused[i] - x[i]).abs() < 1e-15);
        }
    }

    /// Independent scalar evaluation of the attention weights.
    fn scalar_fuse(x: &[f64], h: &[f64], p: &FusionParams) -> (f64, f64, Vec<f64>) {
        let d_e = x.len();
        let d_b = p.mix_bias.rows;
        let mut proj = vec![0.0; d_e];
        for i in 0..d_e {
            for j in 0..h.len() {
                proj[i] += p.hidden_proj.data[i * h.len() + j] * h[j];
            }
        }
        let cat: Vec<f64> = x.iter().chain(&proj).copied().collect();
        let mut t = vec![0.0; d_b];
        for r in 0..d_b {
            let mut acc = p.mix_bias.data[r];
            for c in 0..2 * d_e {
                acc += p.mix_weight.data[r * 2 * d_e + c] * cat[c];
            }
            t[r] = acc.tanh();
        }
        let mut l = [0.0; 2];
        for (r, lr) in l.iter_mut().enumerate() {
            for c in 0..d_b {
                *lr += p.score_weight.data[r * d_b + c] * t[c];
            }
        }
        let z = l[0].exp() + l[1].exp();
        let (ge, gh) = (l[0].exp() / z, l[1].exp() / z);
        let fused = (0..d_e).map(|i| ge * x[i] + gh * proj[i]).collect();
        (ge, gh, fused)
    }

    #[test]
    fn fusion_matches_scalar_oracle() {
        let mut r = rng::stream(3, &[]);
        let p = FusionParams::init(3, 5, 4, &mut r);
        for _ in 0..20 {
            let x = rand_vec(&mut r, 3);
            let h = rand_vec(&mut r, 5);
            let out = fuse_step(&x, &h, &p).unwrap();
            let (ge, gh, fused) = scalar_fuse(&x, &h, &p);
            assert!((out.gamma_e - ge).abs() < 1e-12 && (out.gamma_h - gh).abs() < 1e-12);
            for i in 0..3 {
                assert!((out.fused[i] - fused[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablation_modes_fix_the_weights() {
        let mut r = rng::stream(4, &[]);
        let p = FusionParams::init(3, 2, 4, &mut r);
        let x = rand_vec(&mut r, 3);
        let h = rand_vec(&mut r, 2);
        let eq = fuse_step_with_mode(&x, &h, &p, FusionMode::EqualWeights).unwrap();
        assert_eq!((eq.gamma_e, eq.gamma_h), (0.5, 0.5));
        let none = fuse_step_with_mode(&x, &h, &p, FusionMode::NoHistory).unwrap();
        assert_eq!(none.fused, x);
    }

    /// Independent scalar evaluation of the noise predictor.
    fn scalar_noise(x: &[f64], n: usize, p: &NoisePredictorParams) -> Vec<f64> {
        let d_e = x.len();
        let d_s = p.step_dim();
        let mut input = x.to_vec();
        for j in 0..d_s {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d_s as f64);
            let a = n as f64 * freq;
            input.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
        let w = d_e + d_s;
        let hidden: Vec<f64> = (0..d_e)
            .map(|r| {
                let mut acc = p.in_bias.data[r];
                for c in 0..w {
                    acc += p.in_weight.data[r * w + c] * input[c];
                }
                acc.tanh()
            })
            .collect();
        (0..d_e)
            .map(|r| {
                let mut acc = p.out_bias.data[r];
                for c in 0..d_e {
                    acc += p.out_weight.data[r * d_e + c] * hidden[c];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn noise_predictor_matches_scalar_oracle() {
        let mut r = rng::stream(5, &[]);
        let p = NoisePredictorParams::init(3, 4, &mut r);
        for n in [1, 7, 50] {
            let x = rand_vec(&mut r, 3);
            let got = predict_noise(&x, n, &p);
            assert_eq!(got, predict_noise(&x, n, &p));
            for (a, b) in got.iter().zip(scalar_noise(&x, n, &p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = NoisePredictorParams::zeros(3, 4);
        assert_eq!(predict_noise(&[1.0, 2.0, 3.0], 2, &zero), vec![0.0; 3]);
    }

    /// Predicts exactly the noise that produced `x_n` from a known target.
    struct Oracle<'a> {
        x0: Vec<f64>,
        schedule: &'a DiffusionSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&mut self, x: &[f64], n: usize) -> Vec<f64> {
            let (a, b) = noise_coefficients(self.schedule, n);
            x.iter().zip(&self.x0).map(|(xn, x0)| (xn - a * x0) / b).collect()
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = vec![0.5, -0.25, 1.0];
        let mut oracle = Oracle {
            x0: x0.clone(),
            schedule: &s,
        };
        let l = diffusion_loss(&[x0], &s, &mut oracle, LossSteps::Sampled, |k| loss_stream(1, k)).unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn loss_is_additive_under_replayed_streams() {
        let mut r = rng::stream(6, &[]);
        let p = NoisePredictorParams::init(4, 4, &mut r);
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = rand_vec(&mut r, 4);
        let mut net = NoiseNet::new(&p, 10);
        let one = diffusion_loss(std::slice::from_ref(&x0), &s, &mut net, LossSteps::Sampled, |_| {
            rng::stream(9, &[])
        })
        .unwrap();
        let two = diffusion_loss(&[x0.clone(), x0], &s, &mut net, LossSteps::Sampled, |_| {
            rng::stream(9, &[])
        })
        .unwrap();
        assert_eq!(two, 2.0 * one);
        assert!(diffusion_loss(&[], &s, &mut net, LossSteps::Sampled, |_| rng::stream(9, &[])).is_err());
    }

    #[test]
    fn zero_predictor_loss_is_unit_in_expectation() {
        let p = NoisePredictorParams::zeros(4, 4);
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut net = NoiseNet::new(&p, 10);
        let draws = 10_000;
        let targets = vec![vec![0.3, 0.1, -0.2, 0.0]; draws];
        let total = diffusion_loss(&targets, &s, &mut net, LossSteps::Sampled, |k| loss_stream(3, k)).unwrap();
        // Each term is mean of d_e squared standard normals: variance 2/d_e.
        let se = (2.0 / 4.0 / draws as f64).sqrt();
        assert!(
            (total / draws as f64 - 1.0).abs() < 4.0 * se,
            "{}",
            total / draws as f64
        );
    }

    #[test]
    fn single_step_sample_by_hand() {
        let s = DiffusionSchedule::from_betas(vec![0.1]).unwrap();
        let mut r = rng::stream(7, &[]);
        let fusion = FusionParams::init(3, 2, 4, &mut r);
        let noise = NoisePredictorParams::zeros(3, 4);
        let h = rand_vec(&mut r, 2);
        let got = sample_synthetic_visit(
            &h,
            &s,
            &fusion,
            &noise,
            FusionMode::Attention,
            &mut rng::stream(11, &[]),
        )
        .unwrap();

        let z = standard_normal_vec(&mut rng::stream(11, &[]), 3);
        let fused = fuse_step(&z, &h, &fusion).unwrap().fused;
        for i in 0..3 {
            assert!((got[i] - fused[i] / 0.9f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let mut r = rng::stream(8, &[]);
        let s = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();
        let fusion = FusionParams::init(5, 3, 4, &mut r);
        let noise = NoisePredictorParams::init(5, 4, &mut r);
        let h = rand_vec(&mut r, 3);
        let a =
            sample_synthetic_visit(&h, &s, &fusion, &noise, FusionMode::Attention, &mut rng::stream(1, &[])).unwrap();
        let b =
            sample_synthetic_visit(&h, &s, &fusion, &noise, FusionMode::Attention, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn sequence_conditions_on_original_history() {
        let mut r = rng::stream(9, &[]);
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let fusion = FusionParams::init(3, 2, 4, &mut r);
        let noise = NoisePredictorParams::init(3, 4, &mut r);
        let e: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 3)).collect();
        let h: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 2)).collect();
        let seq = sample_synthetic_sequence(&e, &h, &s, &fusion, &noise, FusionMode::Attention, 5).unwrap();
        assert_eq!(seq.len(), 3);

        let first = sample_synthetic_visit(
            &[0.0, 0.0],
            &s,
            &fusion,
            &noise,
            FusionMode::Attention,
            &mut visit_stream(5, 0),
        )
        .unwrap();
        assert_eq!(seq[0], first);

        // Reordering later visits leaves the first synthetic visit alone.
        let mut e2 = e.clone();
        let mut h2 = h.clone();
        e2.swap(1, 2);
        h2.swap(1, 2);
        let seq2 = sample_synthetic_sequence(&e2, &h2, &s, &fusion, &noise, FusionMode::Attention, 5).unwrap();
        assert_eq!(seq2[0], seq[0]);

        assert!(sample_synthetic_sequence(&e, &h[..2], &s, &fusion, &noise, FusionMode::Attention, 5).is_err());
    }

    #[test]
    fn perfect_reverse_step_reconstructs_target() {
        let s = DiffusionSchedule::from_betas(vec![0.3]).unwrap();
        let x0 = [0.7, -0.4];
        let eps = [1.1, 0.2];
        let x1 = forward_noise(&x0, 1, &s, &eps).unwrap();
        let c1 = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
        for i in 0..2 {
            let mean = (x1[i] - c1 * eps[i]) / s.alpha(1).sqrt();
            assert!((mean - x0[i]).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn attention_weights_form_a_distribution(seed in 0u64..10_000, scale in 0.01f64..20.0) {
                let mut r = rng::stream(seed, &[]);
                let p = FusionParams::init(4, 3, 5, &mut r);
                let x: Vec<f64> = rand_vec(&mut r, 4).into_iter().map(|v| v * scale).collect();
                let h = rand_vec(&mut r, 3);
                let out = fuse_step(&x, &h, &p).unwrap();
                prop_assert!(out.gamma_e > 0.0 && out.gamma_h > 0.0);
                prop_assert!((out.gamma_e + out.gamma_h - 1.0).abs() < 1e-12);
            }
        }
    }
}
