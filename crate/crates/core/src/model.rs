//! The full per-patient objective and its gradient.
//!
//! For one record the forward pass embeds and encodes the visits, scores the
//! last hidden state, regresses the diffusion noise on the fused clean
//! embeddings, samples a synthetic visit sequence conditioned on the original
//! hidden states, encodes it with the same recurrent cell and scores it with
//! the same head. The backward pass differentiates all of it, including the
//! reverse sampling chain.

use crate::corpus::PatientRecord;
use crate::diffusion::{
    loss_stream, loss_terms_backward, loss_terms_traced, sample_visit_backward, sample_visit_traced, visit_stream,
    DiffusionSchedule, FusionContext, FusionMode, FusionParams, LossSteps, NoiseNet, NoisePredictorParams,
};
use crate::embedder::{embed_visit_backward, embed_visit_traced, EmbedderParams};
use crate::encoder::{encode_backward, encode_sequence_traced, RecurrentParams, SequenceTrace};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, Matrix};
use crate::params::ParamGroup;
use crate::predictor::{head_loss_backward, predict_risk, total_loss, HeadParams, LossWeights};
use crate::rng;

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub d_b: usize,
    pub d_s: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedder: EmbedderParams,
    pub encoder: RecurrentParams,
    pub fusion: FusionParams,
    pub noise: NoisePredictorParams,
    pub head: HeadParams,
}

pub const GROUP_NAMES: [&str; 5] = [
    EmbedderParams::GROUP,
    RecurrentParams::GROUP,
    FusionParams::GROUP,
    NoisePredictorParams::GROUP,
    HeadParams::GROUP,
];

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x1A17]);
        let ModelDims {
            vocab,
            d_e,
            d_h,
            d_f,
            d_b,
            d_s,
        } = dims;
        ModelParams {
            embedder: EmbedderParams::init(vocab, d_e, d_f, &mut r),
            encoder: RecurrentParams::init(d_e, d_h, &mut r),
            fusion: FusionParams::init(d_e, d_h, d_b, &mut r),
            noise: NoisePredictorParams::init(d_e, d_s, &mut r),
            head: HeadParams::init(d_h, &mut r),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedder.vocab_size(),
            d_e: self.embedder.dim(),
            d_h: self.encoder.hidden_dim(),
            d_f: self.embedder.gap_weight.rows,
            d_b: self.fusion.mix_bias.rows,
            d_s: self.noise.step_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedder: self.embedder.zeros_like(),
            encoder: self.encoder.zeros_like(),
            fusion: self.fusion.zeros_like(),
            noise: self.noise.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// `(group, tensor name, tensor)` for every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &'static str, &Matrix)> {
        let mut out = Vec::new();
        out.extend(
            self.embedder
                .tensors()
                .into_iter()
                .map(|(n, t)| (EmbedderParams::GROUP, n, t)),
        );
        out.extend(
            self.encoder
                .tensors()
                .into_iter()
                .map(|(n, t)| (RecurrentParams::GROUP, n, t)),
        );
        out.extend(
            self.fusion
                .tensors()
                .into_iter()
                .map(|(n, t)| (FusionParams::GROUP, n, t)),
        );
        out.extend(
            self.noise
                .tensors()
                .into_iter()
                .map(|(n, t)| (NoisePredictorParams::GROUP, n, t)),
        );
        out.extend(self.head.tensors().into_iter().map(|(n, t)| (HeadParams::GROUP, n, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &'static str, &mut Matrix)> {
        let ModelParams {
            embedder,
            encoder,
            fusion,
            noise,
            head,
        } = self;
        let mut out = Vec::new();
        out.extend(
            embedder
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (EmbedderParams::GROUP, n, t)),
        );
        out.extend(
            encoder
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (RecurrentParams::GROUP, n, t)),
        );
        out.extend(
            fusion
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (FusionParams::GROUP, n, t)),
        );
        out.extend(
            noise
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (NoisePredictorParams::GROUP, n, t)),
        );
        out.extend(head.tensors_mut().into_iter().map(|(n, t)| (HeadParams::GROUP, n, t)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::linalg::axpy(scale, &b.data, &mut a.data);
        }
    }
}

/// Switches of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub fusion: FusionMode,
    pub weights: LossWeights,
    pub loss_steps: LossSteps,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            fusion: FusionMode::Attention,
            weights: LossWeights::default(),
            loss_steps: LossSteps::Sampled,
        }
    }
}

/// The three loss parts of one record and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce_orig: f64,
    pub ce_synth: f64,
    pub l_diff: f64,
    pub total: f64,
}

impl LossParts {
    /// Name of the first non-finite part, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("cross-entropy (original)", self.ce_orig),
            ("cross-entropy (synthetic)", self.ce_synth),
            ("diffusion", self.l_diff),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone)]
pub struct PatientOutcome {
    pub parts: LossParts,
    /// Positive-class probability from the original sequence.
    pub prob_positive: f64,
    /// Attention weights of every fusion evaluation (targets then sampling).
    pub gammas: Vec<[f64; 2]>,
}

fn embed_record(
    record: &PatientRecord,
    params: &EmbedderParams,
) -> Result<(Vec<Vec<f64>>, Vec<crate::embedder::VisitTrace>)> {
    let anchor = record.last_day();
    record
        .visits()
        .iter()
        .map(|v| embed_visit_traced(v, anchor, params))
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// Original-sequence hidden states of a record.
pub fn encode_record(params: &ModelParams, record: &PatientRecord) -> Result<SequenceTrace> {
    let (embeddings, _) = embed_record(record, &params.embedder)?;
    encode_sequence_traced(&embeddings, &params.encoder)
}

/// Positive-class probability from the original visits.
pub fn predict_positive(params: &ModelParams, record: &PatientRecord) -> Result<f64> {
    let seq = encode_record(params, record)?;
    Ok(predict_risk(seq.last_h(), &params.head)[0])
}

/// Last hidden states `(h_K, h'_K)` of the original and a synthetic sequence.
pub fn original_and_synthetic_last_hidden(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    mode: FusionMode,
    record: &PatientRecord,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let seq = encode_record(params, record)?;
    let mut net = NoiseNet::new(&params.noise, schedule.steps());
    let synthetic = (0..seq.len())
        .map(|k| {
            let h_prev = seq.h_before(k);
            let mut r = visit_stream(seed, k);
            Ok(sample_visit_traced(&h_prev, schedule, &params.fusion, mode, &mut net, &mut r)?.output)
        })
        .collect::<Result<Vec<_>>>()?;
    let syn_seq = encode_sequence_traced(&synthetic, &params.encoder)?;
    Ok((seq.last_h().to_vec(), syn_seq.last_h().to_vec()))
}

/// Evaluates the composite loss of one record; with `grads`, also
/// accumulates its gradient. All randomness comes from substreams of `seed`.
pub fn patient_objective(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    opts: &ObjectiveOptions,
    record: &PatientRecord,
    seed: u64,
    mut grads: Option<&mut ModelParams>,
) -> Result<PatientOutcome> {
    let dims = params.dims();
    let weights = opts.weights;
    let label = record.label;

    let (embeddings, embed_traces) = embed_record(record, &params.embedder)?;
    let seq = encode_sequence_traced(&embeddings, &params.encoder)?;
    let k_len = seq.len();

    // Scratch gradients for the head when no accumulation is requested.
    let mut head_scratch = params.head.zeros_like();
    let (ce_orig, probs, d_h_last) = {
        let g = match grads.as_deref_mut() {
            Some(g) => &mut g.head,
            None => &mut head_scratch,
        };
        head_loss_backward(seq.last_h(), label, 1.0, &params.head, g)
    };

    let mut net = NoiseNet::new(&params.noise, schedule.steps());
    let mut gammas = Vec::new();

    // Noise regression on the fused clean embeddings.
    let mut diffusion_work = Vec::new();
    let mut l_diff = 0.0;
    if weights.diffusion != 0.0 {
        for (k, e) in embeddings.iter().enumerate() {
            let ctx = FusionContext::new(&seq.h_before(k), &params.fusion, opts.fusion)?;
            let (fused, trace) = ctx.fuse(e, &params.fusion);
            gammas.push([fused.gamma_e, fused.gamma_h]);
            let mut r = loss_stream(seed, k);
            let terms = loss_terms_traced(&fused.fused, schedule, &mut net, opts.loss_steps, &mut r);
            l_diff += terms.iter().map(|t| t.value).sum::<f64>();
            diffusion_work.push((ctx, trace, terms));
        }
    }

    // Synthetic sequence through the same cell and head.
    let mut samples = Vec::new();
    let mut ce_synth = 0.0;
    let mut synthetic_backward = None;
    if weights.synthetic != 0.0 {
        for k in 0..k_len {
            let mut r = visit_stream(seed, k);
            let s = sample_visit_traced(
                &seq.h_before(k),
                schedule,
                &params.fusion,
                opts.fusion,
                &mut net,
                &mut r,
            )?;
            gammas.extend_from_slice(&s.gammas);
            samples.push(s);
        }
        let synthetic: Vec<Vec<f64>> = samples.iter().map(|s| s.output.clone()).collect();
        let syn_seq = encode_sequence_traced(&synthetic, &params.encoder)?;
        let g = match grads.as_deref_mut() {
            Some(g) => &mut g.head,
            None => &mut head_scratch,
        };
        let (ce, _, d_h) = head_loss_backward(syn_seq.last_h(), label, weights.synthetic, &params.head, g);
        ce_synth = ce;
        synthetic_backward = Some((syn_seq, d_h));
    }

    let parts = LossParts {
        ce_orig,
        ce_synth,
        l_diff,
        total: total_loss(ce_orig, ce_synth, l_diff, weights),
    };
    let outcome = PatientOutcome {
        parts,
        prob_positive: probs[0],
        gammas,
    };
    let Some(grads) = grads else {
        return Ok(outcome);
    };

    let mut d_hidden = vec![vec![0.0; dims.d_h]; k_len];
    add_assign(&mut d_hidden[k_len - 1], &d_h_last);
    let mut d_embed = vec![vec![0.0; dims.d_e]; k_len];
    let mut noise_acc = net.new_grad();

    for (k, (ctx, trace, terms)) in diffusion_work.iter().enumerate() {
        let d_x0 = loss_terms_backward(
            terms,
            weights.diffusion,
            schedule,
            &net,
            &mut grads.noise,
            &mut noise_acc,
        );
        let mut acc = ctx.new_grad();
        let d_e = ctx.fuse_backward(
            &embeddings[k],
            trace,
            &d_x0,
            &params.fusion,
            &mut grads.fusion,
            &mut acc,
        );
        add_assign(&mut d_embed[k], &d_e);
        let d_h_prev = ctx.finish_backward(acc, &params.fusion, &mut grads.fusion);
        if k > 0 {
            add_assign(&mut d_hidden[k - 1], &d_h_prev);
        }
    }

    if let Some((syn_seq, d_h)) = synthetic_backward {
        let mut d_syn_hidden = vec![vec![0.0; dims.d_h]; k_len];
        d_syn_hidden[k_len - 1] = d_h;
        let d_synthetic = encode_backward(&syn_seq, &d_syn_hidden, &params.encoder, &mut grads.encoder);
        for (k, (s, d_out)) in samples.iter().zip(&d_synthetic).enumerate() {
            let d_h_prev = sample_visit_backward(
                s,
                d_out,
                schedule,
                &params.fusion,
                &mut grads.fusion,
                &net,
                &mut grads.noise,
                &mut noise_acc,
            );
            if k > 0 {
                add_assign(&mut d_hidden[k - 1], &d_h_prev);
            }
        }
    }
    net.finish_backward(noise_acc, &mut grads.noise);

    let d_inputs = encode_backward(&seq, &d_hidden, &params.encoder, &mut grads.encoder);
    for (k, trace) in embed_traces.iter().enumerate() {
        let mut d = d_inputs[k].clone();
        add_assign(&mut d, &d_embed[k]);
        embed_visit_backward(trace, &d, &params.embedder, &mut grads.embedder);
    }
    Ok(outcome)
}

/// Checks that `params` fit a cohort vocabulary.
pub fn check_vocab(params: &ModelParams, vocab: usize) -> Result<()> {
    if params.embedder.vocab_size() != vocab {
        return Err(Error::Shape(format!(
            "model vocabulary {} differs from data vocabulary {vocab}",
            params.embedder.vocab_size()
        )));
    }
    Ok(())
}
