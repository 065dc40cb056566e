//! Finite-difference verification of the analytic gradient.

use std::fmt;

use crate::corpus::PatientRecord;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::model::{patient_objective, ModelParams, ObjectiveOptions, GROUP_NAMES};
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Entries where both gradients are below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: &'static str,
    pub max_rel_error: f64,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    /// Groups whose error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error.is_nan() || g.max_rel_error > tolerance)
            .collect()
    }

    pub fn check(&self, tolerance: f64) -> Result<()> {
        let failed = self.failures(tolerance);
        if failed.is_empty() {
            return Ok(());
        }
        Err(Error::GradientCheck(
            failed
                .iter()
                .map(|g| {
                    format!(
                        "{} ({:.3e} at {}[{}])",
                        g.group, g.max_rel_error, g.worst_tensor, g.worst_index
                    )
                })
                .collect::<Vec<_>>()
                .join(", "),
        ))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<9} max_rel_error = {:.3e} ({} entries, worst {}[{}])",
                g.group, g.max_rel_error, g.entries, g.worst_tensor, g.worst_index
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn compare_gradients<F>(params: &ModelParams, analytic: &ModelParams, mut loss: F) -> GradCheckReport
where
    F: FnMut(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut groups: Vec<GroupError> = GROUP_NAMES
        .iter()
        .map(|&group| GroupError {
            group,
            max_rel_error: 0.0,
            worst_tensor: "",
            worst_index: 0,
            entries: 0,
        })
        .collect();

    let locations: Vec<(&'static str, &'static str, usize)> = params
        .tensors()
        .iter()
        .flat_map(|(g, n, t)| (0..t.len()).map(move |i| (*g, *n, i)))
        .collect();
    let analytic_flat: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data.iter().copied())
        .collect();

    for (flat, &(group, name, i)) in locations.iter().enumerate() {
        let original = set_entry(&mut probe, flat, None);
        set_entry(&mut probe, flat, Some(original + FD_STEP));
        let up = loss(&probe);
        set_entry(&mut probe, flat, Some(original - FD_STEP));
        let down = loss(&probe);
        set_entry(&mut probe, flat, Some(original));

        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic_flat[flat], numeric);
        let g = groups.iter_mut().find(|g| g.group == group).expect("known group");
        g.entries += 1;
        if err.is_nan() || err > g.max_rel_error {
            g.max_rel_error = err;
            g.worst_tensor = name;
            g.worst_index = i;
        }
    }
    GradCheckReport { groups }
}

/// Reads the flat entry; writes `value` when given. Returns the old value.
fn set_entry(params: &mut ModelParams, mut flat: usize, value: Option<f64>) -> f64 {
    for (_, _, t) in params.tensors_mut() {
        if flat < t.len() {
            let old = t.data[flat];
            if let Some(v) = value {
                t.data[flat] = v;
            }
            return old;
        }
        flat -= t.len();
    }
    panic!("flat index out of range");
}

/// Summed objective over a micro-batch; record `j` draws from substream `j`.
pub fn batch_objective(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    opts: &ObjectiveOptions,
    batch: &[PatientRecord],
    seed: u64,
    mut grads: Option<&mut ModelParams>,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, record) in batch.iter().enumerate() {
        let s = rng::derive_seed(seed, &[j as u64]);
        total += patient_objective(params, schedule, opts, record, s, grads.as_deref_mut())?
            .parts
            .total;
    }
    Ok(total)
}

/// Analytic gradient of the micro-batch objective.
pub fn analytic_gradient(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    opts: &ObjectiveOptions,
    batch: &[PatientRecord],
    seed: u64,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    batch_objective(params, schedule, opts, batch, seed, Some(&mut grads))?;
    Ok(grads)
}

/// Compares the analytic gradient of the micro-batch objective with central
/// differences, replaying identical random streams for every evaluation.
pub fn gradient_check(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    opts: &ObjectiveOptions,
    batch: &[PatientRecord],
    seed: u64,
) -> Result<GradCheckReport> {
    if batch.is_empty() || batch.len() > 2 {
        return Err(Error::validation(
            "gradient check takes a micro-batch of 1 or 2 records",
        ));
    }
    let margin = relu_margin(params, batch);
    if margin <= 2.0 * FD_STEP {
        return Err(Error::validation(format!(
            "a visit pre-activation lies {margin:.3e} from the ReLU kink, inside the finite-difference step"
        )));
    }
    let analytic = analytic_gradient(params, schedule, opts, batch, seed)?;
    let mut failure = None;
    let report = compare_gradients(params, &analytic, |p| {
        batch_objective(p, schedule, opts, batch, seed, None).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Smallest absolute code pre-activation `W_v c + b_v` over every visit in
/// `batch`. Central differences are meaningless within `FD_STEP` of zero.
pub fn relu_margin(params: &ModelParams, batch: &[PatientRecord]) -> f64 {
    let emb = &params.embedder;
    let mut margin = f64::INFINITY;
    for visit in batch.iter().flat_map(|r| r.visits()) {
        for row in 0..emb.dim() {
            let pre = emb.code_bias.data[row] + visit.codes().iter().map(|&c| emb.code_weight.get(row, c)).sum::<f64>();
            margin = margin.min(pre.abs());
        }
    }
    margin
}

/// The reduced configuration used for gradient verification:
/// `d_e = d_h = 8`, `d_f = d_b = d_s = 4`, `N = 4`, vocabulary 6 and two
/// short records.
pub fn micro_setup(seed: u64) -> (ModelParams, DiffusionSchedule, Vec<PatientRecord>) {
    use crate::corpus::Visit;
    use crate::model::ModelDims;

    let dims = ModelDims {
        vocab: 6,
        d_e: 8,
        d_h: 8,
        d_f: 4,
        d_b: 4,
        d_s: 4,
    };
    let params = ModelParams::init(dims, seed);
    let schedule = DiffusionSchedule::linear(4, 1e-4, 0.02).expect("valid schedule");
    let visit = |codes: &[usize], day| Visit::new(codes.iter().copied(), day).expect("valid visit");
    let batch = vec![
        PatientRecord::new(vec![visit(&[0, 3], 0), visit(&[1], 40), visit(&[2, 4, 5], 200)], 1).expect("valid record"),
        PatientRecord::new(vec![visit(&[5], 10), visit(&[0, 2], 95)], 0).expect("valid record"),
    ];
    (params, schedule, batch)
}
