//! Post-hoc inspection of a trained model: which codes synthetic visits
//! resemble, and hidden-state export for external projection.

use std::path::Path;

use rand::seq::index::sample;

use crate::corpus::{Cohort, PatientRecord, Visit};
use crate::diffusion::{sample_synthetic_visit, visit_stream};
use crate::embedder::embed_visit;
use crate::encoder::encode_sequence;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::original_and_synthetic_last_hidden;
use crate::rng;
use crate::trainer::TrainedModel;

const PROBE_STREAM: u64 = 0x960BE;
const EXPORT_STREAM: u64 = 0xE7;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Column of `m` with the highest cosine similarity to `v`, with its
/// similarity. Ties go to the lowest index; zero-norm columns never match.
pub fn cosine_argmax(v: &[f64], m: &Matrix) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..m.cols {
        let col = m.column(j);
        if norm(&col) == 0.0 {
            continue;
        }
        let s = cosine(v, &col);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeFrequency {
    pub code: usize,
    pub count: usize,
    /// 1-based rank by synthetic count.
    pub synthetic_rank: usize,
    /// 1-based rank in the supplied original frequency table.
    pub original_rank: Option<usize>,
}

/// 1-based ranks by descending value; ties keep index order.
pub fn ranks(values: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].cmp(&values[a]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    rank
}

/// Maps `repetitions` probe vectors per code onto the nearest column of
/// `code_weight` and tabulates how often each code is hit, most frequent
/// first. `probe(code, repetition)` produces the synthetic vector.
pub fn map_codes_with<P>(
    code_weight: &Matrix,
    repetitions: usize,
    original_frequencies: Option<&[usize]>,
    mut probe: P,
) -> Result<Vec<CodeFrequency>>
where
    P: FnMut(usize, usize) -> Result<Vec<f64>>,
{
    let m = code_weight.cols;
    if m < 2 {
        return Err(Error::validation("code mapping needs at least two codes"));
    }
    if repetitions == 0 {
        return Err(Error::validation("repetitions must be positive"));
    }
    if let Some(freq) = original_frequencies {
        if freq.len() != m {
            return Err(Error::Shape(format!(
                "{} original frequencies for {m} codes",
                freq.len()
            )));
        }
    }
    for j in (0..m).filter(|&j| norm(&code_weight.column(j)) == 0.0) {
        log::warn!("code {j} has a zero embedding column and is excluded from matching");
    }

    let mut counts = vec![0usize; m];
    for code in 0..m {
        for rep in 0..repetitions {
            let v = probe(code, rep)?;
            let (hit, _) = cosine_argmax(&v, code_weight)
                .ok_or_else(|| Error::validation("every code embedding column is zero"))?;
            counts[hit] += 1;
        }
    }

    let synthetic = ranks(&counts);
    let original = original_frequencies.map(ranks);
    let mut table: Vec<CodeFrequency> = (0..m)
        .map(|code| CodeFrequency {
            code,
            count: counts[code],
            synthetic_rank: synthetic[code],
            original_rank: original.as_ref().map(|r| r[code]),
        })
        .collect();
    table.sort_by_key(|r| r.synthetic_rank);
    Ok(table)
}

/// Synthetic visit embedding for a one-visit patient holding only `code`.
/// The visit is embedded with zero gap, encoded from a zero state, and the
/// sampler is conditioned on the resulting hidden state.
pub fn probe_code(model: &TrainedModel, code: usize, seed: u64) -> Result<Vec<f64>> {
    let p = &model.params;
    let visit = Visit::new([code], 0)?;
    let e = embed_visit(&visit, 0, &p.embedder)?;
    let states = encode_sequence(&[e], &p.encoder)?;
    let mut r = visit_stream(seed, 0);
    let fusion = model.config.objective().fusion;
    sample_synthetic_visit(&states[0].h, &model.schedule, &p.fusion, &p.noise, fusion, &mut r)
}

/// Frequency table of the codes that synthetic visits of single-code probes
/// resemble most.
pub fn map_synthetic_codes(
    model: &TrainedModel,
    seed: u64,
    repetitions: usize,
    original_frequencies: Option<&[usize]>,
) -> Result<Vec<CodeFrequency>> {
    map_codes_with(
        &model.params.embedder.code_weight,
        repetitions,
        original_frequencies,
        |code, rep| {
            probe_code(
                model,
                code,
                rng::derive_seed(seed, &[PROBE_STREAM, code as u64, rep as u64]),
            )
        },
    )
}

pub fn code_table_to_csv(table: &[CodeFrequency]) -> String {
    let mut out = String::from("code,count,synthetic_rank,original_rank\n");
    for r in table {
        let orig = r.original_rank.map_or(String::new(), |x| x.to_string());
        out.push_str(&format!("{},{},{},{}\n", r.code, r.count, r.synthetic_rank, orig));
    }
    out
}

/// Up to `n` records drawn without replacement, in cohort order.
pub fn sample_records(cohort: &Cohort, n: usize, seed: u64) -> Vec<(usize, &PatientRecord)> {
    let mut idx = sample(
        &mut rng::stream(seed, &[EXPORT_STREAM]),
        cohort.len(),
        n.min(cohort.len()),
    )
    .into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| (i, &cohort.records[i])).collect()
}

/// CSV of `h_K` and `h'_K` for up to `n` sampled records: header
/// `label,source,h0,...`, then one `original` and one `synthetic` row each.
pub fn hidden_states_csv(model: &TrainedModel, cohort: &Cohort, n: usize, seed: u64) -> Result<String> {
    if cohort.is_empty() || n == 0 {
        return Err(Error::validation("hidden-state export needs a non-empty sample"));
    }
    let d_h = model.params.encoder.hidden_dim();
    let mut out = String::from("label,source");
    for j in 0..d_h {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    let fusion = model.config.objective().fusion;
    for (i, record) in sample_records(cohort, n, seed) {
        let s = rng::derive_seed(seed, &[i as u64]);
        let (h, h_syn) = original_and_synthetic_last_hidden(&model.params, &model.schedule, fusion, record, s)?;
        for (source, values) in [("original", h), ("synthetic", h_syn)] {
            out.push_str(&format!("{},{source}", record.label));
            for v in values {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_hidden_states(model: &TrainedModel, cohort: &Cohort, n: usize, seed: u64, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, hidden_states_csv(model, cohort, n, seed)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::ModelParams;

    fn tiny_model(seed: u64) -> TrainedModel {
        let config = TrainConfig {
            d_e: 6,
            d_h: 5,
            d_f: 3,
            d_b: 3,
            d_s: 4,
            diffusion_steps: 6,
            ..TrainConfig::default()
        };
        TrainedModel {
            params: ModelParams::init(config.dims(7), seed),
            schedule: config.schedule().unwrap(),
            config,
            best_val_f1: 0.0,
            epoch_of_best: 1,
        }
    }

    #[test]
    fn stub_probe_returning_a_column_maps_to_it() {
        let w = tiny_model(1).params.embedder.code_weight;
        let (hit, sim) = cosine_argmax(&w.column(4), &w).unwrap();
        assert_eq!(hit, 4);
        assert!((sim - 1.0).abs() < 1e-12);
        let table = map_codes_with(&w, 1, None, |code, _| Ok(w.column((code + 1) % 7))).unwrap();
        assert!(table.iter().all(|r| r.count == 1));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let w = Matrix::from_rows(&[&[1.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 1.0, 1.0]]);
        assert_eq!(cosine_argmax(&[2.0, 2.0], &w).unwrap().0, 2);
    }

    #[test]
    fn zero_columns_are_skipped() {
        let w = Matrix::from_rows(&[&[0.0, -1.0, 0.5], &[0.0, 0.0, 0.5]]);
        assert_eq!(cosine_argmax(&[1.0, 1.0], &w).unwrap().0, 2);
        let all_zero = Matrix::zeros(2, 3);
        assert!(cosine_argmax(&[1.0, 1.0], &all_zero).is_none());
        assert!(map_codes_with(&all_zero, 1, None, |_, _| Ok(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn ranks_follow_counts_then_index() {
        assert_eq!(ranks(&[3, 5, 3, 0]), vec![2, 1, 3, 4]);
    }

    #[test]
    fn real_probe_counts_sum_to_probes() {
        let model = tiny_model(2);
        let freq = vec![9, 1, 1, 0, 4, 4, 2];
        for reps in [1, 3] {
            let table = map_synthetic_codes(&model, 5, reps, Some(&freq)).unwrap();
            assert_eq!(table.iter().map(|r| r.count).sum::<usize>(), 7 * reps);
            assert_eq!(table[0].synthetic_rank, 1);
            assert_eq!(table.iter().find(|r| r.code == 0).unwrap().original_rank, Some(1));
        }
        assert_eq!(
            map_synthetic_codes(&model, 5, 1, None).unwrap(),
            map_synthetic_codes(&model, 5, 1, None).unwrap()
        );
    }

    #[test]
    fn mapping_input_errors() {
        let model = tiny_model(2);
        assert!(map_synthetic_codes(&model, 0, 0, None).is_err());
        assert!(map_synthetic_codes(&model, 0, 1, Some(&[1, 2])).is_err());
        let one = Matrix::from_rows(&[&[1.0]]);
        assert!(map_codes_with(&one, 1, None, |_, _| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn export_has_two_rows_per_record() {
        let model = tiny_model(3);
        let spec = crate::corpus::CohortSpec {
            n_patients: 60,
            vocab_size: 7,
            signal_codes: vec![0],
            ..Default::default()
        };
        let cohort = crate::corpus::generate_cohort(&spec, 4).unwrap();
        let csv = hidden_states_csv(&model, &cohort, 50, 8).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 101);
        assert_eq!(lines[0], "label,source,h0,h1,h2,h3,h4");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5 + 2));
        assert!(lines[1].contains(",original,") && lines[2].contains(",synthetic,"));
        assert_eq!(csv, hidden_states_csv(&model, &cohort, 50, 8).unwrap());
        assert_ne!(csv, hidden_states_csv(&model, &cohort, 50, 9).unwrap());
        assert!(hidden_states_csv(&model, &cohort, 0, 8).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn argmax_ignores_positive_scaling(seed in 0u64..1000, scale in 1e-6f64..1e6) {
                let w = tiny_model(seed).params.embedder.code_weight;
                let mut r = rng::stream(seed, &[7]);
                let v = rng::standard_normal_vec(&mut r, w.rows);
                let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
                prop_assert_eq!(cosine_argmax(&v, &w).unwrap().0, cosine_argmax(&scaled, &w).unwrap().0);
            }
        }
    }
}
