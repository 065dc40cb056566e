//! Time-ordered code records: data model, text format, synthetic cohort
//! generation and stratified splitting.
//!
//! File format (UTF-8):
//!
//! ```text
//! #vocab 5
//! 1<TAB>0:2,5;14:2
//! 0<TAB>3:1
//! ```
//!
//! One record per line: label, a tab character, then `day:codes` visits separated by
//! `;`, codes ascending and `,`-separated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Visit {
    /// Sorted, unique code indices.
    codes: Vec<usize>,
    pub day: u32,
}

impl Visit {
    pub fn new(codes: impl IntoIterator<Item = usize>, day: u32) -> Result<Self> {
        let raw: Vec<usize> = codes.into_iter().collect();
        let set: BTreeSet<usize> = raw.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::validation("visit has no codes"));
        }
        if set.len() != raw.len() {
            return Err(Error::validation("visit has duplicate codes"));
        }
        Ok(Visit {
            codes: set.into_iter().collect(),
            day,
        })
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatientRecord {
    visits: Vec<Visit>,
    pub label: u8,
}

impl PatientRecord {
    pub fn new(visits: Vec<Visit>, label: u8) -> Result<Self> {
        if visits.is_empty() {
            return Err(Error::validation("record has no visits"));
        }
        if label > 1 {
            return Err(Error::validation(format!("label {label} not in {{0,1}}")));
        }
        if visits.windows(2).any(|w| w[0].day > w[1].day) {
            return Err(Error::validation("visits are not sorted by day"));
        }
        Ok(PatientRecord { visits, label })
    }

    pub fn visits(&self) -> &[Visit] {
        &self.visits
    }

    /// Day of the last visit, the anchor for time gaps.
    pub fn last_day(&self) -> u32 {
        self.visits.last().map_or(0, |v| v.day)
    }

    pub fn max_code(&self) -> usize {
        self.visits
            .iter()
            .flat_map(|v| v.codes.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub vocab_size: usize,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, vocab_size: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("empty cohort"));
        }
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.max_code() >= vocab_size) {
            return Err(Error::validation(format!(
                "record {i}: code {} outside vocabulary of size {vocab_size}",
                r.max_code()
            )));
        }
        Ok(Cohort { records, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    /// Occurrence count of every code across all visits.
    pub fn code_frequencies(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab_size];
        for v in self.records.iter().flat_map(|r| r.visits.iter()) {
            for &c in &v.codes {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            vocab_size: self.vocab_size,
        }
    }
}

pub fn parse_corpus(text: &str) -> Result<Cohort> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing `#vocab <M>` header".into(),
    })?;
    let vocab_size: usize = header
        .strip_prefix("#vocab ")
        .and_then(|m| m.trim().parse().ok())
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected `#vocab <M>` header, got `{header}`"),
        })?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line).map_err(|msg| Error::Parse { line: line_no, msg })?;
        if record.max_code() >= vocab_size {
            return Err(Error::Validation(format!(
                "line {line_no}: code {} outside vocabulary of size {vocab_size}",
                record.max_code()
            )));
        }
        records.push(record);
    }
    Cohort::new(records, vocab_size)
}

fn parse_record(line: &str) -> std::result::Result<PatientRecord, String> {
    let (label, body) = line.split_once('\t').ok_or("expected `<label>\\t<visits>`")?;
    let label: u8 = match label {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("label must be 0 or 1, got `{other}`")),
    };
    let mut visits = Vec::new();
    for chunk in body.split(';') {
        let (day, codes) = chunk
            .split_once(':')
            .ok_or_else(|| format!("visit `{chunk}` lacks `day:codes`"))?;
        let day: u32 = day.parse().map_err(|_| format!("invalid day `{day}`"))?;
        let codes: Vec<usize> = codes
            .split(',')
            .map(|c| c.parse().map_err(|_| format!("invalid code `{c}`")))
            .collect::<std::result::Result<_, _>>()?;
        visits.push(Visit::new(codes, day).map_err(|e| e.to_string())?);
    }
    PatientRecord::new(visits, label).map_err(|e| e.to_string())
}

/// Canonical text form; `parse_corpus(&serialize_corpus(c)) == c`.
pub fn serialize_corpus(cohort: &Cohort) -> String {
    let mut out = format!("#vocab {}\n", cohort.vocab_size);
    for r in &cohort.records {
        write!(out, "{}\t", r.label).unwrap();
        for (i, v) in r.visits.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            write!(out, "{}:{}", v.day, join_list(&v.codes)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_corpus(path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn save_corpus(cohort: &Cohort, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, serialize_corpus(cohort).as_bytes())
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub positive_fraction: f64,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub vocab_size: usize,
    pub signal_codes: Vec<usize>,
    pub signal_strength: f64,
    pub max_span_days: u32,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 600,
            positive_fraction: 0.25,
            mean_visits: 4.0,
            mean_codes_per_visit: 3.0,
            vocab_size: 50,
            signal_codes: vec![0, 1, 2],
            signal_strength: 0.8,
            max_span_days: 720,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(format!("cohort spec: {m}")));
        if self.n_patients == 0 {
            return fail("n_patients must be positive");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return fail("positive_fraction must lie in (0, 1)");
        }
        if !(self.mean_visits >= 1.0 && self.mean_visits.is_finite()) {
            return fail("mean_visits must be >= 1");
        }
        if !(self.mean_codes_per_visit >= 1.0 && self.mean_codes_per_visit.is_finite()) {
            return fail("mean_codes_per_visit must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail("signal_strength must lie in [0, 1]");
        }
        let distinct: BTreeSet<_> = self.signal_codes.iter().collect();
        if distinct.len() != self.signal_codes.len() {
            return fail("signal_codes contains duplicates");
        }
        if self.signal_codes.iter().any(|&c| c >= self.vocab_size) {
            return fail("signal_codes must be < vocab_size");
        }
        if self.signal_codes.len() >= self.vocab_size {
            return fail("vocabulary needs at least one non-signal code");
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = CohortSpec::default();
        let spec = CohortSpec {
            n_patients: kv.take("n_patients")?.unwrap_or(d.n_patients),
            positive_fraction: kv.take("positive_fraction")?.unwrap_or(d.positive_fraction),
            mean_visits: kv.take("mean_visits")?.unwrap_or(d.mean_visits),
            mean_codes_per_visit: kv.take("mean_codes_per_visit")?.unwrap_or(d.mean_codes_per_visit),
            vocab_size: kv.take("vocab_size")?.unwrap_or(d.vocab_size),
            signal_codes: kv.take_list("signal_codes")?.unwrap_or(d.signal_codes),
            signal_strength: kv.take("signal_strength")?.unwrap_or(d.signal_strength),
            max_span_days: kv.take("max_span_days")?.unwrap_or(d.max_span_days),
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_patients = {}\npositive_fraction = {}\nmean_visits = {}\nmean_codes_per_visit = {}\n\
             vocab_size = {}\nsignal_codes = {}\nsignal_strength = {}\nmax_span_days = {}\n",
            self.n_patients,
            self.positive_fraction,
            self.mean_visits,
            self.mean_codes_per_visit,
            self.vocab_size,
            join_list(&self.signal_codes),
            self.signal_strength,
            self.max_span_days
        )
    }
}

/// Draws a seeded synthetic cohort.
///
/// Exactly `round(n * positive_fraction)` records are positive. Each visit of
/// a positive record contains each signal code with probability
/// `signal_strength` (`signal_strength / 4` for negatives) on top of
/// `1 + Poisson(mean_codes - 1)` background codes drawn from the non-signal
/// vocabulary. Visit counts are `1 + Poisson(mean_visits - 1)`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[0xC0_4047]);

    let n_pos = (spec.n_patients as f64 * spec.positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n_patients).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let signal: BTreeSet<usize> = spec.signal_codes.iter().copied().collect();
    let background: Vec<usize> = (0..spec.vocab_size).filter(|c| !signal.contains(c)).collect();
    let extra_visits = poisson(spec.mean_visits - 1.0)?;
    let extra_codes = poisson(spec.mean_codes_per_visit - 1.0)?;

    let mut records = Vec::with_capacity(spec.n_patients);
    for &label in &labels {
        let n_visits = 1 + extra_visits.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut days: Vec<u32> = (0..n_visits).map(|_| rng.gen_range(0..=spec.max_span_days)).collect();
        days.sort_unstable();

        let p_signal = if label == 1 {
            spec.signal_strength
        } else {
            spec.signal_strength / 4.0
        };
        let mut visits = Vec::with_capacity(n_visits);
        for day in days {
            let n_bg = (1 + extra_codes.as_ref().map_or(0, |p| p.sample(&mut rng) as usize)).min(background.len());
            let mut codes: Vec<usize> = background.choose_multiple(&mut rng, n_bg).copied().collect();
            for &s in &spec.signal_codes {
                if rng.gen_bool(p_signal) {
                    codes.push(s);
                }
            }
            visits.push(Visit::new(codes, day)?);
        }
        records.push(PatientRecord::new(visits, label)?);
    }
    Cohort::new(records, spec.vocab_size)
}

fn poisson(mean: f64) -> Result<Option<Poisson<f64>>> {
    if mean <= 0.0 {
        return Ok(None);
    }
    Poisson::new(mean)
        .map(Some)
        .map_err(|e| Error::validation(format!("poisson({mean}): {e}")))
}

/// Train/validation/test split proportions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.75,
            val: 0.10,
            test: 0.15,
        }
    }
}

/// Indices of each split into the source cohort, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified seeded split.
///
/// Split sizes are `round(n * val)`, `round(n * test)` and the remainder for
/// training; positives are apportioned the same way, so every split's
/// positive count is within one record of its proportional share.
pub fn split_indices(cohort: &Cohort, ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split ratios ({train}, {val}, {test}) must be in [0,1] and sum to 1"
        )));
    }
    let n = cohort.len();
    let n_val = (n as f64 * val).round() as usize;
    let n_test = (n as f64 * test).round() as usize;
    if n_val + n_test >= n || n_val == 0 || n_test == 0 {
        return Err(Error::validation(format!(
            "cohort of {n} records cannot fill every split"
        )));
    }

    let mut rng = rng::stream(seed, &[0x5_971]);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| cohort.records[i].label == 1);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let p = pos.len();
    let p_val = ((p as f64 * val).round() as usize).min(n_val);
    let p_test = ((p as f64 * test).round() as usize).min(n_test).min(p - p_val);
    let neg_val = n_val - p_val;
    let neg_test = n_test - p_test;
    if neg_val + neg_test > neg.len() {
        return Err(Error::validation("too few negatives to stratify the split"));
    }

    let mut val_idx: Vec<usize> = pos[..p_val].iter().chain(&neg[..neg_val]).copied().collect();
    let mut test_idx: Vec<usize> = pos[p_val..p_val + p_test]
        .iter()
        .chain(&neg[neg_val..neg_val + neg_test])
        .copied()
        .collect();
    let mut train_idx: Vec<usize> = pos[p_val + p_test..]
        .iter()
        .chain(&neg[neg_val + neg_test..])
        .copied()
        .collect();
    if train_idx.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitIndices {
        train: train_idx,
        val: val_idx,
        test: test_idx,
    })
}

pub fn split_cohort(cohort: &Cohort, ratios: SplitRatios, seed: u64) -> Result<(Cohort, Cohort, Cohort)> {
    let idx = split_indices(cohort, ratios, seed)?;
    Ok((
        cohort.subset(&idx.train),
        cohort.subset(&idx.val),
        cohort.subset(&idx.test),
    ))
}
