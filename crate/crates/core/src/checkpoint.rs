//! Versioned plain-text checkpoints.
//!
//! ```text
//! meddiff-checkpoint 1
//! [config]
//! epochs = 30
//! ...
//! [meta]
//! vocab = 50
//! best_val_f1 = 0.91
//! epoch_of_best = 12
//! [schedule]
//! 0.0001 0.00030101010101010105 ...
//! [tensor embedder code_weight 32 50]
//! <one line of space-separated values per row>
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so a reloaded model evaluates bit-identically.

use std::path::Path;

use crate::config::TrainConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelParams;
use crate::trainer::TrainedModel;

pub const MAGIC: &str = "meddiff-checkpoint";
pub const VERSION: u32 = 1;

fn join_values(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn to_text(model: &TrainedModel) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n[config]\n{}", model.config.to_kv());
    out.push_str(&format!(
        "[meta]\nvocab = {}\nbest_val_f1 = {}\nepoch_of_best = {}\n",
        model.params.embedder.vocab_size(),
        model.best_val_f1,
        model.epoch_of_best
    ));
    out.push_str(&format!("[schedule]\n{}\n", join_values(model.schedule.betas())));
    for (group, name, t) in model.params.tensors() {
        out.push_str(&format!("[tensor {group} {name} {} {}]\n", t.rows, t.cols));
        for r in 0..t.rows {
            out.push_str(&join_values(t.row(r)));
            out.push('\n');
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::validation(format!("checkpoint ends before {what}")))
    }

    fn expect(&mut self, header: &str) -> Result<()> {
        let (line, text) = self.next(header)?;
        if text != header {
            return Err(Error::Parse {
                line,
                msg: format!("expected `{header}`, found `{text}`"),
            });
        }
        Ok(())
    }

    /// Lines up to the next `[` header.
    fn section(&mut self) -> String {
        let mut body = String::new();
        while let Some((_, l)) = self.inner.peek() {
            if l.starts_with('[') {
                break;
            }
            body.push_str(l);
            body.push('\n');
            self.inner.next();
        }
        body
    }
}

fn parse_values(line: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let values = text
        .split_ascii_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line,
            msg: format!("bad number: {e}"),
        })?;
    if values.len() != expected {
        return Err(Error::Parse {
            line,
            msg: format!("expected {expected} values, found {}", values.len()),
        });
    }
    Ok(values)
}

pub fn from_text(text: &str) -> Result<TrainedModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate().peekable(),
    };
    let (line, first) = lines.next("the header")?;
    match first.split_once(' ') {
        Some((MAGIC, v)) if v.trim() == VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(Error::Parse {
                line,
                msg: format!("unsupported checkpoint version `{v}`"),
            })
        }
        _ => {
            return Err(Error::Parse {
                line,
                msg: "not a checkpoint file".into(),
            })
        }
    }

    lines.expect("[config]")?;
    let config = TrainConfig::from_kv(&lines.section())?;
    lines.expect("[meta]")?;
    let mut meta = KvMap::parse(&lines.section())?;
    let missing = |k: &str| Error::validation(format!("checkpoint meta is missing `{k}`"));
    let vocab: usize = meta.take("vocab")?.ok_or_else(|| missing("vocab"))?;
    let best_val_f1: f64 = meta.take("best_val_f1")?.ok_or_else(|| missing("best_val_f1"))?;
    let epoch_of_best: usize = meta.take("epoch_of_best")?.ok_or_else(|| missing("epoch_of_best"))?;
    meta.finish()?;

    lines.expect("[schedule]")?;
    let (line, betas) = lines.next("the schedule")?;
    let schedule = DiffusionSchedule::from_betas(parse_values(line, betas, config.diffusion_steps)?)?;

    let mut params = ModelParams::init(config.dims(vocab), 0);
    for (group, name, t) in params.tensors_mut() {
        lines.expect(&format!("[tensor {group} {name} {} {}]", t.rows, t.cols))?;
        for r in 0..t.rows {
            let (line, row) = lines.next("the end of a tensor")?;
            let values = parse_values(line, row, t.cols)?;
            t.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&values);
        }
    }
    if let Some((i, l)) = lines.inner.next() {
        return Err(Error::Parse {
            line: i + 1,
            msg: format!("unexpected trailing content `{l}`"),
        });
    }
    Ok(TrainedModel {
        params,
        schedule,
        config,
        best_val_f1,
        epoch_of_best,
    })
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_text(model).as_bytes())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
