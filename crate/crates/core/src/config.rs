//! Training configuration and its `key = value` file form.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{DiffusionSchedule, FusionMode, LossSteps};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{ModelDims, ObjectiveOptions};
use crate::predictor::LossWeights;

/// Pipeline variants used for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    None,
    /// No history conditioning in the fusion step.
    As1,
    /// Fusion weights fixed at 0.5.
    As2,
    /// No synthetic-sequence loss.
    As3,
    /// Neither synthetic-sequence nor diffusion loss: a bare LSTM classifier.
    Plain,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::None,
        AblationMode::As1,
        AblationMode::As2,
        AblationMode::As3,
        AblationMode::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::As1 => "AS1",
            AblationMode::As2 => "AS2",
            AblationMode::As3 => "AS3",
            AblationMode::Plain => "plain",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown ablation mode `{s}` (expected none, AS1, AS2, AS3 or plain)"
                ))
            })
    }
}

fn loss_steps_name(s: LossSteps) -> &'static str {
    match s {
        LossSteps::Sampled => "sampled",
        LossSteps::All => "all",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub d_e: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub d_b: usize,
    pub d_s: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub ablation: AblationMode,
    pub loss_steps: LossSteps,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            plateau_patience: 5,
            plateau_factor: 0.2,
            d_e: 256,
            d_h: 256,
            d_f: 64,
            d_b: 64,
            d_s: 32,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            lambda_s: 0.5,
            lambda_d: 0.1,
            seed: 0,
            batch_size: 1,
            ablation: AblationMode::None,
            loss_steps: LossSteps::Sampled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("plateau_patience", self.plateau_patience),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_f", self.d_f),
            ("d_b", self.d_b),
            ("d_s", self.d_s),
            ("diffusion_steps", self.diffusion_steps),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::validation("plateau_factor must lie in (0, 1)"));
        }
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be non-negative")));
            }
        }
        self.schedule().map(|_| ())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_e: self.d_e,
            d_h: self.d_h,
            d_f: self.d_f,
            d_b: self.d_b,
            d_s: self.d_s,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Objective switches after applying the ablation mode.
    pub fn objective(&self) -> ObjectiveOptions {
        let mut weights = LossWeights {
            synthetic: self.lambda_s,
            diffusion: self.lambda_d,
        };
        let fusion = match self.ablation {
            AblationMode::As1 => FusionMode::NoHistory,
            AblationMode::As2 => FusionMode::EqualWeights,
            _ => FusionMode::Attention,
        };
        match self.ablation {
            AblationMode::As3 => weights.synthetic = 0.0,
            AblationMode::Plain => {
                weights = LossWeights {
                    synthetic: 0.0,
                    diffusion: 0.0,
                }
            }
            _ => {}
        }
        ObjectiveOptions {
            fusion,
            weights,
            loss_steps: self.loss_steps,
        }
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = TrainConfig::default();
        let loss_steps = match kv.take::<String>("loss_steps")?.as_deref() {
            None => d.loss_steps,
            Some("sampled") => LossSteps::Sampled,
            Some("all") => LossSteps::All,
            Some(other) => {
                return Err(Error::validation(format!(
                    "unknown loss_steps `{other}` (expected sampled or all)"
                )))
            }
        };
        let ablation = match kv.take::<String>("ablation_mode")? {
            None => d.ablation,
            Some(s) => s.parse()?,
        };
        let cfg = TrainConfig {
            epochs: kv.take("epochs")?.unwrap_or(d.epochs),
            learning_rate: kv.take("learning_rate")?.unwrap_or(d.learning_rate),
            weight_decay: kv.take("weight_decay")?.unwrap_or(d.weight_decay),
            plateau_patience: kv.take("plateau_patience")?.unwrap_or(d.plateau_patience),
            plateau_factor: kv.take("plateau_factor")?.unwrap_or(d.plateau_factor),
            d_e: kv.take("d_e")?.unwrap_or(d.d_e),
            d_h: kv.take("d_h")?.unwrap_or(d.d_h),
            d_f: kv.take("d_f")?.unwrap_or(d.d_f),
            d_b: kv.take("d_b")?.unwrap_or(d.d_b),
            d_s: kv.take("d_s")?.unwrap_or(d.d_s),
            diffusion_steps: kv.take("diffusion_steps")?.unwrap_or(d.diffusion_steps),
            beta_start: kv.take("beta_start")?.unwrap_or(d.beta_start),
            beta_end: kv.take("beta_end")?.unwrap_or(d.beta_end),
            lambda_s: kv.take("lambda_s")?.unwrap_or(d.lambda_s),
            lambda_d: kv.take("lambda_d")?.unwrap_or(d.lambda_d),
            seed: kv.take("seed")?.unwrap_or(d.seed),
            batch_size: kv.take("batch_size")?.unwrap_or(d.batch_size),
            ablation,
            loss_steps,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one per line; [`TrainConfig::from_kv`] reads it back exactly.
    pub fn to_kv(&self) -> String {
        format!(
            "epochs = {}\nlearning_rate = {}\nweight_decay = {}\nplateau_patience = {}\n\
             plateau_factor = {}\nd_e = {}\nd_h = {}\nd_f = {}\nd_b = {}\nd_s = {}\n\
             diffusion_steps = {}\nbeta_start = {}\nbeta_end = {}\nlambda_s = {}\nlambda_d = {}\n\
             seed = {}\nbatch_size = {}\nablation_mode = {}\nloss_steps = {}\n",
            self.epochs,
            self.learning_rate,
            self.weight_decay,
            self.plateau_patience,
            self.plateau_factor,
            self.d_e,
            self.d_h,
            self.d_f,
            self.d_b,
            self.d_s,
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.lambda_s,
            self.lambda_d,
            self.seed,
            self.batch_size,
            self.ablation,
            loss_steps_name(self.loss_steps),
        )
    }
}
