//! Run configuration.
//!
//! Configuration files are `key = value` lines. Keys before any section
//! header apply to every command; keys under `[pretrain]`, `[train]` or
//! `[eval]` apply only to that command and override the common ones.

use std::fmt;
use std::str::FromStr;

use crate::backbones::{Architecture, BackboneKind};
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Nearest prototype under the trained Prototypical Network.
    Pn,
    /// Softmax linear classifier trained on generated features.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeenSource {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Train,
    Eval,
}

impl Stage {
    pub fn section(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

macro_rules! text_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

text_enum!(Head, "head", Head::Pn => "pn", Head::Linear => "linear");
text_enum!(SeenSource, "seen source", SeenSource::Real => "real", SeenSource::Synthetic => "synthetic");

/// Every tunable of a run, resolved for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mode: Mode,
    pub backbone: BackboneKind,
    pub head: Head,
    pub seed: u64,
    /// Learning rate of the generative model.
    pub alpha_f: f64,
    /// Learning rate of the few-shot classifier.
    pub alpha_h: f64,
    /// Weight of the adversarial term of f-VAEGAN.
    pub beta: f64,
    /// Weight of the few-shot loss in the generator objective.
    pub gamma: f64,
    /// Weight of the gradient penalty.
    pub lambda: f64,
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    /// Generator updates.
    pub iterations: usize,
    pub critic_steps: usize,
    /// Pre-training episodes.
    pub pretrain_episodes: usize,
    /// Hidden layers of the Prototypical Network.
    pub pn_hidden: usize,
    /// Synthetic test support per unseen class.
    pub n_shot_test: usize,
    /// Test support per seen class (generalized setting).
    pub m_shot: usize,
    pub seen_source: SeenSource,
    pub finetune: bool,
    pub gen_hidden: Vec<usize>,
    pub enc_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub linear_lr: f64,
    pub linear_epochs: usize,
    pub linear_batch: usize,
    /// Generated rows per chunk when building the test support.
    pub eval_chunk: usize,
    /// Whether joint training starts from a pre-trained network.
    pub pretrain: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: Mode::Zsl,
            backbone: BackboneKind::Vaegan,
            head: Head::Pn,
            seed: 0,
            alpha_f: 1e-4,
            alpha_h: 5e-5,
            beta: 100.0,
            gamma: 100.0,
            lambda: 10.0,
            n_way: 25,
            n_shot: 5,
            n_query: 10,
            iterations: 8000,
            critic_steps: 5,
            pretrain_episodes: 12000,
            pn_hidden: 0,
            n_shot_test: 1800,
            m_shot: 5,
            seen_source: SeenSource::Synthetic,
            finetune: false,
            gen_hidden: vec![4096, 8192],
            enc_hidden: vec![8192, 4096],
            critic_hidden: vec![4096],
            linear_lr: 1e-3,
            linear_epochs: 25,
            linear_batch: 64,
            eval_chunk: 4096,
            pretrain: true,
        }
    }
}

/// Shipped configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("cub-zsl", include_str!("../configs/cub-zsl.conf")),
    ("awa2-zsl", include_str!("../configs/awa2-zsl.conf")),
    ("sun-zsl", include_str!("../configs/sun-zsl.conf")),
    ("cub-gzsl", include_str!("../configs/cub-gzsl.conf")),
    ("awa2-gzsl", include_str!("../configs/awa2-gzsl.conf")),
    ("sun-gzsl", include_str!("../configs/sun-gzsl.conf")),
    ("toy-zsl", include_str!("../configs/toy-zsl.conf")),
    ("toy-gzsl", include_str!("../configs/toy-gzsl.conf")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("`{key}`: bad layer width `{}`", w.trim()))),
        })
        .collect()
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest text that parses back to exactly `v`.
fn float_text(v: f64) -> String {
    format!("{v:?}")
}

impl Config {
    /// Configuration for `stage` from `text`, layered over the defaults.
    pub fn from_text(text: &str, origin: &str, stage: Stage) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text, origin, stage)?;
        Ok(cfg)
    }

    /// Applies the common keys of `text` and then those of `stage`'s section.
    pub fn apply_text(&mut self, text: &str, origin: &str, stage: Stage) -> Result<()> {
        let entries = kv::parse(text, origin)?;
        for e in &entries {
            if let Some(s) = &e.section {
                if ![Stage::Pretrain, Stage::Train, Stage::Eval].iter().any(|st| st.section() == s) {
                    return Err(Error::Config(format!("{origin}:{}: unknown section [{s}]", e.line)));
                }
            }
            // keys of other sections must still be well formed
            Config::default()
                .set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("{origin}:{}: {err}", e.line)))?;
        }
        for e in entries.iter().filter(|e| e.section.is_none()) {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("{origin}:{}: {err}", e.line)))?;
        }
        for e in entries.iter().filter(|e| e.section.as_deref() == Some(stage.section())) {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("{origin}:{}: {err}", e.line)))?;
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "backbone" => self.backbone = v.parse()?,
            "head" => self.head = v.parse()?,
            "seed" => self.seed = parse_num(key, v)?,
            "alpha_f" => self.alpha_f = parse_num(key, v)?,
            "alpha_h" => self.alpha_h = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "n_W" => self.n_way = parse_num(key, v)?,
            "n_S" => self.n_shot = parse_num(key, v)?,
            "n_Q" => self.n_query = parse_num(key, v)?,
            "N" => self.iterations = parse_num(key, v)?,
            "critic_steps" => self.critic_steps = parse_num(key, v)?,
            "N_h" => self.pretrain_episodes = parse_num(key, v)?,
            "n_h" => self.pn_hidden = parse_num(key, v)?,
            "n_S_test" => self.n_shot_test = parse_num(key, v)?,
            "m_S" => self.m_shot = parse_num(key, v)?,
            "seen_source" => self.seen_source = v.parse()?,
            "finetune" => self.finetune = parse_bool(key, v)?,
            "gen_hidden" => self.gen_hidden = parse_widths(key, v)?,
            "enc_hidden" => self.enc_hidden = parse_widths(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_widths(key, v)?,
            "linear_lr" => self.linear_lr = parse_num(key, v)?,
            "linear_epochs" => self.linear_epochs = parse_num(key, v)?,
            "linear_batch" => self.linear_batch = parse_num(key, v)?,
            "eval_chunk" => self.eval_chunk = parse_num(key, v)?,
            "pretrain" => self.pretrain = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// All effective settings, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("backbone", self.backbone.to_string()),
            ("head", self.head.to_string()),
            ("seed", self.seed.to_string()),
            ("alpha_f", float_text(self.alpha_f)),
            ("alpha_h", float_text(self.alpha_h)),
            ("beta", float_text(self.beta)),
            ("gamma", float_text(self.gamma)),
            ("lambda", float_text(self.lambda)),
            ("n_W", self.n_way.to_string()),
            ("n_S", self.n_shot.to_string()),
            ("n_Q", self.n_query.to_string()),
            ("N", self.iterations.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("N_h", self.pretrain_episodes.to_string()),
            ("n_h", self.pn_hidden.to_string()),
            ("n_S_test", self.n_shot_test.to_string()),
            ("m_S", self.m_shot.to_string()),
            ("seen_source", self.seen_source.to_string()),
            ("finetune", self.finetune.to_string()),
            ("gen_hidden", widths_text(&self.gen_hidden)),
            ("enc_hidden", widths_text(&self.enc_hidden)),
            ("critic_hidden", widths_text(&self.critic_hidden)),
            ("linear_lr", float_text(self.linear_lr)),
            ("linear_epochs", self.linear_epochs.to_string()),
            ("linear_batch", self.linear_batch.to_string()),
            ("eval_chunk", self.eval_chunk.to_string()),
            ("pretrain", self.pretrain.to_string()),
        ]
    }

    /// Flat `key = value` text that resolves back to this configuration.
    pub fn to_text(&self) -> String {
        kv::render(self.entries())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            generator_hidden: self.gen_hidden.clone(),
            encoder_hidden: self.enc_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_W", self.n_way),
            ("n_S", self.n_shot),
            ("n_Q", self.n_query),
            ("N", self.iterations),
            ("critic_steps", self.critic_steps),
            ("N_h", self.pretrain_episodes),
            ("n_S_test", self.n_shot_test),
            ("m_S", self.m_shot),
            ("linear_epochs", self.linear_epochs),
            ("linear_batch", self.linear_batch),
            ("eval_chunk", self.eval_chunk),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be at least 1")));
        }
        let rates = [("alpha_f", self.alpha_f), ("alpha_h", self.alpha_h), ("linear_lr", self.linear_lr)];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
        }
        let weights = [("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)];
        if let Some((k, v)) = weights.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("`{k}` must be non-negative, got {v}")));
        }
        if self.n_way < 2 {
            return Err(Error::Config("`n_W` must be at least 2 for a prototype softmax".into()));
        }
        Ok(())
    }
}
