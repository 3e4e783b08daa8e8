//! Key-value run configuration. Every key has a default; a config file and
//! `--set` overrides replace values, and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use rescore_core::corpus::synthetic::SynthConfig;
use rescore_core::interpolate::default_grid;
use rescore_core::model::{ModelConfig, Variant};
use rescore_core::ngram::KatzConfig;
use rescore_core::parallel::derive_seed;
use rescore_core::pipeline::DESK_VOCAB_BUDGET;
use rescore_core::trainer::TrainConfig;

use crate::CliError;

/// Seed streams split off the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Synth,
    Init(Variant),
    Train(Variant),
}

impl Stream {
    pub fn name(self) -> String {
        match self {
            Stream::Synth => "synth".into(),
            Stream::Init(v) => format!("init.{}", v.name()),
            Stream::Train(v) => format!("train.{}", v.name()),
        }
    }

    fn index(self) -> u64 {
        let variant = |v: Variant| match v {
            Variant::Tra => 0,
            Variant::Tr => 1,
        };
        match self {
            Stream::Synth => 0,
            Stream::Init(v) => 10 + variant(v),
            Stream::Train(v) => 20 + variant(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn defaults() -> BTreeMap<String, String> {
    let s = SynthConfig::default();
    let m = ModelConfig::desk(Variant::Tra, 0);
    let t = TrainConfig::desk();
    let grid = default_grid();
    let mut d = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        d.insert(k.to_owned(), v);
    };
    put("seed", s.seed.to_string());
    put("synth.train", s.train.to_string());
    put("synth.dev", s.dev.to_string());
    put("synth.eval", s.eval.to_string());
    put("synth.in_domain_ratio", s.in_domain_ratio.to_string());
    put("synth.nbest_max", s.nbest_max.to_string());
    put("synth.p_sub", s.p_sub.to_string());
    put("synth.p_del", s.p_del.to_string());
    put("synth.p_ins", s.p_ins.to_string());
    put("synth.noise_scale", s.noise_scale.to_string());
    put("synth.firstpass_sentences", s.firstpass_sentences.to_string());
    put("synth.firstpass_in_domain_ratio", s.firstpass_in_domain_ratio.to_string());
    put("tokenizer.vocab_budget", DESK_VOCAB_BUDGET.to_string());
    put("model.enc_layers", m.enc_layers.to_string());
    put("model.dec_layers", m.dec_layers.to_string());
    put("model.heads", m.heads.to_string());
    put("model.d_model", m.d_model.to_string());
    put("model.ff_dim", m.ff_dim.to_string());
    put("model.max_len", m.max_len.to_string());
    put("model.dropout", m.dropout.to_string());
    put("model.rescore_norm_gain", m.rescore_norm_gain.to_string());
    put("train.max_steps", t.max_steps.to_string());
    put("train.eval_every", t.eval_every.to_string());
    put("train.batch_token_budget", t.batch_token_budget.to_string());
    put("train.warmup", t.warmup.to_string());
    put("train.patience", t.patience.to_string());
    put("train.lr_scale", t.lr_scale.to_string());
    put("train.clip_norm", t.clip_norm.to_string());
    put("train.ce_weight", t.ce_weight.to_string());
    // a wall-clock cap makes the step count depend on machine load
    put("train.max_seconds", "0".into());
    put("ngram.order", "4".into());
    put("tune.grid_min", grid[0].to_string());
    put("tune.grid_max", grid[grid.len() - 1].to_string());
    put("tune.grid_step", "0.1".into());
    d
}

fn parse_line(line: &str, source: &str, lineno: usize) -> Result<Option<(String, String)>, CliError> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("{source}:{lineno}: expected key = value, got {line:?}")))?;
    Ok(Some((k.trim().to_owned(), v.trim().to_owned())))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults() }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
            let source = path.display().to_string();
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) = parse_line(line, &source, i + 1)? {
                    cfg.set(&k, &v)?;
                }
            }
        }
        for (i, o) in overrides.iter().enumerate() {
            match parse_line(o, "--set", i + 1)? {
                Some((k, v)) => cfg.set(&k, &v)?,
                None => return Err(CliError::Input(format!("empty --set override {o:?}"))),
            }
        }
        if let Some(s) = seed {
            cfg.set("seed", &s.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_owned();
                Ok(())
            }
            None => Err(CliError::Input(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.values.get(key).ok_or_else(|| CliError::Internal(format!("missing default for {key}")))?;
        raw.parse().map_err(|e| CliError::Input(format!("config {key} = {raw:?}: {e}")))
    }

    /// Parses every section so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.synth()?;
        self.vocab_budget()?;
        self.model(Variant::Tra, 64)?.validate().map_err(|e| CliError::Input(e.to_string()))?;
        self.train(Variant::Tra)?.validate().map_err(|e| CliError::Input(e.to_string()))?;
        self.katz()?;
        self.grid()?;
        Ok(())
    }

    /// Sorted `key=value` lines; the digest is taken over this text.
    pub fn canonical_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn root_seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    /// The synthesizer takes the root seed itself; other stages derive one.
    pub fn seed(&self, stream: Stream) -> Result<u64, CliError> {
        let root = self.root_seed()?;
        Ok(match stream {
            Stream::Synth => root,
            other => derive_seed(root, other.index()),
        })
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let cfg = SynthConfig {
            train: self.get("synth.train")?,
            dev: self.get("synth.dev")?,
            eval: self.get("synth.eval")?,
            in_domain_ratio: self.get("synth.in_domain_ratio")?,
            nbest_max: self.get("synth.nbest_max")?,
            p_sub: self.get("synth.p_sub")?,
            p_del: self.get("synth.p_del")?,
            p_ins: self.get("synth.p_ins")?,
            noise_scale: self.get("synth.noise_scale")?,
            firstpass_sentences: self.get("synth.firstpass_sentences")?,
            firstpass_in_domain_ratio: self.get("synth.firstpass_in_domain_ratio")?,
            seed: self.seed(Stream::Synth)?,
        };
        if cfg.train == 0 || cfg.dev == 0 || cfg.eval == 0 {
            return Err(CliError::Input("synth.train, synth.dev and synth.eval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.in_domain_ratio) {
            return Err(CliError::Input("synth.in_domain_ratio must lie in [0, 1]".into()));
        }
        Ok(cfg)
    }

    pub fn vocab_budget(&self) -> Result<usize, CliError> {
        self.get("tokenizer.vocab_budget")
    }

    pub fn model(&self, variant: Variant, vocab_size: usize) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            enc_layers: self.get("model.enc_layers")?,
            dec_layers: self.get("model.dec_layers")?,
            heads: self.get("model.heads")?,
            d_model: self.get("model.d_model")?,
            ff_dim: self.get("model.ff_dim")?,
            max_len: self.get("model.max_len")?,
            nbest_max: self.get("synth.nbest_max")?,
            dropout: self.get("model.dropout")?,
            rescore_norm_gain: self.get("model.rescore_norm_gain")?,
            ..ModelConfig::desk(variant, vocab_size)
        })
    }

    pub fn train(&self, variant: Variant) -> Result<TrainConfig, CliError> {
        let secs: f64 = self.get("train.max_seconds")?;
        Ok(TrainConfig {
            max_steps: self.get("train.max_steps")?,
            eval_every: self.get("train.eval_every")?,
            batch_token_budget: self.get("train.batch_token_budget")?,
            warmup: self.get("train.warmup")?,
            patience: self.get("train.patience")?,
            seed: self.seed(Stream::Train(variant))?,
            lr_scale: self.get("train.lr_scale")?,
            clip_norm: self.get("train.clip_norm")?,
            ce_weight: self.get("train.ce_weight")?,
            max_seconds: (secs > 0.0).then_some(secs),
        })
    }

    pub fn katz(&self) -> Result<KatzConfig, CliError> {
        let order: usize = self.get("ngram.order")?;
        if order == 0 {
            return Err(CliError::Input("ngram.order must be at least 1".into()));
        }
        Ok(KatzConfig::with_order(order))
    }

    /// Threshold candidates from `grid_min` to `grid_max` inclusive.
    pub fn grid(&self) -> Result<Vec<f64>, CliError> {
        let lo: f64 = self.get("tune.grid_min")?;
        let hi: f64 = self.get("tune.grid_max")?;
        let step: f64 = self.get("tune.grid_step")?;
        if !step.is_finite() || step <= 0.0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(CliError::Input(format!("bad threshold grid {lo}..{hi} step {step}")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        if count > 100_000 {
            return Err(CliError::Input(format!("threshold grid has {count} points")));
        }
        // snap to 1e-9 so 0.1 steps print as written
        Ok((0..count).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
    }
}
