//! `key = value` configuration files and `--key value` overrides.

use crate::UsageError;
use anyhow::{bail, Context, Result};
use lpmlab_core::seq2seq::ModelConfig;
use lpmlab_core::synth::{CorpusSizes, GeneratorParams, MAX_DURATION};
use lpmlab_core::trainer::{ExperimentConfig, SupervisedConfig};
use std::path::Path;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, found `{raw}`", n + 1);
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            bail!("line {}: duplicate key `{k}`", n + 1);
        }
        out.push((k, v));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_key_values(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Turns `--key value` (or `--key=value`) tokens into pairs. Dashes inside
/// keys are folded to underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(UsageError(format!("unexpected argument `{a}`")).into());
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| UsageError(format!("`--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// File settings first, command-line overrides last (command line wins).
pub fn merged(file: Option<&Path>, overrides: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = match file {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    pairs.extend(parse_overrides(overrides)?);
    Ok(pairs)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| anyhow::anyhow!("`{key}` expects a number, got `{value}`"))
}

/// Model shape knobs; returns false for keys it does not own.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "embed_dim" => cfg.embed_dim = num(key, value)?,
        "encoder_hidden" => cfg.encoder_hidden = num(key, value)?,
        "decoder_hidden" => cfg.decoder_hidden = num(key, value)?,
        "attention_dim" => cfg.attention_dim = num(key, value)?,
        "label_smoothing" => cfg.label_smoothing = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Settings of `gen-data`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub seed: u64,
    pub generator: GeneratorParams,
    pub sizes: CorpusSizes,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            seed: 0,
            generator: GeneratorParams::default(),
            sizes: CorpusSizes {
                paired: 500,
                unpaired_speech: 2000,
                unpaired_text: 20_000,
                dev: 300,
                test: 300,
            },
        }
    }
}

impl DataSettings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let g = &mut self.generator;
        match key {
            "seed" => self.seed = num(key, value)?,
            "content_tokens" => g.content_tokens = num(key, value)?,
            "max_len" => g.max_len = num(key, value)?,
            "obs_alphabet_size" => g.channel.obs_alphabet_size = num(key, value)?,
            "primary_mass" => g.channel.primary_mass = num(key, value)?,
            "partner_mass" => g.channel.partner_mass = num(key, value)?,
            "branching" => g.lm.branching = num(key, value)?,
            "branch_mass" => g.lm.branch_mass = num(key, value)?,
            "eos_prob" => g.lm.eos_prob = num(key, value)?,
            "start_eos_prob" => g.lm.start_eos_prob = num(key, value)?,
            "duration_jitter" => g.channel.duration_jitter = num(key, value)?,
            "durations" => {
                let d: Vec<f64> = value
                    .split_whitespace()
                    .map(|v| num(key, v))
                    .collect::<Result<_>>()?;
                g.channel.durations = d
                    .try_into()
                    .map_err(|_| anyhow::anyhow!("`durations` expects {MAX_DURATION} values"))?;
            }
            "paired" => self.sizes.paired = num(key, value)?,
            "unpaired_speech" => self.sizes.unpaired_speech = num(key, value)?,
            "unpaired_text" => self.sizes.unpaired_text = num(key, value)?,
            "dev" => self.sizes.dev = num(key, value)?,
            "test" => self.sizes.test = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        let d = &g.channel.durations;
        let s = &self.sizes;
        [
            ("seed", self.seed.to_string()),
            ("content_tokens", g.content_tokens.to_string()),
            ("max_len", g.max_len.to_string()),
            ("obs_alphabet_size", g.channel.obs_alphabet_size.to_string()),
            ("primary_mass", format!("{:?}", g.channel.primary_mass)),
            ("partner_mass", format!("{:?}", g.channel.partner_mass)),
            ("durations", format!("{:?} {:?} {:?}", d[0], d[1], d[2])),
            ("duration_jitter", format!("{:?}", g.channel.duration_jitter)),
            ("branching", g.lm.branching.to_string()),
            ("branch_mass", format!("{:?}", g.lm.branch_mass)),
            ("eos_prob", format!("{:?}", g.lm.eos_prob)),
            ("start_eos_prob", format!("{:?}", g.lm.start_eos_prob)),
            ("paired", s.paired.to_string()),
            ("unpaired_speech", s.unpaired_speech.to_string()),
            ("unpaired_text", s.unpaired_text.to_string()),
            ("dev", s.dev.to_string()),
            ("test", s.test.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Settings of `train-lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmSettings {
    pub order: usize,
    pub fraction: f64,
    pub add_k: Option<f64>,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings {
            order: 3,
            fraction: 1.0,
            add_k: None,
        }
    }
}

impl LmSettings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "order" | "lm_order" => self.order = num(key, value)?,
            "fraction" | "lm_fraction" => self.fraction = num(key, value)?,
            "add_k" => self.add_k = Some(num(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Applies every pair through `setters` in order; a key no setter owns is a
/// usage error.
pub fn apply(
    pairs: &[(String, String)],
    mut setter: impl FnMut(&str, &str) -> Result<bool>,
) -> Result<()> {
    for (k, v) in pairs {
        if !setter(k, v).with_context(|| format!("setting `{k}`"))? {
            return Err(UsageError(format!("unknown setting `{k}`")).into());
        }
    }
    Ok(())
}

/// Supervised-run settings: model shape plus optimization.
pub fn supervised_settings(
    pairs: &[(String, String)],
    model: &mut ModelConfig,
) -> Result<SupervisedConfig> {
    let mut sup = SupervisedConfig::default();
    apply(pairs, |k, v| Ok(set_model_key(model, k, v)? || sup.set(k, v)?))?;
    sup.validate()?;
    model.validate()?;
    Ok(sup)
}

pub fn experiment_settings(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply(pairs, |k, v| Ok(cfg.set(k, v)?))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical `key=value` listing for hashing.
pub fn canonical(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
