//! Building blocks shared by the subcommands and the acceptance harness.

use crate::config::{DataSettings, LmSettings};
use anyhow::{Context, Result};
use lpmlab_core::ngram::{train_lm, NGramLM, SmoothingParams};
use lpmlab_core::seq2seq::{Checkpoint, CheckpointTag, ModelConfig};
use lpmlab_core::synth::{sample_corpus, DatasetBundle, Generator};
use lpmlab_core::trainer::{
    train_semi, train_supervised_baseline, ExperimentConfig, InitModels, SemiOutcome,
    SupervisedConfig, SupervisedOutcome,
};
use lpmlab_core::{LanguageModel, Rng, Vocab};

/// Stream of the corpus sampler, kept apart from the generator's own streams.
const CORPUS_STREAM: u64 = 3;

pub struct Generated {
    pub generator: Generator,
    pub bundle: DatasetBundle,
    pub vocab: Vocab,
}

pub fn generate(settings: &DataSettings) -> Result<Generated> {
    let generator = Generator::build(&settings.generator, settings.seed)?;
    let bundle = sample_corpus(
        &generator.lm,
        &generator.channel,
        &settings.sizes,
        settings.generator.max_len,
        &Rng::new(settings.seed).derive(CORPUS_STREAM),
    )?;
    let vocab = generator.lm.vocab().clone();
    Ok(Generated {
        generator,
        bundle,
        vocab,
    })
}

pub fn train_prior(bundle: &DatasetBundle, vocab: &Vocab, settings: &LmSettings) -> Result<NGramLM> {
    let mut smoothing = SmoothingParams::default_for(settings.order);
    if let Some(k) = settings.add_k {
        smoothing.add_k = k;
    }
    Ok(train_lm(&bundle.unpaired_text, vocab, settings.order, &smoothing, settings.fraction)?)
}

/// The same corpus with the unpaired speech moved, transcripts included,
/// into the paired split. Used for the fully supervised reference model.
pub fn topline_bundle(bundle: &DatasetBundle) -> Result<DatasetBundle> {
    let mut paired = bundle.paired.clone();
    paired.extend(bundle.unpaired_with_gold());
    Ok(DatasetBundle::new(
        paired,
        Vec::new(),
        Vec::new(),
        bundle.unpaired_text.clone(),
        bundle.dev.clone(),
        bundle.test.clone(),
    )?)
}

pub fn default_model(vocab: &Vocab, obs_alphabet_size: usize) -> ModelConfig {
    ModelConfig::new(vocab.clone(), obs_alphabet_size)
}

pub fn supervised(model: &ModelConfig, config: &SupervisedConfig, bundle: &DatasetBundle) -> Result<SupervisedOutcome> {
    Ok(train_supervised_baseline(model, config, bundle)?)
}

/// Picks a tagged checkpoint, naming the missing tag on failure.
pub fn tagged<'a>(checkpoints: &'a [Checkpoint], tag: CheckpointTag) -> Result<&'a Checkpoint> {
    checkpoints
        .iter()
        .find(|c| c.tag == Some(tag))
        .with_context(|| format!("trainer: no checkpoint tagged {} is available", tag.as_str()))
}

/// Semi-supervised run initialized from the tagged checkpoints the
/// configuration asks for.
pub fn semi(
    config: &ExperimentConfig,
    bundle: &DatasetBundle,
    lm: &NGramLM,
    checkpoints: &[Checkpoint],
) -> Result<SemiOutcome> {
    let online = tagged(checkpoints, config.init_q)?;
    let proposal = tagged(checkpoints, config.init_r)?;
    Ok(train_semi(
        config,
        bundle,
        lm,
        InitModels {
            online: &online.params,
            proposal: &proposal.params,
        },
    )?)
}
