//! Supervised baseline training with checkpoint tagging, and the
//! semi-supervised loop alternating paired and unpaired batches.

use crate::decode::{
    beam_search, default_max_steps, estimate_ref_length, greedy_decode, Fusion, LengthFilter,
    RefLengthMode,
};
use crate::error::{Error, Result};
use crate::eval::{corpus_error_counts, greedy_error_counts, ErrorCounts};
use crate::ngram::{token_perplexity, NGramLM};
use crate::objectives::{kd_uniform_targets, local_prior, pseudo_label_target, WeightedTargets};
use crate::rng::Rng;
use crate::seq2seq::{
    loss_and_gradient, snapshot, Checkpoint, CheckpointTag, LossTerm, ModelConfig, ParamVector,
};
use crate::synth::DatasetBundle;
use crate::types::Utterance;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    OnPolicy,
    OffNever,
    OffAlways,
    OffBetter,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "on_policy" => Some(Strategy::OnPolicy),
            "off_never" => Some(Strategy::OffNever),
            "off_always" => Some(Strategy::OffAlways),
            "off_better" => Some(Strategy::OffBetter),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::OnPolicy => "on_policy",
            Strategy::OffNever => "off_never",
            Strategy::OffAlways => "off_always",
            Strategy::OffBetter => "off_better",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Lpm,
    Kd,
    Pl,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lpm" => Some(Objective::Lpm),
            "kd" => Some(Objective::Kd),
            "pl" => Some(Objective::Pl),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Lpm => "lpm",
            Objective::Kd => "kd",
            Objective::Pl => "pl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Paired,
    Unpaired,
}

/// First `mix_l` steps of each cycle are paired, the next `mix_u` unpaired.
/// `step` is zero-based.
pub fn schedule_batches(mix_l: usize, mix_u: usize, step: u64) -> Result<Phase> {
    let cycle = (mix_l + mix_u) as u64;
    if cycle == 0 {
        return Err(Error::InvalidSchedule);
    }
    Ok(if step % cycle < mix_l as u64 {
        Phase::Paired
    } else {
        Phase::Unpaired
    })
}

/// Whether the proposal model should take a snapshot of the online model at
/// `step` (one-based). Under `OnPolicy` the two are the same model.
pub fn proposal_update_decision(
    strategy: Strategy,
    step: u64,
    period: u64,
    dev_cer_online: f64,
    dev_cer_proposal: f64,
) -> bool {
    let due = period > 0 && step % period == 0;
    match strategy {
        Strategy::OnPolicy => true,
        Strategy::OffNever => false,
        Strategy::OffAlways => due,
        Strategy::OffBetter => due && dev_cer_online < dev_cer_proposal,
    }
}

/// `lr / factor^⌊step / period⌋`, with `step` zero-based.
pub fn learning_rate(lr: f64, factor: f64, period: u64, step: u64) -> f64 {
    if period == 0 {
        return lr;
    }
    lr / libm::pow(factor, (step / period) as f64)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidConfig(format!("`{key}` expects a number, got `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .trim()
        .parse::<u64>()
        .map_err(|_| Error::InvalidConfig(format!("`{key}` expects an integer, got `{value}`")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    parse_u64(key, value).map(|v| v as usize)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}` expects true/false, got `{value}`"))),
    }
}

fn parse_tag(key: &str, value: &str) -> Result<CheckpointTag> {
    CheckpointTag::parse(value.trim())
        .ok_or_else(|| Error::InvalidConfig(format!("`{key}` expects A, B or C, got `{value}`")))
}

fn parse_mix(value: &str) -> Result<(usize, usize)> {
    let (l, u) = value
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("`mix` expects l:u, got `{value}`")))?;
    Ok((parse_usize("mix", l)?, parse_usize("mix", u)?))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Optimization knobs shared by both training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// The learning rate is divided by this factor every `lr_decay_period` steps.
    pub lr_decay_factor: f64,
    pub lr_decay_period: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-2,
            lr_decay_factor: 2.0,
            lr_decay_period: 8_000,
            batch_size: 8,
            total_steps: 20_000,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(self.lr_decay_factor >= 1.0) || self.lr_decay_period == 0 {
            return Err(Error::InvalidConfig(
                "lr_decay_factor must be >= 1 and lr_decay_period >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_f64(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_f64(key, value)?,
            "lr_decay_period" => self.lr_decay_period = parse_u64(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "total_steps" => self.total_steps = parse_u64(key, value)?,
            "grad_clip" => self.grad_clip = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), fmt_f64(self.lr)),
            ("lr_decay_factor".into(), fmt_f64(self.lr_decay_factor)),
            ("lr_decay_period".into(), self.lr_decay_period.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("grad_clip".into(), fmt_f64(self.grad_clip)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    fn lr_at(&self, step: u64) -> f64 {
        learning_rate(self.lr, self.lr_decay_factor, self.lr_decay_period, step)
    }
}

/// Knobs of the supervised baseline run that produces the A/B/C checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub optim: OptimConfig,
    pub eval_period: u64,
    /// Dev CER at or below which the B checkpoint is taken (first crossing).
    pub threshold_b: f64,
    /// Dev CER at or below which the C checkpoint is taken (first crossing).
    pub threshold_c: f64,
    pub dev_subset: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            optim: OptimConfig::default(),
            eval_period: 500,
            threshold_b: 0.5,
            threshold_c: 0.7,
            dev_subset: 300,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.eval_period == 0 {
            return Err(Error::InvalidConfig("eval_period must be at least 1".into()));
        }
        if !(self.threshold_b <= self.threshold_c) {
            return Err(Error::InvalidConfig("threshold_b must not exceed threshold_c".into()));
        }
        Ok(())
    }

    /// Sets one `key = value` knob; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.optim.set(key, value)? {
            return Ok(true);
        }
        match key {
            "eval_period" => self.eval_period = parse_u64(key, value)?,
            "threshold_b" => self.threshold_b = parse_f64(key, value)?,
            "threshold_c" => self.threshold_c = parse_f64(key, value)?,
            "dev_subset" => self.dev_subset = parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.optim.pairs();
        out.extend([
            ("eval_period".into(), self.eval_period.to_string()),
            ("threshold_b".into(), fmt_f64(self.threshold_b)),
            ("threshold_c".into(), fmt_f64(self.threshold_c)),
            ("dev_subset".into(), self.dev_subset.to_string()),
        ]);
        out
    }
}

/// Every knob of a semi-supervised run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: Objective,
    pub k: usize,
    pub alpha: f64,
    pub mix_l: usize,
    pub mix_u: usize,
    /// Proposal check period in steps.
    pub period: u64,
    pub strategy: Strategy,
    pub filter: LengthFilter,
    pub ref_len_mode: RefLengthMode,
    pub init_q: CheckpointTag,
    pub init_r: CheckpointTag,
    pub optim: OptimConfig,
    pub lm_order: usize,
    pub lm_fraction: f64,
    /// Shallow-fusion weight for pseudo-labels, fused reference lengths and
    /// fused distillation teachers.
    pub fusion_weight: f64,
    /// Distillation teacher decodes with the prior fused in.
    pub kd_fusion: bool,
    pub dev_subset: usize,
    pub label_sample: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            objective: Objective::Lpm,
            k: 4,
            alpha: 0.2,
            mix_l: 1,
            mix_u: 4,
            period: 1000,
            strategy: Strategy::OffBetter,
            filter: LengthFilter::default(),
            ref_len_mode: RefLengthMode::Greedy,
            init_q: CheckpointTag::C,
            init_r: CheckpointTag::A,
            optim: OptimConfig::default(),
            lm_order: 3,
            lm_fraction: 1.0,
            fusion_weight: 0.5,
            kd_fusion: false,
            dev_subset: 300,
            label_sample: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be a finite non-negative number".into()));
        }
        if self.mix_l + self.mix_u == 0 {
            return Err(Error::InvalidSchedule);
        }
        if self.period == 0 {
            return Err(Error::InvalidConfig("period must be at least 1".into()));
        }
        LengthFilter::new(self.filter.r_lb, self.filter.r_ub)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.lm_fraction > 0.0 && self.lm_fraction <= 1.0) {
            return Err(Error::InvalidConfig("lm_fraction must be in (0, 1]".into()));
        }
        if self.lm_order == 0 {
            return Err(Error::InvalidConfig("lm_order must be at least 1".into()));
        }
        if !self.fusion_weight.is_finite() {
            return Err(Error::InvalidConfig("fusion_weight must be finite".into()));
        }
        if self.dev_subset == 0 {
            return Err(Error::InvalidConfig("dev_subset must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets one `key = value` knob; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.optim.set(key, value)? {
            return Ok(true);
        }
        let bad = |what: &str| Error::InvalidConfig(format!("`{key}` expects {what}, got `{value}`"));
        match key {
            "objective" => {
                self.objective = Objective::parse(value.trim()).ok_or_else(|| bad("lpm|kd|pl"))?
            }
            "k" => self.k = parse_usize(key, value)?,
            "alpha" => self.alpha = parse_f64(key, value)?,
            "mix" => (self.mix_l, self.mix_u) = parse_mix(value.trim())?,
            "period" | "T" => self.period = parse_u64(key, value)?,
            "strategy" => {
                self.strategy = Strategy::parse(value.trim())
                    .ok_or_else(|| bad("on_policy|off_never|off_always|off_better"))?
            }
            "r_lb" => self.filter.r_lb = parse_f64(key, value)?,
            "r_ub" => self.filter.r_ub = parse_f64(key, value)?,
            "ref_len_mode" => {
                self.ref_len_mode =
                    RefLengthMode::parse(value.trim()).ok_or_else(|| bad("oracle|greedy|fused"))?
            }
            "init_q" => self.init_q = parse_tag(key, value)?,
            "init_r" => self.init_r = parse_tag(key, value)?,
            "lm_order" => self.lm_order = parse_usize(key, value)?,
            "lm_fraction" => self.lm_fraction = parse_f64(key, value)?,
            "fusion_weight" | "lambda" => self.fusion_weight = parse_f64(key, value)?,
            "kd_fusion" => self.kd_fusion = parse_bool(key, value)?,
            "dev_subset" => self.dev_subset = parse_usize(key, value)?,
            "label_sample" => self.label_sample = parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `(key, value)` listing; the basis of run hashes.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("objective".into(), self.objective.as_str().into()),
            ("k".into(), self.k.to_string()),
            ("alpha".into(), fmt_f64(self.alpha)),
            ("mix".into(), format!("{}:{}", self.mix_l, self.mix_u)),
            ("period".into(), self.period.to_string()),
            ("strategy".into(), self.strategy.as_str().into()),
            ("r_lb".into(), fmt_f64(self.filter.r_lb)),
            ("r_ub".into(), fmt_f64(self.filter.r_ub)),
            ("ref_len_mode".into(), self.ref_len_mode.as_str().into()),
            ("init_q".into(), self.init_q.as_str().into()),
            ("init_r".into(), self.init_r.as_str().into()),
            ("lm_order".into(), self.lm_order.to_string()),
            ("lm_fraction".into(), fmt_f64(self.lm_fraction)),
            ("fusion_weight".into(), fmt_f64(self.fusion_weight)),
            ("kd_fusion".into(), self.kd_fusion.to_string()),
            ("dev_subset".into(), self.dev_subset.to_string()),
            ("label_sample".into(), self.label_sample.to_string()),
        ];
        out.extend(self.optim.pairs());
        out
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: &'static str,
    pub dev_wer: f64,
    pub dev_cer: f64,
    /// Mean training loss over the steps since the previous row.
    pub loss: f64,
    /// Unpaired utterances skipped so far because no hypothesis survived.
    pub skipped: u64,
    pub proposal_updates: u64,
    pub label_quality_wer: Option<f64>,
    pub hyp_ppl: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "step,phase,dev_wer,dev_cer,loss,skipped,proposal_updates,label_quality_wer,hyp_ppl";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{}",
            self.step,
            self.phase,
            self.dev_wer,
            self.dev_cer,
            self.loss,
            self.skipped,
            self.proposal_updates,
            opt(self.label_quality_wer),
            opt(self.hyp_ppl),
        )
    }
}

/// Header line plus one line per row, newline-terminated.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Epoch-wise shuffled index stream.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCursor {
    fn new(n: usize, rng: Rng) -> Self {
        let mut c = BatchCursor {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `n` distinct indices out of `0..len`, chosen by `rng`, in ascending order.
pub fn sample_indices(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}

/// Greedy corpus error rate on `utts` (gold required).
pub fn greedy_error_rate(params: &ParamVector, utts: &[Utterance]) -> Result<f64> {
    Ok(greedy_error_counts(params, utts, None)?.rate())
}

/// Greedy WER of the proposal model on the sample of unpaired speech whose
/// gold is sealed from training.
pub fn track_label_quality(proposal: &ParamVector, sample: &[Utterance]) -> Result<f64> {
    greedy_error_rate(proposal, sample)
}

/// Dev WER on the full dev set and token perplexity of the same greedy
/// hypotheses (when a prior is given).
fn dev_report(
    params: &ParamVector,
    dev: &[Utterance],
    lm: Option<&NGramLM>,
) -> Result<(ErrorCounts, Option<f64>)> {
    let mut hyps = Vec::with_capacity(dev.len());
    for x in dev {
        hyps.push(greedy_decode(params, x, default_max_steps(x))?.tokens);
    }
    let golds = dev
        .iter()
        .map(|u| u.gold.as_ref().ok_or_else(|| Error::MissingGold(u.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let counts = corpus_error_counts(golds.iter().zip(&hyps).map(|(g, h)| (g.content(), h.content())))?;
    Ok((counts, lm.map(|lm| token_perplexity(lm, &hyps))))
}

fn clip_gradient(grad: &mut ParamVector, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grad.l2_norm();
        if norm > max_norm {
            grad.scale(max_norm / norm);
        }
    }
}

fn batch_ids(utts: &[&Utterance]) -> String {
    utts.iter().map(|u| u.id.as_str()).collect::<Vec<_>>().join(" ")
}

/// Applies one SGD step for `terms`; returns the loss value.
fn apply_terms(
    params: &mut ParamVector,
    terms: &[LossTerm],
    lr: f64,
    clip: f64,
    step: u64,
    batch: &[&Utterance],
) -> Result<f64> {
    let (loss, mut grad) = loss_and_gradient(params, terms).map_err(|e| match e {
        Error::NonFiniteGradient { .. } | Error::NonFiniteActivation { .. } => Error::NonFiniteLoss {
            step: step as usize,
            batch: batch_ids(batch),
        },
        other => other,
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            batch: batch_ids(batch),
        });
    }
    clip_gradient(&mut grad, clip);
    params.sgd_update(&grad, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    /// Tagged checkpoints in the order C, B, A (missing tags omitted).
    pub checkpoints: Vec<Checkpoint>,
    pub final_params: ParamVector,
    pub metrics: Vec<MetricsRow>,
    /// Per-step training loss.
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SupervisedOutcome {
    pub fn checkpoint(&self, tag: CheckpointTag) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.tag == Some(tag))
    }
}

/// Supervised training on the paired split. Every `eval_period` steps the
/// dev-subset CER is measured; C and B are the first evaluations at or below
/// their thresholds and A is the best evaluation overall.
pub fn train_supervised_baseline(
    model: &ModelConfig,
    config: &SupervisedConfig,
    data: &DatasetBundle,
) -> Result<SupervisedOutcome> {
    config.validate()?;
    if data.paired.is_empty() {
        return Err(Error::InvalidConfig("paired split is empty".into()));
    }
    let root = Rng::new(config.optim.seed);
    let mut params = ParamVector::init(model, &mut root.derive(20))?;
    let mut cursor = BatchCursor::new(data.paired.len(), root.derive(21));
    let subset_idx = sample_indices(data.dev.len(), config.dev_subset, &mut root.derive(22));
    let dev_subset: Vec<Utterance> = subset_idx.iter().map(|&i| data.dev[i].clone()).collect();

    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(config.optim.total_steps as usize);
    let mut warnings = Vec::new();
    let mut tag_c: Option<Checkpoint> = None;
    let mut tag_b: Option<Checkpoint> = None;
    let mut best: Option<Checkpoint> = None;
    let mut since = (0.0, 0u64);

    let mut evaluate = |params: &ParamVector, step: u64, since: &mut (f64, u64)| -> Result<()> {
        let cer = greedy_error_rate(params, &dev_subset)?;
        let (full, _) = dev_report(params, &data.dev, None)?;
        metrics.push(MetricsRow {
            step,
            phase: "sup",
            dev_wer: full.rate(),
            dev_cer: cer,
            loss: if since.1 == 0 { 0.0 } else { since.0 / since.1 as f64 },
            skipped: 0,
            proposal_updates: 0,
            label_quality_wer: None,
            hyp_ppl: None,
        });
        *since = (0.0, 0);
        if step == 0 {
            return Ok(());
        }
        if tag_c.is_none() && cer <= config.threshold_c {
            tag_c = Some(Checkpoint::new(params.clone(), step, cer, Some(CheckpointTag::C)));
        }
        if tag_b.is_none() && cer <= config.threshold_b {
            tag_b = Some(Checkpoint::new(params.clone(), step, cer, Some(CheckpointTag::B)));
        }
        if best.as_ref().map_or(true, |b| cer < b.dev_cer) {
            best = Some(Checkpoint::new(params.clone(), step, cer, Some(CheckpointTag::A)));
        }
        Ok(())
    };

    evaluate(&params, 0, &mut since)?;
    for step in 1..=config.optim.total_steps {
        let idx = cursor.next_batch(config.optim.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &data.paired[i]).collect();
        let w = 1.0 / batch.len() as f64;
        let terms = batch
            .iter()
            .map(|x| {
                let y = x.gold.as_ref().ok_or_else(|| Error::MissingGold(x.id.clone()))?;
                Ok(LossTerm { x, y, weight: w })
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = config.optim.lr_at(step - 1);
        let loss = apply_terms(&mut params, &terms, lr, config.optim.grad_clip, step, &batch)?;
        losses.push(loss);
        since.0 += loss;
        since.1 += 1;
        if step % config.eval_period == 0 {
            evaluate(&params, step, &mut since)?;
        }
    }
    if config.optim.total_steps % config.eval_period != 0 {
        evaluate(&params, config.optim.total_steps, &mut since)?;
    }

    let mut checkpoints = Vec::new();
    for (tag, ckpt) in [(CheckpointTag::C, tag_c), (CheckpointTag::B, tag_b), (CheckpointTag::A, best)] {
        match ckpt {
            Some(c) => checkpoints.push(c),
            None => warnings.push(format!(
                "trainer: dev CER never reached the threshold for checkpoint {}",
                tag.as_str()
            )),
        }
    }
    Ok(SupervisedOutcome {
        checkpoints,
        final_params: params,
        metrics,
        losses,
        warnings,
    })
}

/// Models the semi-supervised run starts from.
#[derive(Debug, Clone, Copy)]
pub struct InitModels<'a> {
    pub online: &'a ParamVector,
    pub proposal: &'a ParamVector,
}

/// One accepted proposal snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalEvent {
    pub step: u64,
    pub dev_cer: f64,
}

#[derive(Debug, Clone)]
pub struct SemiOutcome {
    pub final_checkpoint: Checkpoint,
    /// The proposal model at the end of the run (the online model under
    /// `OnPolicy`).
    pub final_proposal: ParamVector,
    pub metrics: Vec<MetricsRow>,
    /// Per-step training loss (unpaired steps already scaled by `alpha`).
    pub losses: Vec<(Phase, f64)>,
    /// Dev-subset CER of the initial proposal followed by every accepted
    /// snapshot.
    pub proposal_history: Vec<ProposalEvent>,
    /// Reference lengths fixed before training, in unpaired-split order.
    pub ref_lens: Vec<usize>,
    pub skipped: u64,
}

/// Training state of the semi-supervised loop.
pub struct TrainState {
    pub online: ParamVector,
    /// `None` under `OnPolicy`: the proposal is the online model itself.
    pub proposal: Option<ParamVector>,
    pub step: u64,
    pub best_dev_cer_of_proposal: f64,
    pub proposal_updates: u64,
}

impl TrainState {
    pub fn proposal(&self) -> &ParamVector {
        self.proposal.as_ref().unwrap_or(&self.online)
    }
}

/// Semi-supervised training: paired steps minimize supervised cross-entropy,
/// unpaired steps minimize `alpha/n` times the summed objective over targets
/// built from the proposal model's beam.
pub fn train_semi(
    config: &ExperimentConfig,
    data: &DatasetBundle,
    lm: &NGramLM,
    init: InitModels,
) -> Result<SemiOutcome> {
    config.validate()?;
    if init.online.config() != init.proposal.config() {
        return Err(Error::InvalidConfig("online and proposal models differ in shape".into()));
    }
    if config.mix_l > 0 && data.paired.is_empty() {
        return Err(Error::InvalidConfig("paired split is empty".into()));
    }
    if config.mix_u > 0 && data.unpaired_speech.is_empty() {
        return Err(Error::InvalidConfig("unpaired speech split is empty".into()));
    }
    let root = Rng::new(config.optim.seed);
    let mut paired_cursor = BatchCursor::new(data.paired.len(), root.derive(30));
    let mut unpaired_cursor = BatchCursor::new(data.unpaired_speech.len(), root.derive(31));
    let subset_idx = sample_indices(data.dev.len(), config.dev_subset, &mut root.derive(32));
    let dev_subset: Vec<Utterance> = subset_idx.iter().map(|&i| data.dev[i].clone()).collect();
    let with_gold = data.unpaired_with_gold();
    let label_idx = sample_indices(with_gold.len(), config.label_sample, &mut root.derive(33));
    let label_sample: Vec<Utterance> = label_idx.iter().map(|&i| with_gold[i].clone()).collect();
    let fusion = Fusion {
        lm,
        weight: config.fusion_weight,
    };

    // Reference lengths come from the initial proposal, once.
    let mut ref_lens = Vec::new();
    if config.objective == Objective::Lpm {
        ref_lens.reserve(with_gold.len());
        for x in &with_gold {
            ref_lens.push(estimate_ref_length(
                init.proposal,
                x,
                config.ref_len_mode,
                Some(fusion),
                default_max_steps(x),
            )?);
        }
    }
    // Pseudo-labels come from the fixed initial teacher, once.
    let mut pseudo: Vec<WeightedTargets> = Vec::new();
    if config.objective == Objective::Pl {
        for x in &data.unpaired_speech {
            pseudo.push(pseudo_label_target(
                init.proposal,
                lm,
                config.fusion_weight,
                x,
                config.k,
                default_max_steps(x),
            )?);
        }
    }

    let mut state = TrainState {
        online: init.online.clone(),
        proposal: match config.strategy {
            Strategy::OnPolicy => None,
            _ => Some(snapshot(init.proposal)),
        },
        step: 0,
        best_dev_cer_of_proposal: greedy_error_rate(init.proposal, &dev_subset)?,
        proposal_updates: 0,
    };
    let mut history = vec![ProposalEvent {
        step: 0,
        dev_cer: state.best_dev_cer_of_proposal,
    }];
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(config.optim.total_steps as usize);
    let mut skipped = 0u64;
    let mut since = (0.0, 0u64);

    let report = |state: &TrainState, cer: f64, phase: &'static str, since: &mut (f64, u64), skipped: u64| -> Result<MetricsRow> {
        let (full, ppl) = dev_report(&state.online, &data.dev, Some(lm))?;
        let row = MetricsRow {
            step: state.step,
            phase,
            dev_wer: full.rate(),
            dev_cer: cer,
            loss: if since.1 == 0 { 0.0 } else { since.0 / since.1 as f64 },
            skipped,
            proposal_updates: state.proposal_updates,
            label_quality_wer: Some(track_label_quality(state.proposal(), &label_sample)?),
            hyp_ppl: ppl,
        };
        *since = (0.0, 0);
        Ok(row)
    };

    let cer0 = greedy_error_rate(&state.online, &dev_subset)?;
    metrics.push(report(&state, cer0, "init", &mut since, skipped)?);

    let scale = config.alpha / config.optim.batch_size as f64;
    for step in 1..=config.optim.total_steps {
        state.step = step;
        let lr = config.optim.lr_at(step - 1);
        let phase = schedule_batches(config.mix_l, config.mix_u, step - 1)?;
        let loss = match phase {
            Phase::Paired => {
                let idx = paired_cursor.next_batch(config.optim.batch_size);
                let batch: Vec<&Utterance> = idx.iter().map(|&i| &data.paired[i]).collect();
                let w = 1.0 / batch.len() as f64;
                let terms = batch
                    .iter()
                    .map(|x| {
                        let y = x.gold.as_ref().ok_or_else(|| Error::MissingGold(x.id.clone()))?;
                        Ok(LossTerm { x, y, weight: w })
                    })
                    .collect::<Result<Vec<_>>>()?;
                apply_terms(&mut state.online, &terms, lr, config.optim.grad_clip, step, &batch)?
            }
            Phase::Unpaired => {
                let idx = unpaired_cursor.next_batch(config.optim.batch_size);
                let batch: Vec<&Utterance> = idx.iter().map(|&i| &data.unpaired_speech[i]).collect();
                let mut targets: Vec<(usize, WeightedTargets)> = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let x = &data.unpaired_speech[i];
                    let steps = default_max_steps(x);
                    let t = match config.objective {
                        Objective::Lpm => {
                            let beam = beam_search(state.proposal(), x, config.k, steps, None)?;
                            local_prior(&beam, lm, ref_lens[i], &config.filter)?
                        }
                        Objective::Kd => {
                            let f = config.kd_fusion.then_some(fusion);
                            let beam = beam_search(state.proposal(), x, config.k, steps, f)?;
                            kd_uniform_targets(&beam, config.k)?
                        }
                        Objective::Pl => pseudo[i].clone(),
                    };
                    if t.is_empty() {
                        skipped += 1;
                    }
                    targets.push((i, t));
                }
                let terms: Vec<LossTerm> = targets
                    .iter()
                    .flat_map(|(i, t)| t.loss_terms(&data.unpaired_speech[*i], scale))
                    .collect();
                if terms.is_empty() {
                    0.0
                } else {
                    apply_terms(&mut state.online, &terms, lr, config.optim.grad_clip, step, &batch)?
                }
            }
        };
        losses.push((phase, loss));
        since.0 += loss;
        since.1 += 1;

        if step % config.period == 0 {
            let cer = greedy_error_rate(&state.online, &dev_subset)?;
            if config.strategy != Strategy::OnPolicy
                && proposal_update_decision(
                    config.strategy,
                    step,
                    config.period,
                    cer,
                    state.best_dev_cer_of_proposal,
                )
            {
                state.proposal = Some(snapshot(&state.online));
                state.best_dev_cer_of_proposal = cer;
                state.proposal_updates += 1;
                history.push(ProposalEvent { step, dev_cer: cer });
            }
            metrics.push(report(&state, cer, "eval", &mut since, skipped)?);
        }
    }
    if config.optim.total_steps % config.period != 0 {
        let cer = greedy_error_rate(&state.online, &dev_subset)?;
        metrics.push(report(&state, cer, "final", &mut since, skipped)?);
    }

    let final_cer = metrics.last().map_or(f64::NAN, |r| r.dev_cer);
    let final_proposal = state.proposal().clone();
    Ok(SemiOutcome {
        final_checkpoint: Checkpoint::new(state.online, state.step, final_cer, None),
        final_proposal,
        metrics,
        losses,
        proposal_history: history,
        ref_lens,
        skipped,
    })
}
