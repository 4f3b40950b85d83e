//! Synthetic noisy-channel corpus: text from a bigram generator, "speech" from
//! a left-to-right duration/emission channel, plus the brute-force posterior
//! obtained by enumerating every bounded-length transcript.

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::math::{log_sum_exp, normalize_log_weights};
use crate::rng::Rng;
use crate::types::{TokenId, TokenSeq, Utterance, Vocab};
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Number of distinct token durations the channel supports (1, 2 or 3 frames).
pub const MAX_DURATION: usize = 3;

const ROW_TOL: f64 = 1e-9;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidCorpusSpec(format!("{what}: probability outside [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidCorpusSpec(format!("{what}: row sums to {total}")));
    }
    Ok(())
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        libm::log(p)
    } else {
        f64::NEG_INFINITY
    }
}

/// Shape of a randomly drawn bigram generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LmShape {
    /// Preferred successors per state.
    pub branching: usize,
    /// Probability mass shared by the preferred successors.
    pub branch_mass: f64,
    /// EOS probability after a content token.
    pub eos_prob: f64,
    /// EOS probability at sentence start (empty sentence).
    pub start_eos_prob: f64,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape {
            branching: 3,
            branch_mass: 0.92,
            eos_prob: 0.13,
            start_eos_prob: 0.01,
        }
    }
}

/// The generating bigram language model. Row `prev` holds `p(next | prev)`;
/// the EOS row doubles as the sentence-start state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueLM {
    vocab: Vocab,
    probs: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
}

impl TrueLM {
    pub fn from_probs(vocab: Vocab, probs: Vec<Vec<f64>>) -> Result<Self> {
        let v = vocab.size();
        if probs.len() != v || probs.iter().any(|r| r.len() != v) {
            return Err(Error::InvalidCorpusSpec(format!("bigram table must be {v}x{v}")));
        }
        let eos = vocab.eos_id() as usize;
        for (i, row) in probs.iter().enumerate() {
            check_row(row, "bigram row")?;
            if row[eos] <= 0.0 {
                return Err(Error::InvalidCorpusSpec(format!(
                    "bigram row {i} never emits EOS, so sentences may not terminate"
                )));
            }
        }
        let log_probs = probs.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect();
        Ok(TrueLM {
            vocab,
            probs,
            log_probs,
        })
    }

    pub fn random(vocab: Vocab, shape: &LmShape, rng: &mut Rng) -> Result<Self> {
        let v = vocab.size();
        let eos = vocab.eos_id() as usize;
        let content: Vec<usize> = vocab.content_ids().map(|t| t as usize).collect();
        if shape.branching == 0 || shape.branching > content.len() {
            return Err(Error::InvalidCorpusSpec("branching must be in 1..=content tokens".into()));
        }
        let mut probs = Vec::with_capacity(v);
        for prev in 0..v {
            let eos_p = if prev == eos { shape.start_eos_prob } else { shape.eos_prob };
            let mut row = vec![0.0; v];
            row[eos] = eos_p;
            let rest = 1.0 - eos_p;
            let flat = rest * (1.0 - shape.branch_mass) / content.len() as f64;
            for &t in &content {
                row[t] = flat;
            }
            let mut pool = content.clone();
            rng.shuffle(&mut pool);
            let raw: Vec<f64> = (0..shape.branching).map(|_| rng.uniform(0.5, 1.5)).collect();
            let raw_total: f64 = raw.iter().sum();
            for (&t, w) in pool.iter().zip(&raw) {
                row[t] += rest * shape.branch_mass * w / raw_total;
            }
            // Absorb rounding so the row sums to one.
            let total: f64 = row.iter().sum();
            row[eos] += 1.0 - total;
            probs.push(row);
        }
        TrueLM::from_probs(vocab, probs)
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Samples a sentence, rejecting it when it runs past `max_len` content
    /// tokens. Returns the sentence with the log-probability accumulated
    /// while drawing it.
    pub fn sample(&self, max_len: usize, rng: &mut Rng) -> Option<(TokenSeq, f64)> {
        let eos = self.vocab.eos_id();
        let mut ids = Vec::new();
        let mut prev = eos as usize;
        let mut logp = 0.0;
        loop {
            let next = rng.categorical(&self.probs[prev]);
            logp += self.log_probs[prev][next];
            ids.push(next as TokenId);
            if next as TokenId == eos {
                return Some((TokenSeq::from_ids_unchecked(ids), logp));
            }
            if ids.len() > max_len {
                return None;
            }
            prev = next;
        }
    }
}

impl LanguageModel for TrueLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn log_prob_next(&self, context: &[TokenId], next: TokenId) -> f64 {
        let prev = context.last().copied().unwrap_or(self.vocab.eos_id());
        self.log_probs[prev as usize][next as usize]
    }

    fn next_log_probs(&self, context: &[TokenId]) -> Vec<f64> {
        let prev = context.last().copied().unwrap_or(self.vocab.eos_id());
        self.log_probs[prev as usize].clone()
    }
}

/// Shape of a randomly drawn channel. Each token owns one primary symbol and
/// is paired with a confusable partner token whose primary symbol it also
/// emits often.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelShape {
    pub obs_alphabet_size: usize,
    pub primary_mass: f64,
    pub partner_mass: f64,
    /// Mean duration distribution over 1, 2, 3 frames.
    pub durations: [f64; MAX_DURATION],
    /// Per-token jitter added to the duration distribution before renormalizing.
    pub duration_jitter: f64,
}

impl Default for ChannelShape {
    fn default() -> Self {
        ChannelShape {
            obs_alphabet_size: 40,
            primary_mass: 0.55,
            partner_mass: 0.25,
            durations: [0.3, 0.4, 0.3],
            duration_jitter: 0.1,
        }
    }
}

/// Left-to-right duration/emission channel standing in for speech synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    durations: Vec<[f64; MAX_DURATION]>,
    emissions: Vec<Vec<f64>>,
    log_durations: Vec<[f64; MAX_DURATION]>,
    log_emissions: Vec<Vec<f64>>,
    obs_alphabet_size: usize,
}

impl Channel {
    pub fn from_tables(
        durations: Vec<[f64; MAX_DURATION]>,
        emissions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if durations.len() != emissions.len() || durations.is_empty() {
            return Err(Error::InvalidCorpusSpec(
                "channel needs one duration and one emission row per token".into(),
            ));
        }
        let m = emissions[0].len();
        if m == 0 || emissions.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidCorpusSpec("ragged emission table".into()));
        }
        for row in &durations {
            check_row(row, "duration row")?;
        }
        for row in &emissions {
            check_row(row, "emission row")?;
        }
        let log_durations = durations
            .iter()
            .map(|r| [ln(r[0]), ln(r[1]), ln(r[2])])
            .collect();
        let log_emissions = emissions.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect();
        Ok(Channel {
            durations,
            emissions,
            log_durations,
            log_emissions,
            obs_alphabet_size: m,
        })
    }

    pub fn random(vocab: &Vocab, shape: &ChannelShape, rng: &mut Rng) -> Result<Self> {
        let v = vocab.size();
        let m = shape.obs_alphabet_size;
        if m < v {
            return Err(Error::InvalidCorpusSpec(format!(
                "observation alphabet ({m}) smaller than vocabulary ({v})"
            )));
        }
        if shape.primary_mass + shape.partner_mass > 1.0 {
            return Err(Error::InvalidCorpusSpec("primary + partner mass exceeds 1".into()));
        }
        let mut symbols: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut symbols);
        let eos = vocab.eos_id() as usize;
        let mut content: Vec<usize> = vocab.content_ids().map(|t| t as usize).collect();
        rng.shuffle(&mut content);
        let mut partner: Vec<Option<usize>> = vec![None; v];
        for pair in content.chunks(2) {
            if let [a, b] = *pair {
                partner[a] = Some(b);
                partner[b] = Some(a);
            }
        }
        let mut durations = Vec::with_capacity(v);
        let mut emissions = Vec::with_capacity(v);
        for t in 0..v {
            let noise = 1.0 - shape.primary_mass - shape.partner_mass;
            let mut row = vec![noise / m as f64; m];
            match partner[t] {
                Some(p) if t != eos => {
                    row[symbols[t]] += shape.primary_mass;
                    row[symbols[p]] += shape.partner_mass;
                }
                _ => row[symbols[t]] += shape.primary_mass + shape.partner_mass,
            }
            let total: f64 = row.iter().sum();
            row[symbols[t]] += 1.0 - total;
            emissions.push(row);

            let mut d = [0.0; MAX_DURATION];
            for (i, slot) in d.iter_mut().enumerate() {
                *slot = (shape.durations[i] + rng.uniform(0.0, shape.duration_jitter)).max(0.0);
            }
            let dt: f64 = d.iter().sum();
            for slot in d.iter_mut() {
                *slot /= dt;
            }
            let dt: f64 = d.iter().sum();
            d[1] += 1.0 - dt;
            durations.push(d);
        }
        Channel::from_tables(durations, emissions)
    }

    pub fn obs_alphabet_size(&self) -> usize {
        self.obs_alphabet_size
    }

    pub fn duration_probs(&self, token: TokenId) -> &[f64; MAX_DURATION] {
        &self.durations[token as usize]
    }

    pub fn emission_probs(&self, token: TokenId) -> &[f64] {
        &self.emissions[token as usize]
    }

    /// Draws the frames for a transcript (every token, EOS included, emits at
    /// least one frame).
    pub fn sample_frames(&self, y: &TokenSeq, rng: &mut Rng) -> Vec<u32> {
        let mut frames = Vec::new();
        for &t in y.ids() {
            let d = 1 + rng.categorical(&self.durations[t as usize]);
            for _ in 0..d {
                frames.push(rng.categorical(&self.emissions[t as usize]) as u32);
            }
        }
        frames
    }

    /// `log p(x | y)`, marginalizing over every duration assignment with a
    /// forward pass. `-inf` when no alignment exists.
    pub fn log_likelihood(&self, frames: &[u32], y: &TokenSeq) -> f64 {
        let ids = y.ids();
        let n = ids.len();
        let t_len = frames.len();
        if t_len < n || t_len > n * MAX_DURATION {
            return f64::NEG_INFINITY;
        }
        let mut prev = vec![f64::NEG_INFINITY; t_len + 1];
        prev[0] = 0.0;
        let mut cur = vec![f64::NEG_INFINITY; t_len + 1];
        let mut terms = [0.0f64; MAX_DURATION];
        for &tok in ids {
            let emit = &self.log_emissions[tok as usize];
            let dur = &self.log_durations[tok as usize];
            for t in 0..=t_len {
                let mut count = 0;
                let mut emitted = 0.0;
                for d in 1..=MAX_DURATION.min(t) {
                    emitted += emit[frames[t - d] as usize];
                    let from = prev[t - d];
                    if from > f64::NEG_INFINITY {
                        terms[count] = from + dur[d - 1] + emitted;
                        count += 1;
                    }
                }
                cur[t] = log_sum_exp(&terms[..count]);
            }
            core::mem::swap(&mut prev, &mut cur);
        }
        prev[t_len]
    }
}

/// `log p(x | y)` under `channel`.
pub fn channel_log_likelihood(x: &Utterance, y: &TokenSeq, channel: &Channel) -> f64 {
    channel.log_likelihood(&x.frames, y)
}

/// Default desk-scale generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub content_tokens: usize,
    pub lm: LmShape,
    pub channel: ChannelShape,
    pub max_len: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            content_tokens: 30,
            lm: LmShape::default(),
            channel: ChannelShape::default(),
            max_len: 12,
        }
    }
}

/// The generative pair `(p_y, p_{x|y})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub lm: TrueLM,
    pub channel: Channel,
}

impl Generator {
    pub fn build(params: &GeneratorParams, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let vocab = Vocab::synthetic(params.content_tokens);
        let lm = TrueLM::random(vocab.clone(), &params.lm, &mut root.derive(1))?;
        let channel = Channel::random(&vocab, &params.channel, &mut root.derive(2))?;
        Ok(Generator { lm, channel })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusSizes {
    pub paired: usize,
    pub unpaired_speech: usize,
    pub unpaired_text: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub paired: Vec<Utterance>,
    /// Unlabeled-facing speech; `gold` is always `None` here.
    pub unpaired_speech: Vec<Utterance>,
    sealed_gold: Vec<TokenSeq>,
    pub unpaired_text: Vec<TokenSeq>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl DatasetBundle {
    pub fn new(
        paired: Vec<Utterance>,
        unpaired_speech: Vec<Utterance>,
        sealed_gold: Vec<TokenSeq>,
        unpaired_text: Vec<TokenSeq>,
        dev: Vec<Utterance>,
        test: Vec<Utterance>,
    ) -> Result<Self> {
        if sealed_gold.len() != unpaired_speech.len() {
            return Err(Error::InvalidCorpusSpec(
                "sealed gold must align with unpaired speech".into(),
            ));
        }
        let mut ids = BTreeSet::new();
        for u in paired.iter().chain(&unpaired_speech).chain(&dev).chain(&test) {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::InvalidCorpusSpec(format!("duplicate utterance id `{}`", u.id)));
            }
        }
        for u in paired.iter().chain(&dev).chain(&test) {
            if u.gold.is_none() {
                return Err(Error::InvalidCorpusSpec(format!("`{}` lacks a transcript", u.id)));
            }
        }
        let unpaired_speech = unpaired_speech.into_iter().map(|u| u.without_gold()).collect();
        Ok(DatasetBundle {
            paired,
            unpaired_speech,
            sealed_gold,
            unpaired_text,
            dev,
            test,
        })
    }

    /// Gold transcripts of the unpaired speech, for evaluation only.
    pub fn sealed_gold(&self) -> &[TokenSeq] {
        &self.sealed_gold
    }

    /// Unpaired speech with the sealed transcripts attached (evaluation and
    /// topline training).
    pub fn unpaired_with_gold(&self) -> Vec<Utterance> {
        self.unpaired_speech
            .iter()
            .zip(&self.sealed_gold)
            .map(|(u, g)| Utterance {
                gold: Some(g.clone()),
                ..u.clone()
            })
            .collect()
    }
}

const MAX_REJECT_FRACTION: f64 = 0.99;
const MIN_ATTEMPTS_FOR_RATE: u64 = 100;

struct SentenceSampler<'a> {
    lm: &'a TrueLM,
    max_len: usize,
    attempts: u64,
    rejected: u64,
}

impl SentenceSampler<'_> {
    fn draw(&mut self, rng: &mut Rng) -> Result<TokenSeq> {
        loop {
            self.attempts += 1;
            if let Some((y, _)) = self.lm.sample(self.max_len, rng) {
                return Ok(y);
            }
            self.rejected += 1;
            if self.attempts >= MIN_ATTEMPTS_FOR_RATE
                && self.rejected as f64 > MAX_REJECT_FRACTION * self.attempts as f64
            {
                return Err(Error::RejectionRate {
                    rejected: self.rejected,
                    attempts: self.attempts,
                });
            }
        }
    }
}

/// Samples every split. Each utterance draws from its own derived stream, so
/// the bundle is a pure function of `(generator, sizes, max_len, rng)`.
pub fn sample_corpus(
    true_lm: &TrueLM,
    channel: &Channel,
    sizes: &CorpusSizes,
    max_len: usize,
    rng: &Rng,
) -> Result<DatasetBundle> {
    if max_len == 0 {
        return Err(Error::InvalidCorpusSpec("max_len must be at least 1".into()));
    }
    if channel.durations.len() != true_lm.vocab().size() {
        return Err(Error::InvalidCorpusSpec("channel and LM vocabularies differ".into()));
    }
    let total = sizes.paired + sizes.unpaired_speech + sizes.unpaired_text + sizes.dev + sizes.test;
    if total == 0 {
        return Err(Error::InvalidCorpusSpec("all split sizes are zero".into()));
    }
    let mut sampler = SentenceSampler {
        lm: true_lm,
        max_len,
        attempts: 0,
        rejected: 0,
    };
    let mut speech_split = |name: &str, stream: u64, n: usize| -> Result<Vec<Utterance>> {
        let split_rng = rng.derive(stream);
        (0..n)
            .map(|i| {
                let mut r = split_rng.derive(i as u64);
                let y = sampler.draw(&mut r)?;
                let frames = channel.sample_frames(&y, &mut r);
                Utterance::new(format!("{name}-{i:06}"), frames, Some(y))
            })
            .collect()
    };
    let paired = speech_split("paired", 1, sizes.paired)?;
    let unpaired = speech_split("unpaired", 2, sizes.unpaired_speech)?;
    let dev = speech_split("dev", 3, sizes.dev)?;
    let test = speech_split("test", 4, sizes.test)?;

    let sealed: Vec<TokenSeq> = unpaired.iter().map(|u| u.gold.clone().unwrap()).collect();
    let excluded: BTreeSet<&TokenSeq> = sealed.iter().collect();
    let text_rng = rng.derive(5);
    let mut unpaired_text = Vec::with_capacity(sizes.unpaired_text);
    for i in 0..sizes.unpaired_text {
        let mut r = text_rng.derive(i as u64);
        loop {
            let y = sampler.draw(&mut r)?;
            if !excluded.contains(&y) {
                unpaired_text.push(y);
                break;
            }
        }
    }
    DatasetBundle::new(paired, unpaired, sealed, unpaired_text, dev, test)
}

/// Sequence-count guard for [`exact_posterior`].
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// Bayes posterior `p(y | x) ∝ p_y(y) p(x | y)` over every transcript of at
/// most `max_len` content tokens. Zero-probability entries are omitted.
pub fn exact_posterior<P: LanguageModel>(
    x: &Utterance,
    prior: &P,
    channel: &Channel,
    max_len: usize,
) -> Result<BTreeMap<TokenSeq, f64>> {
    let vocab = prior.vocab();
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let c = content.len() as u128;
    let mut count: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        count = count.saturating_add(layer);
        layer = layer.saturating_mul(c);
    }
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut seqs = Vec::new();
    let mut joints = Vec::new();
    let mut prefix: Vec<TokenId> = Vec::with_capacity(max_len + 1);
    enumerate(&content, max_len, &mut prefix, &mut |ids: &[TokenId]| {
        let mut full = ids.to_vec();
        full.push(vocab.eos_id());
        let y = TokenSeq::from_ids_unchecked(full);
        let joint = prior.sequence_log_prob(&y) + channel.log_likelihood(&x.frames, &y);
        if joint > f64::NEG_INFINITY {
            seqs.push(y);
            joints.push(joint);
        }
    });
    let weights = normalize_log_weights(&joints)?;
    Ok(seqs.into_iter().zip(weights).filter(|(_, w)| *w > 0.0).collect())
}

fn enumerate(
    content: &[TokenId],
    remaining: usize,
    prefix: &mut Vec<TokenId>,
    visit: &mut impl FnMut(&[TokenId]),
) {
    visit(prefix);
    if remaining == 0 {
        return;
    }
    for &t in content {
        prefix.push(t);
        enumerate(content, remaining - 1, prefix, visit);
        prefix.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_channel(vocab: &Vocab) -> Channel {
        let v = vocab.size();
        let durations = vec![[1.0, 0.0, 0.0]; v];
        let emissions = (0..v)
            .map(|t| {
                let mut r = vec![0.0; v];
                r[t] = 1.0;
                r
            })
            .collect();
        Channel::from_tables(durations, emissions).unwrap()
    }

    fn small_generator(seed: u64) -> Generator {
        let params = GeneratorParams {
            content_tokens: 3,
            lm: LmShape {
                branching: 2,
                ..LmShape::default()
            },
            channel: ChannelShape {
                obs_alphabet_size: 6,
                ..ChannelShape::default()
            },
            max_len: 3,
        };
        Generator::build(&params, seed).unwrap()
    }

    #[test]
    fn generator_rows_are_distributions() {
        let g = Generator::build(&GeneratorParams::default(), 5).unwrap();
        for row in g.lm.probs() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[g.lm.vocab().eos_id() as usize] > 0.0);
        }
        for t in 0..g.lm.vocab().size() as TokenId {
            let d = g.channel.duration_probs(t);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((g.channel.emission_probs(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_durations_emit_one_frame_per_token() {
        let vocab = Vocab::synthetic(4);
        let lm = TrueLM::random(vocab.clone(), &LmShape::default(), &mut Rng::new(1)).unwrap();
        let channel = deterministic_channel(&vocab);
        let sizes = CorpusSizes {
            paired: 1,
            ..Default::default()
        };
        let b = sample_corpus(&lm, &channel, &sizes, 12, &Rng::new(9)).unwrap();
        let u = &b.paired[0];
        assert_eq!(u.frames.len(), u.gold.as_ref().unwrap().len() + 1);
    }

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let g = small_generator(3);
        let sizes = CorpusSizes {
            paired: 20,
            unpaired_speech: 20,
            unpaired_text: 50,
            dev: 10,
            test: 10,
        };
        let a = sample_corpus(&g.lm, &g.channel, &sizes, 3, &Rng::new(4)).unwrap();
        let b = sample_corpus(&g.lm, &g.channel, &sizes, 3, &Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let gold: BTreeSet<_> = a.sealed_gold().iter().collect();
        assert!(a.unpaired_text.iter().all(|y| !gold.contains(y)));
        assert!(a.unpaired_speech.iter().all(|u| u.gold.is_none()));
        assert!(a.paired.iter().all(|u| u.gold.as_ref().unwrap().len() <= 3));
    }

    #[test]
    fn rejection_rate_is_reported() {
        let vocab = Vocab::synthetic(2);
        // EOS almost never fires: sentences essentially never fit in max_len 1.
        let probs = vec![vec![0.4995, 0.4995, 0.001]; 3];
        let lm = TrueLM::from_probs(vocab.clone(), probs).unwrap();
        let channel = deterministic_channel(&vocab);
        let sizes = CorpusSizes {
            paired: 5,
            ..Default::default()
        };
        let err = sample_corpus(&lm, &channel, &sizes, 1, &Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::RejectionRate { .. }));
    }

    #[test]
    fn deterministic_channel_likelihood() {
        let vocab = Vocab::synthetic(3);
        let ch = deterministic_channel(&vocab);
        let y = TokenSeq::from_content(&[2, 0, 1], &vocab).unwrap();
        let frames: Vec<u32> = y.ids().to_vec();
        assert_eq!(ch.log_likelihood(&frames, &y), 0.0);
        let other = TokenSeq::from_content(&[2, 1, 1], &vocab).unwrap();
        assert_eq!(ch.log_likelihood(&frames, &other), f64::NEG_INFINITY);
        // Fewer frames than tokens: no alignment.
        assert_eq!(ch.log_likelihood(&frames[..3], &y), f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_posterior() {
        let vocab = Vocab::synthetic(3);
        let lm = TrueLM::random(vocab.clone(), &LmShape { branching: 2, ..Default::default() }, &mut Rng::new(2)).unwrap();
        let ch = deterministic_channel(&vocab);
        let y = TokenSeq::from_content(&[1, 2], &vocab).unwrap();
        let x = Utterance::new("x", y.ids().to_vec(), None).unwrap();
        let post = exact_posterior(&x, &lm, &ch, 3).unwrap();
        assert_eq!(post.len(), 1);
        assert_eq!(post[&y], 1.0);
    }

    #[test]
    fn posterior_normalizes() {
        let g = small_generator(8);
        let mut rng = Rng::new(1);
        for i in 0..5 {
            let (y, _) = loop {
                if let Some(s) = g.lm.sample(3, &mut rng) {
                    break s;
                }
            };
            let frames = g.channel.sample_frames(&y, &mut rng);
            let x = Utterance::new(alloc::format!("u{i}"), frames, None).unwrap();
            let post = exact_posterior(&x, &g.lm, &g.channel, 3).unwrap();
            let total: f64 = post.values().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(post.values().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn enumeration_guard() {
        let g = Generator::build(&GeneratorParams::default(), 1).unwrap();
        let x = Utterance::new("x", vec![0; 10], None).unwrap();
        assert!(matches!(
            exact_posterior(&x, &g.lm, &g.channel, 12),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }
}
