//! Hypothesis generation: greedy decoding, beam search with optional shallow
//! fusion, reference-length estimation and the length filter.

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::seq2seq::{DecoderState, Decoder, ParamVector};
use crate::types::{TokenId, TokenSeq, Utterance};
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    /// `Σ log q` over the emitted steps under the generating model.
    pub asr_logp: f64,
    /// Prior log-probability, when something has scored it.
    pub lm_logp: Option<f64>,
    /// Ranking score: `asr_logp`, plus `weight · lm` under fusion.
    pub score: f64,
    pub finished: bool,
}

/// Ordered hypotheses, best first, at most `k` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub hyps: Vec<Hypothesis>,
    pub k: usize,
}

impl Beam {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthFilter {
    pub r_lb: f64,
    pub r_ub: f64,
}

impl Default for LengthFilter {
    fn default() -> Self {
        LengthFilter {
            r_lb: 0.95,
            r_ub: 1.05,
        }
    }
}

impl LengthFilter {
    pub fn new(r_lb: f64, r_ub: f64) -> Result<Self> {
        if !(r_lb > 0.0 && r_ub >= r_lb && r_ub.is_finite()) {
            return Err(Error::InvalidDecode(format!(
                "length filter needs 0 < r_lb <= r_ub, got ({r_lb}, {r_ub})"
            )));
        }
        Ok(LengthFilter { r_lb, r_ub })
    }

    /// Inclusive `[⌊r_lb·L⌋, ⌈r_ub·L⌉]`.
    pub fn bounds(&self, ref_len: usize) -> (usize, usize) {
        let l = ref_len as f64;
        (libm::floor(self.r_lb * l) as usize, libm::ceil(self.r_ub * l) as usize)
    }

    pub fn keeps(&self, len: usize, ref_len: usize) -> bool {
        let (lo, hi) = self.bounds(ref_len);
        lo <= len && len <= hi
    }
}

/// Shallow fusion: add `weight` times the prior's incremental log-prob.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub lm: &'a dyn LanguageModel,
    pub weight: f64,
}

/// `2 ×` frame count.
pub fn default_max_steps(x: &Utterance) -> usize {
    2 * x.frames.len()
}

fn by_score_then_tokens(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.ids().cmp(b.tokens.ids()))
}

/// Repeated argmax (smallest id on ties) until EOS or `max_steps`.
pub fn greedy_decode(params: &ParamVector, x: &Utterance, max_steps: usize) -> Result<Hypothesis> {
    if max_steps == 0 {
        return Err(Error::InvalidDecode("max_steps must be at least 1".into()));
    }
    let dec = Decoder::new(params, x)?;
    let eos = dec.vocab().eos_id();
    let mut state = dec.start();
    let mut prev = eos;
    let mut ids = Vec::new();
    let mut total = 0.0;
    for step in 0..max_steps {
        let (next, logp) = dec.step(&state, prev, step)?;
        let mut best = 0usize;
        for (i, &v) in logp.iter().enumerate() {
            if v > logp[best] {
                best = i;
            }
        }
        total += logp[best];
        ids.push(best as TokenId);
        if best as TokenId == eos {
            let tokens = TokenSeq::new(ids, dec.vocab())?;
            return Ok(Hypothesis {
                tokens,
                asr_logp: total,
                lm_logp: None,
                score: total,
                finished: true,
            });
        }
        state = next;
        prev = best as TokenId;
    }
    ids.push(eos);
    Ok(Hypothesis {
        tokens: TokenSeq::new(ids, dec.vocab())?,
        asr_logp: total,
        lm_logp: None,
        score: total,
        finished: false,
    })
}

struct Active {
    content: Vec<TokenId>,
    state: DecoderState,
    asr: f64,
    lm: f64,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: TokenId,
    asr: f64,
    lm: f64,
    score: f64,
}

/// Beam search with a retired pool for finished hypotheses.
///
/// At each step every expansion of every active hypothesis is ranked by score
/// (smaller token sequence first on ties). Walking that ranking, EOS
/// expansions move to the finished pool and the first `k` non-EOS expansions
/// form the next active set, so the active width stays `k`. The search stops
/// once the pool holds `k` hypotheses, when nothing is active, or after
/// `max_steps`. If fewer than `k` finished, the best unfinished hypotheses are
/// appended with EOS and `finished = false`.
pub fn beam_search(
    params: &ParamVector,
    x: &Utterance,
    k: usize,
    max_steps: usize,
    fusion: Option<Fusion>,
) -> Result<Beam> {
    if k == 0 {
        return Err(Error::InvalidDecode("beam width must be at least 1".into()));
    }
    if max_steps == 0 {
        return Err(Error::InvalidDecode("max_steps must be at least 1".into()));
    }
    let dec = Decoder::new(params, x)?;
    let vocab = dec.vocab().clone();
    if let Some(f) = &fusion {
        if f.lm.vocab().size() != vocab.size() || f.lm.vocab().eos_id() != vocab.eos_id() {
            return Err(Error::InvalidDecode("fusion prior vocabulary differs from the model".into()));
        }
        if !f.weight.is_finite() {
            return Err(Error::InvalidDecode("fusion weight must be finite".into()));
        }
    }
    let eos = vocab.eos_id();
    let mut active = alloc::vec![Active {
        content: Vec::new(),
        state: dec.start(),
        asr: 0.0,
        lm: 0.0,
        score: 0.0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for step in 0..max_steps {
        let mut cands = Vec::with_capacity(active.len() * vocab.size());
        let mut next_states = Vec::with_capacity(active.len());
        for (pi, hyp) in active.iter().enumerate() {
            let prev = hyp.content.last().copied().unwrap_or(eos);
            let (next, logp) = dec.step(&hyp.state, prev, step)?;
            next_states.push(next);
            let lm_row = fusion.as_ref().map(|f| f.lm.next_log_probs(&hyp.content));
            for (t, &lp) in logp.iter().enumerate() {
                let (lm_inc, fused) = match (&fusion, &lm_row) {
                    (Some(f), Some(row)) if f.weight != 0.0 => (row[t], f.weight * row[t]),
                    (Some(_), Some(row)) => (row[t], 0.0),
                    _ => (0.0, 0.0),
                };
                cands.push(Candidate {
                    parent: pi,
                    token: t as TokenId,
                    asr: hyp.asr + lp,
                    lm: hyp.lm + lm_inc,
                    score: hyp.score + lp + fused,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    let pa = &active[a.parent].content;
                    let pb = &active[b.parent].content;
                    pa.iter()
                        .chain(core::iter::once(&a.token))
                        .cmp(pb.iter().chain(core::iter::once(&b.token)))
                })
        });
        let mut next_active = Vec::with_capacity(k);
        for c in cands {
            if next_active.len() == k {
                break;
            }
            let parent = &active[c.parent];
            if c.token == eos {
                let mut ids = parent.content.clone();
                ids.push(eos);
                pool.push(Hypothesis {
                    tokens: TokenSeq::new(ids, &vocab)?,
                    asr_logp: c.asr,
                    lm_logp: fusion.as_ref().map(|_| c.lm),
                    score: c.score,
                    finished: true,
                });
            } else {
                let mut content = parent.content.clone();
                content.push(c.token);
                next_active.push(Active {
                    content,
                    state: next_states[c.parent].clone(),
                    asr: c.asr,
                    lm: c.lm,
                    score: c.score,
                });
            }
        }
        active = next_active;
        if pool.len() >= k || active.is_empty() {
            break;
        }
    }

    pool.sort_by(by_score_then_tokens);
    pool.truncate(k);
    if pool.len() < k {
        // `active` is already in rank order.
        for a in active.into_iter().take(k - pool.len()) {
            let mut ids = a.content;
            ids.push(eos);
            pool.push(Hypothesis {
                tokens: TokenSeq::new(ids, &vocab)?,
                asr_logp: a.asr,
                lm_logp: fusion.as_ref().map(|_| a.lm),
                score: a.score,
                finished: false,
            });
        }
        pool.sort_by(by_score_then_tokens);
    }
    Ok(Beam { hyps: pool, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefLengthMode {
    Oracle,
    Greedy,
    Fused,
}

impl RefLengthMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(RefLengthMode::Oracle),
            "greedy" => Some(RefLengthMode::Greedy),
            "fused" => Some(RefLengthMode::Fused),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RefLengthMode::Oracle => "oracle",
            RefLengthMode::Greedy => "greedy",
            RefLengthMode::Fused => "fused",
        }
    }
}

/// Beam width used for the fused length estimate. Width 1 makes a zero fusion
/// weight reproduce the greedy estimate exactly.
pub const FUSED_LENGTH_BEAM: usize = 1;

/// Token count (EOS excluded) of the gold transcript, the greedy hypothesis,
/// or the top fused beam hypothesis of the initial proposal model.
pub fn estimate_ref_length(
    params: &ParamVector,
    x: &Utterance,
    mode: RefLengthMode,
    fusion: Option<Fusion>,
    max_steps: usize,
) -> Result<usize> {
    match mode {
        RefLengthMode::Oracle => x
            .gold
            .as_ref()
            .map(TokenSeq::len)
            .ok_or_else(|| Error::MissingGold(x.id.clone())),
        RefLengthMode::Greedy => Ok(greedy_decode(params, x, max_steps)?.tokens.len()),
        RefLengthMode::Fused => {
            let fusion = fusion.ok_or_else(|| {
                Error::InvalidDecode("fused length estimate needs a fusion prior".into())
            })?;
            let beam = beam_search(params, x, FUSED_LENGTH_BEAM, max_steps, Some(fusion))?;
            Ok(beam.best().map_or(0, |h| h.tokens.len()))
        }
    }
}

/// Keeps hypotheses with `⌊r_lb·L⌋ ≤ len ≤ ⌈r_ub·L⌉`, order preserved.
pub fn length_filter_apply(beam: &Beam, ref_len: usize, filter: &LengthFilter) -> Beam {
    Beam {
        hyps: beam
            .hyps
            .iter()
            .filter(|h| filter.keeps(h.tokens.len(), ref_len))
            .cloned()
            .collect(),
        k: beam.k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{train_lm, SmoothingParams};
    use crate::rng::Rng;
    use crate::seq2seq::{score_sequence, step_distribution, ModelConfig};
    use crate::types::Vocab;
    use alloc::vec;
    use alloc::vec::Vec;

    fn tiny(seed: u64, scale: f64) -> ParamVector {
        let cfg = ModelConfig {
            embed_dim: 4,
            encoder_hidden: 4,
            decoder_hidden: 5,
            attention_dim: 3,
            vocab: Vocab::synthetic(3),
            obs_alphabet_size: 6,
            label_smoothing: 0.0,
        };
        let mut p = ParamVector::init(&cfg, &mut Rng::new(seed)).unwrap();
        p.scale(scale);
        p
    }

    fn utt(frames: &[u32]) -> Utterance {
        Utterance::new("u", frames.to_vec(), None).unwrap()
    }

    fn hyp_with_len(n: usize) -> Hypothesis {
        let v = Vocab::synthetic(3);
        let content: Vec<TokenId> = (0..n).map(|i| (i % 3) as TokenId).collect();
        Hypothesis {
            tokens: TokenSeq::from_content(&content, &v).unwrap(),
            asr_logp: -(n as f64),
            lm_logp: None,
            score: -(n as f64),
            finished: true,
        }
    }

    /// Every finished sequence within `max_steps` plus every truncation at
    /// `max_steps`, scored by explicit per-step rollout.
    fn universe(p: &ParamVector, x: &Utterance, max_steps: usize) -> Vec<(Vec<TokenId>, f64, bool)> {
        let v = p.config().vocab.clone();
        let eos = v.eos_id();
        let mut out = Vec::new();
        let mut frontier = vec![(Vec::<TokenId>::new(), 0.0)];
        for step in 0..max_steps {
            let mut next = Vec::new();
            for (prefix, s) in &frontier {
                let logp = step_distribution(p, x, prefix).unwrap();
                let mut fin = prefix.clone();
                fin.push(eos);
                out.push((fin, s + logp[eos as usize], true));
                for t in v.content_ids() {
                    let mut ext = prefix.clone();
                    ext.push(t);
                    next.push((ext, s + logp[t as usize]));
                }
            }
            frontier = next;
            if step + 1 == max_steps {
                for (mut c, s) in frontier.drain(..) {
                    c.push(eos);
                    out.push((c, s, false));
                }
            }
        }
        out
    }

    #[test]
    fn greedy_equals_width_one_beam() {
        for seed in 0..12 {
            let p = tiny(seed, 5.0);
            let x = utt(&[(seed % 6) as u32, 2, 5, 1]);
            let g = greedy_decode(&p, &x, 8).unwrap();
            let b = beam_search(&p, &x, 1, 8, None).unwrap();
            assert_eq!(b.hyps.len(), 1);
            assert_eq!(b.hyps[0].tokens, g.tokens);
            assert_eq!(b.hyps[0].finished, g.finished);
            assert!((b.hyps[0].asr_logp - g.asr_logp).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_follows_explicit_argmax_rollout() {
        let p = tiny(3, 5.0);
        let x = utt(&[0, 1, 2, 3]);
        let g = greedy_decode(&p, &x, 6).unwrap();
        let eos = p.config().vocab.eos_id();
        let mut prefix = Vec::new();
        let mut total = 0.0;
        for _ in 0..6 {
            let logp = step_distribution(&p, &x, &prefix).unwrap();
            let best = (0..logp.len())
                .fold(0, |b, i| if logp[i] > logp[b] { i } else { b }) as TokenId;
            total += logp[best as usize];
            if best == eos {
                break;
            }
            prefix.push(best);
        }
        assert_eq!(g.tokens.content(), &prefix[..]);
        assert!((g.asr_logp - total).abs() < 1e-12);
        if g.finished {
            assert!((g.asr_logp - score_sequence(&p, &x, &g.tokens).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_truncates_with_appended_eos() {
        let p = tiny(1, 1.0);
        let x = utt(&[1, 1]);
        let g = greedy_decode(&p, &x, 1).unwrap();
        if !g.finished {
            assert_eq!(g.tokens.len(), 1);
            let logp = step_distribution(&p, &x, &[]).unwrap();
            assert!((g.asr_logp - logp[g.tokens.ids()[0] as usize]).abs() < 1e-12);
        } else {
            assert!(g.tokens.is_empty());
        }
    }

    #[test]
    fn exhaustive_beam_returns_every_sequence_with_exact_scores() {
        for seed in [2u64, 8, 13] {
            let p = tiny(seed, 4.0);
            let x = utt(&[4, 0, 3]);
            let mut all = universe(&p, &x, 3);
            assert_eq!(all.len(), 40);
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            let beam = beam_search(&p, &x, 40, 3, None).unwrap();
            assert_eq!(beam.hyps.len(), 40);
            let mut got: Vec<_> = beam
                .hyps
                .iter()
                .map(|h| (h.tokens.ids().to_vec(), h.asr_logp, h.finished))
                .collect();
            got.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for (g, e) in got.iter().zip(&all) {
                assert_eq!(g.0, e.0);
                assert_eq!(g.2, e.2);
                assert!((g.1 - e.1).abs() < 1e-10);
            }

            let beam = beam_search(&p, &x, 20, 3, None).unwrap();
            assert_eq!(beam.hyps.len(), 20);
            assert_eq!(beam.hyps[0].tokens.ids(), &all[0].0[..]);
            let finished: Vec<_> = all.iter().filter(|e| e.2).collect();
            for h in beam.hyps.iter().filter(|h| h.finished) {
                let e = finished.iter().find(|e| e.0 == h.tokens.ids()).unwrap();
                assert!((e.1 - h.asr_logp).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn beam_is_sorted_distinct_and_bounded() {
        for seed in 0..6 {
            let p = tiny(seed, 3.0);
            let x = utt(&[5, 4, 3, 2, 1]);
            for k in [1, 2, 4, 7] {
                let beam = beam_search(&p, &x, k, 10, None).unwrap();
                assert!(beam.hyps.len() <= k && !beam.hyps.is_empty());
                for w in beam.hyps.windows(2) {
                    assert!(w[0].score >= w[1].score);
                    assert_ne!(w[0].tokens, w[1].tokens);
                }
                let mut seqs: Vec<_> = beam.hyps.iter().map(|h| h.tokens.clone()).collect();
                seqs.sort();
                seqs.dedup();
                assert_eq!(seqs.len(), beam.hyps.len());
                for h in &beam.hyps {
                    assert!(h.asr_logp <= 0.0);
                    assert_eq!(*h.tokens.ids().last().unwrap(), p.config().vocab.eos_id());
                }
            }
        }
    }

    fn tiny_lm() -> crate::ngram::NGramLM {
        let v = Vocab::synthetic(3);
        let corpus: Vec<TokenSeq> = [[0u32, 1].as_slice(), &[0, 1, 2], &[2, 2], &[1]]
            .iter()
            .map(|c| TokenSeq::from_content(c, &v).unwrap())
            .collect();
        train_lm(&corpus, &v, 2, &SmoothingParams::default_for(2), 1.0).unwrap()
    }

    #[test]
    fn zero_fusion_weight_is_identity() {
        let lm = tiny_lm();
        for seed in 0..5 {
            let p = tiny(seed, 3.0);
            let x = utt(&[1, 3, 5]);
            let a = beam_search(&p, &x, 4, 6, None).unwrap();
            let b = beam_search(&p, &x, 4, 6, Some(Fusion { lm: &lm, weight: 0.0 })).unwrap();
            assert_eq!(a.hyps.len(), b.hyps.len());
            for (h, g) in a.hyps.iter().zip(&b.hyps) {
                assert_eq!(h.tokens, g.tokens);
                assert_eq!(h.asr_logp, g.asr_logp);
                assert_eq!(h.score, g.score);
            }
        }
    }

    #[test]
    fn fused_scores_decompose() {
        let lm = tiny_lm();
        let p = tiny(4, 3.0);
        let x = utt(&[2, 2, 0]);
        let lambda = 0.5;
        let beam = beam_search(&p, &x, 3, 6, Some(Fusion { lm: &lm, weight: lambda })).unwrap();
        for h in beam.hyps.iter().filter(|h| h.finished) {
            let asr = score_sequence(&p, &x, &h.tokens).unwrap();
            let prior = lm.sequence_log_prob(&h.tokens);
            assert!((h.asr_logp - asr).abs() < 1e-10);
            assert!((h.lm_logp.unwrap() - prior).abs() < 1e-10);
            assert!((h.score - asr - lambda * prior).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_zero_width() {
        let p = tiny(0, 1.0);
        assert!(beam_search(&p, &utt(&[1]), 0, 3, None).is_err());
        assert!(greedy_decode(&p, &utt(&[1]), 0).is_err());
    }

    #[test]
    fn filter_bounds() {
        let f = LengthFilter::default();
        assert_eq!(f.bounds(10), (9, 11));
        assert_eq!(f.bounds(1), (0, 2));
        let beam = Beam {
            hyps: (0..15).map(hyp_with_len).collect(),
            k: 15,
        };
        let kept: Vec<usize> = length_filter_apply(&beam, 10, &f)
            .hyps
            .iter()
            .map(|h| h.tokens.len())
            .collect();
        assert_eq!(kept, vec![9, 10, 11]);
        let wide = LengthFilter::new(1e-9, 1e9).unwrap();
        assert_eq!(length_filter_apply(&beam, 7, &wide), beam);
        assert!(length_filter_apply(&beam, 100, &f).is_empty());
    }

    #[test]
    fn filter_rejects_bad_ratios() {
        assert!(LengthFilter::new(0.0, 1.0).is_err());
        assert!(LengthFilter::new(1.2, 1.0).is_err());
    }

    #[test]
    fn ref_length_modes() {
        let v = Vocab::synthetic(3);
        let p = tiny(6, 3.0);
        let gold = TokenSeq::from_content(&[0, 1, 2, 0, 1, 2, 0], &v).unwrap();
        let x = Utterance::new("g", vec![1, 2, 3], Some(gold)).unwrap();
        assert_eq!(estimate_ref_length(&p, &x, RefLengthMode::Oracle, None, 6).unwrap(), 7);
        assert!(estimate_ref_length(&p, &x.without_gold(), RefLengthMode::Oracle, None, 6).is_err());
        let greedy = estimate_ref_length(&p, &x, RefLengthMode::Greedy, None, 6).unwrap();
        assert_eq!(greedy, greedy_decode(&p, &x, 6).unwrap().tokens.len());
        let lm = tiny_lm();
        let fused = estimate_ref_length(
            &p,
            &x,
            RefLengthMode::Fused,
            Some(Fusion { lm: &lm, weight: 0.0 }),
            6,
        )
        .unwrap();
        assert_eq!(fused, greedy);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn widening_the_filter_keeps_previous_survivors(
                lens in proptest::collection::vec(0usize..30, 1..20),
                l in 0usize..25,
                lb in 0.5f64..1.0, ub in 1.0f64..1.5,
                dlb in 0.0f64..0.4, dub in 0.0f64..0.5,
            ) {
                let beam = Beam { hyps: lens.iter().map(|&n| hyp_with_len(n)).collect(), k: lens.len() };
                let narrow = LengthFilter::new(lb, ub).unwrap();
                let wide = LengthFilter::new(lb - dlb, ub + dub).unwrap();
                let a = length_filter_apply(&beam, l, &narrow);
                let b = length_filter_apply(&beam, l, &wide);
                for h in &a.hyps {
                    prop_assert!(b.hyps.contains(h));
                }
            }
        }
    }
}
