//! Error rates by edit distance, gap recovery, and hypothesis perplexity.
//!
//! The synthetic task has one token granularity, so the token error rate is
//! reported under both the WER and the CER name.

use crate::decode::{beam_search, default_max_steps, greedy_decode, Fusion};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::ngram::token_perplexity;
use crate::seq2seq::ParamVector;
use crate::types::{TokenId, TokenSeq, Utterance};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors over reference tokens; `0/0` is reported as 0.
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Unit-cost alignment counts without the empty-reference check.
pub fn align_counts(reference: &[TokenId], hyp: &[TokenId]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    // Traceback preferring substitution (or match), then deletion, then insertion.
    let mut counts = ErrorCounts {
        ref_len: n,
        ..ErrorCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Minimal edit distance counts and rate against a non-empty reference.
pub fn edit_rate(reference: &[TokenId], hyp: &[TokenId]) -> Result<(ErrorCounts, f64)> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let counts = align_counts(reference, hyp);
    let rate = counts.rate();
    Ok((counts, rate))
}

/// Corpus-level counts: total errors over total reference tokens. Empty
/// references are allowed here as long as the corpus has some reference
/// token.
pub fn corpus_error_counts<'a, I>(pairs: I) -> Result<ErrorCounts>
where
    I: IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>,
{
    let mut total = ErrorCounts::default();
    for (r, h) in pairs {
        total.add(&align_counts(r, h));
    }
    if total.ref_len == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(total)
}

/// Percentage of the gap between a low-resource and a high-resource error
/// rate recovered by `x`.
pub fn werr(wer_low_resource: f64, wer_high_resource: f64, x: f64) -> Result<f64> {
    let gap = wer_low_resource - wer_high_resource;
    if gap == 0.0 || !gap.is_finite() {
        return Err(Error::DegenerateWerr);
    }
    Ok(100.0 * (wer_low_resource - x) / gap)
}

/// Greedy hypotheses for each utterance, `max_steps` defaulting to twice the
/// frame count.
pub fn greedy_hypotheses(
    params: &ParamVector,
    utts: &[Utterance],
    max_steps: Option<usize>,
) -> Result<Vec<TokenSeq>> {
    utts.iter()
        .map(|x| {
            let steps = max_steps.unwrap_or_else(|| default_max_steps(x));
            greedy_decode(params, x, steps).map(|h| h.tokens)
        })
        .collect()
}

/// Corpus error counts of greedy decoding against gold transcripts.
pub fn greedy_error_counts(
    params: &ParamVector,
    utts: &[Utterance],
    max_steps: Option<usize>,
) -> Result<ErrorCounts> {
    let hyps = greedy_hypotheses(params, utts, max_steps)?;
    let golds = utts
        .iter()
        .map(|u| u.gold.as_ref().ok_or_else(|| Error::MissingGold(u.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    corpus_error_counts(golds.iter().zip(&hyps).map(|(g, h)| (g.content(), h.content())))
}

/// Token perplexity under `lm` of the greedy hypotheses on `dev`.
pub fn hypothesis_ppl<P: LanguageModel + ?Sized>(
    lm: &P,
    params: &ParamVector,
    dev: &[Utterance],
    max_steps: Option<usize>,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::InvalidUtterance("perplexity over an empty set".into()));
    }
    let hyps = greedy_hypotheses(params, dev, max_steps)?;
    Ok(token_perplexity(lm, &hyps))
}

/// Corpus error rate of the top beam entry under shallow fusion.
pub fn fused_error_rate(
    params: &ParamVector,
    utts: &[Utterance],
    lm: &dyn LanguageModel,
    weight: f64,
    k: usize,
) -> Result<f64> {
    let mut pairs = Vec::with_capacity(utts.len());
    for x in utts {
        let gold = x.gold.as_ref().ok_or_else(|| Error::MissingGold(x.id.clone()))?;
        let beam = beam_search(params, x, k, default_max_steps(x), Some(Fusion { lm, weight }))?;
        let best = beam
            .best()
            .map(|h| h.tokens.clone())
            .ok_or_else(|| Error::InvalidDecode(alloc::format!("empty beam for `{}`", x.id)))?;
        pairs.push((gold, best));
    }
    Ok(corpus_error_counts(pairs.iter().map(|(g, h)| (g.content(), h.content())))?.rate())
}

/// Fusion weight with the lowest fused error rate on `dev` (the smaller weight
/// on ties), plus the rate at every grid point.
pub fn tune_fusion_weight(
    params: &ParamVector,
    dev: &[Utterance],
    lm: &dyn LanguageModel,
    k: usize,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidDecode("empty fusion-weight grid".into()));
    }
    let mut rates = Vec::with_capacity(grid.len());
    for &w in grid {
        rates.push((w, fused_error_rate(params, dev, lm, w, k)?));
    }
    let best = rates
        .iter()
        .fold(None::<(f64, f64)>, |b, &(w, r)| match b {
            Some((bw, br)) if br < r || (br == r && bw <= w) => Some((bw, br)),
            _ => Some((w, r)),
        })
        .map(|(w, _)| w)
        .unwrap_or(grid[0]);
    Ok((best, rates))
}
