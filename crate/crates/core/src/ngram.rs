//! Interpolated add-k n-gram prior trained on unpaired text.

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::types::{TokenId, TokenSeq, Vocab};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingParams {
    /// Additive pseudo-count applied at every order. Must be positive so every
    /// token keeps non-zero probability in every context.
    pub add_k: f64,
    /// Interpolation weights, lowest order first; one per order, summing to 1.
    pub weights: Vec<f64>,
}

impl SmoothingParams {
    /// `k = 0.1` with weights 0.1/0.2/0.7 for a trigram. Other orders double
    /// the weight at each step up and renormalize.
    pub fn default_for(order: usize) -> Self {
        let weights = if order == 3 {
            vec![0.1, 0.2, 0.7]
        } else {
            let raw: Vec<f64> = (0..order).map(|j| libm::pow(2.0, j as f64)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        };
        SmoothingParams { add_k: 0.1, weights }
    }

    fn validate(&self, order: usize) -> Result<()> {
        if !(self.add_k > 0.0 && self.add_k.is_finite()) {
            return Err(Error::InvalidLm(format!("add_k must be positive, got {}", self.add_k)));
        }
        if self.weights.len() != order {
            return Err(Error::InvalidLm(format!(
                "{} interpolation weights for order {order}",
                self.weights.len()
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidLm("interpolation weights must be a distribution".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    total: u64,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    vocab: Vocab,
    order: usize,
    smoothing: SmoothingParams,
    /// `tables[j]` maps contexts of length `j` to next-token counts.
    tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>>,
}

impl NGramLM {
    fn empty(vocab: Vocab, order: usize, smoothing: SmoothingParams) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidLm("order must be at least 1".into()));
        }
        smoothing.validate(order)?;
        Ok(NGramLM {
            vocab,
            order,
            smoothing,
            tables: vec![BTreeMap::new(); order],
        })
    }

    /// Sentence-start padding symbol (one past the last vocabulary id).
    pub fn bos(&self) -> TokenId {
        self.vocab.size() as TokenId
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> &SmoothingParams {
        &self.smoothing
    }

    fn add(&mut self, context: &[TokenId], token: TokenId, count: u64) {
        let v = self.vocab.size();
        let entry = self.tables[context.len()]
            .entry(context.to_vec())
            .or_insert_with(|| ContextCounts {
                total: 0,
                counts: vec![0; v],
            });
        entry.total += count;
        entry.counts[token as usize] += count;
    }

    /// Rebuilds a model from `(context, token, count)` triples as produced by
    /// [`NGramLM::count_triples`].
    pub fn from_counts(
        vocab: Vocab,
        order: usize,
        smoothing: SmoothingParams,
        triples: impl IntoIterator<Item = (Vec<TokenId>, TokenId, u64)>,
    ) -> Result<Self> {
        let mut lm = NGramLM::empty(vocab, order, smoothing)?;
        let bos = lm.bos();
        for (context, token, count) in triples {
            if context.len() >= order {
                return Err(Error::InvalidLm(format!(
                    "context of length {} in an order-{order} model",
                    context.len()
                )));
            }
            if token as usize >= lm.vocab.size() || context.iter().any(|&c| c > bos) {
                return Err(Error::InvalidLm("count triple references unknown token".into()));
            }
            lm.add(&context, token, count);
        }
        Ok(lm)
    }

    /// All stored counts as `(context, token, count)`, sorted by context length,
    /// then context, then token.
    pub fn count_triples(&self) -> Vec<(Vec<TokenId>, TokenId, u64)> {
        let mut out = Vec::new();
        for table in &self.tables {
            for (ctx, cc) in table {
                for (t, &c) in cc.counts.iter().enumerate() {
                    if c > 0 {
                        out.push((ctx.clone(), t as TokenId, c));
                    }
                }
            }
        }
        out
    }

    /// Padded history of length `order - 1` for the next position.
    fn history(&self, context: &[TokenId]) -> Vec<TokenId> {
        let need = self.order - 1;
        let mut h = vec![self.bos(); need.saturating_sub(context.len())];
        h.extend_from_slice(&context[context.len().saturating_sub(need)..]);
        h
    }
}

/// Fits an interpolated model on the first `⌈fraction · |corpus|⌉` sentences.
pub fn train_lm(
    corpus: &[TokenSeq],
    vocab: &Vocab,
    order: usize,
    smoothing: &SmoothingParams,
    fraction: f64,
) -> Result<NGramLM> {
    if corpus.is_empty() {
        return Err(Error::InvalidLm("training corpus is empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidLm(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut lm = NGramLM::empty(vocab.clone(), order, smoothing.clone())?;
    let n = libm::ceil(fraction * corpus.len() as f64) as usize;
    let n = n.clamp(1, corpus.len());
    for y in &corpus[..n] {
        let ids = y.ids();
        for i in 0..ids.len() {
            let h = lm.history(&ids[..i]);
            for j in 0..order {
                lm.add(&h[h.len() - j..], ids[i], 1);
            }
        }
    }
    Ok(lm)
}

impl LanguageModel for NGramLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn log_prob_next(&self, context: &[TokenId], next: TokenId) -> f64 {
        let v = self.vocab.size() as f64;
        let k = self.smoothing.add_k;
        let h = self.history(context);
        let mut p = 0.0;
        for j in 0..self.order {
            let est = match self.tables[j].get(&h[h.len() - j..]) {
                Some(cc) => (cc.counts[next as usize] as f64 + k) / (cc.total as f64 + k * v),
                None => 1.0 / v,
            };
            p += self.smoothing.weights[j] * est;
        }
        libm::log(p)
    }

    fn next_log_probs(&self, context: &[TokenId]) -> Vec<f64> {
        let size = self.vocab.size();
        let v = size as f64;
        let k = self.smoothing.add_k;
        let h = self.history(context);
        let mut p = vec![0.0; size];
        for j in 0..self.order {
            let w = self.smoothing.weights[j];
            match self.tables[j].get(&h[h.len() - j..]) {
                Some(cc) => {
                    let denom = cc.total as f64 + k * v;
                    for (slot, &c) in p.iter_mut().zip(&cc.counts) {
                        *slot += w * (c as f64 + k) / denom;
                    }
                }
                None => p.iter_mut().for_each(|slot| *slot += w / v),
            }
        }
        p.into_iter().map(libm::log).collect()
    }
}

/// `log p_y(y)` including the EOS term.
pub fn lm_log_prob<P: LanguageModel + ?Sized>(lm: &P, y: &TokenSeq) -> f64 {
    lm.sequence_log_prob(y)
}

/// `exp(-Σ log p(y) / Σ (len(y) + 1))`, counting EOS as a token.
pub fn token_perplexity<P: LanguageModel + ?Sized>(lm: &P, corpus: &[TokenSeq]) -> f64 {
    let mut logp = 0.0;
    let mut tokens = 0usize;
    for y in corpus {
        logp += lm.sequence_log_prob(y);
        tokens += y.ids().len();
    }
    libm::exp(-logp / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synth::{LmShape, TrueLM};

    fn corpus_from(vocab: &Vocab, lm: &TrueLM, n: usize, seed: u64) -> Vec<TokenSeq> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        while out.len() < n {
            if let Some((y, _)) = lm.sample(12, &mut rng) {
                out.push(y);
            }
        }
        let _ = vocab;
        out
    }

    #[test]
    fn single_sentence_unigram() {
        let vocab = Vocab::synthetic(1);
        let y = TokenSeq::from_content(&[0], &vocab).unwrap();
        let s = SmoothingParams {
            add_k: 1e-12,
            weights: vec![1.0],
        };
        let lm = train_lm(&[y], &vocab, 1, &s, 1.0).unwrap();
        assert!((libm::exp(lm.log_prob_next(&[], 0)) - 0.5).abs() < 1e-12);
        assert!((libm::exp(lm.log_prob_next(&[0], 1)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn order_zero_rejected() {
        let vocab = Vocab::synthetic(2);
        let y = TokenSeq::from_content(&[0], &vocab).unwrap();
        let s = SmoothingParams {
            add_k: 0.1,
            weights: vec![],
        };
        assert!(matches!(train_lm(&[y], &vocab, 0, &s, 1.0), Err(Error::InvalidLm(_))));
    }

    #[test]
    fn uniform_unigram_identities() {
        // With no data every context is unseen and the model is uniform.
        let vocab = Vocab::synthetic(4);
        let lm = NGramLM::empty(vocab.clone(), 1, SmoothingParams::default_for(1)).unwrap();
        let y = TokenSeq::from_content(&[0, 3, 2], &vocab).unwrap();
        let expected = 4.0 * libm::log(1.0 / 5.0);
        assert!((lm_log_prob(&lm, &y) - expected).abs() < 1e-12);
        assert!((token_perplexity(&lm, &[y]) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rows_normalize_and_are_positive() {
        let vocab = Vocab::synthetic(6);
        let g = TrueLM::random(vocab.clone(), &LmShape { branching: 2, ..Default::default() }, &mut Rng::new(3)).unwrap();
        let corpus = corpus_from(&vocab, &g, 300, 4);
        let lm = train_lm(&corpus, &vocab, 3, &SmoothingParams::default_for(3), 1.0).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let len = rng.below(4);
            let ctx: Vec<TokenId> = (0..len).map(|_| rng.below(6) as TokenId).collect();
            let row = lm.next_log_probs(&ctx);
            let total: f64 = row.iter().map(|l| libm::exp(*l)).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|l| l.is_finite()));
            for (t, &l) in row.iter().enumerate() {
                assert!((l - lm.log_prob_next(&ctx, t as TokenId)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_round_trip() {
        let vocab = Vocab::synthetic(5);
        let g = TrueLM::random(vocab.clone(), &LmShape { branching: 2, ..Default::default() }, &mut Rng::new(1)).unwrap();
        let corpus = corpus_from(&vocab, &g, 50, 2);
        let lm = train_lm(&corpus, &vocab, 3, &SmoothingParams::default_for(3), 1.0).unwrap();
        let rebuilt = NGramLM::from_counts(vocab, 3, lm.smoothing().clone(), lm.count_triples()).unwrap();
        assert_eq!(lm, rebuilt);
    }

    #[test]
    fn fraction_uses_prefix() {
        let vocab = Vocab::synthetic(5);
        let g = TrueLM::random(vocab.clone(), &LmShape { branching: 2, ..Default::default() }, &mut Rng::new(1)).unwrap();
        let corpus = corpus_from(&vocab, &g, 40, 2);
        let s = SmoothingParams::default_for(2);
        let a = train_lm(&corpus, &vocab, 2, &s, 0.25).unwrap();
        let b = train_lm(&corpus[..10], &vocab, 2, &s, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(train_lm(&corpus, &vocab, 2, &s, 0.0).is_err());
        assert!(train_lm(&[], &vocab, 2, &s, 1.0).is_err());
    }
}
