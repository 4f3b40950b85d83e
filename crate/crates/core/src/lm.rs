use crate::types::{TokenId, TokenSeq, Vocab};
use alloc::vec::Vec;

/// A left-to-right prior over token sequences.
///
/// `context` holds the preceding tokens of the sentence without any
/// start padding; implementations supply their own sentence-start state.
pub trait LanguageModel {
    fn vocab(&self) -> &Vocab;

    fn log_prob_next(&self, context: &[TokenId], next: TokenId) -> f64;

    /// Full next-token log distribution, indexed by token id.
    fn next_log_probs(&self, context: &[TokenId]) -> Vec<f64> {
        (0..self.vocab().size() as TokenId)
            .map(|t| self.log_prob_next(context, t))
            .collect()
    }

    /// `Σ_t log p(y_t | y_<t)` including the EOS term.
    fn sequence_log_prob(&self, y: &TokenSeq) -> f64 {
        let ids = y.ids();
        (0..ids.len())
            .map(|i| self.log_prob_next(&ids[..i], ids[i]))
            .sum()
    }
}
