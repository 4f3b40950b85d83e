//! Training targets: supervised cross-entropy, the local prior, uniform
//! distillation over the beam, and fused pseudo-labels.

use crate::decode::{beam_search, length_filter_apply, Beam, Fusion, LengthFilter};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::math::normalize_log_weights;
use crate::ngram::lm_log_prob;
use crate::seq2seq::{score_sequence, LossTerm, ParamVector};
use crate::types::{TokenSeq, Utterance};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Supervised,
    Lpm,
    KdUniform,
    PseudoLabel,
}

/// A distribution over target sequences; weights sum to one unless empty.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTargets {
    pub items: Vec<(TokenSeq, f64)>,
    pub source: TargetSource,
}

impl WeightedTargets {
    pub fn empty(source: TargetSource) -> Self {
        WeightedTargets {
            items: Vec::new(),
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loss terms for `x` with each weight multiplied by `scale`.
    pub fn loss_terms<'a>(&'a self, x: &'a Utterance, scale: f64) -> Vec<LossTerm<'a>> {
        self.items
            .iter()
            .map(|(y, w)| LossTerm {
                x,
                y,
                weight: scale * w,
            })
            .collect()
    }
}

/// Length-filters the beam, scores the survivors with the prior and
/// renormalizes the raw sequence log-probabilities over them. An empty
/// survivor set yields empty targets.
pub fn local_prior<P: LanguageModel + ?Sized>(
    beam: &Beam,
    lm: &P,
    ref_len: usize,
    filter: &LengthFilter,
) -> Result<WeightedTargets> {
    let kept = length_filter_apply(beam, ref_len, filter);
    if kept.is_empty() {
        return Ok(WeightedTargets::empty(TargetSource::Lpm));
    }
    let scores: Vec<f64> = kept.hyps.iter().map(|h| lm_log_prob(lm, &h.tokens)).collect();
    let weights = normalize_log_weights(&scores)?;
    Ok(WeightedTargets {
        items: kept.hyps.into_iter().map(|h| h.tokens).zip(weights).collect(),
        source: TargetSource::Lpm,
    })
}

/// `-Σ_i w_i log q(y_i | x)`; zero for empty targets.
pub fn lpm_loss(params: &ParamVector, x: &Utterance, targets: &WeightedTargets) -> Result<f64> {
    if targets.source != TargetSource::Lpm {
        return Err(Error::InvalidConfig("lpm_loss expects local-prior targets".into()));
    }
    weighted_nll(params, x, targets)
}

/// `-Σ_i w_i log q(y_i | x)` for targets of any source.
pub fn weighted_nll(params: &ParamVector, x: &Utterance, targets: &WeightedTargets) -> Result<f64> {
    let mut total = 0.0;
    for (y, w) in &targets.items {
        total -= w * score_sequence(params, x, y)?;
    }
    Ok(total)
}

/// Mean of `-log q(y | x)` over the batch.
pub fn supervised_loss(params: &ParamVector, batch: &[(&Utterance, &TokenSeq)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("supervised loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (x, y) in batch {
        total -= score_sequence(params, x, y)?;
    }
    Ok(total / batch.len() as f64)
}

/// The top `k_used` beam entries (fewer if the beam is shorter), uniformly
/// weighted. No prior scoring and no length filter.
pub fn kd_uniform_targets(beam: &Beam, k_used: usize) -> Result<WeightedTargets> {
    if k_used == 0 {
        return Err(Error::InvalidConfig("k_used must be at least 1".into()));
    }
    let n = k_used.min(beam.hyps.len());
    if n == 0 {
        return Ok(WeightedTargets::empty(TargetSource::KdUniform));
    }
    let w = 1.0 / n as f64;
    Ok(WeightedTargets {
        items: beam.hyps[..n].iter().map(|h| (h.tokens.clone(), w)).collect(),
        source: TargetSource::KdUniform,
    })
}

/// Top hypothesis of a fused beam search with the (fixed) teacher, weight 1.
pub fn pseudo_label_target<P: LanguageModel>(
    teacher: &ParamVector,
    lm: &P,
    lambda: f64,
    x: &Utterance,
    k: usize,
    max_steps: usize,
) -> Result<WeightedTargets> {
    let beam = beam_search(teacher, x, k, max_steps, Some(Fusion { lm, weight: lambda }))?;
    Ok(match beam.best() {
        Some(h) => WeightedTargets {
            items: vec![(h.tokens.clone(), 1.0)],
            source: TargetSource::PseudoLabel,
        },
        None => WeightedTargets::empty(TargetSource::PseudoLabel),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::Hypothesis;
    use crate::rng::Rng;
    use crate::seq2seq::{gradient, ModelConfig};
    use crate::synth::{channel_log_likelihood, exact_posterior, Channel, TrueLM, MAX_DURATION};
    use crate::types::{TokenId, Vocab};
    use alloc::collections::BTreeMap;

    /// First-token scores from a table, every other step free.
    struct TablePrior {
        vocab: Vocab,
        first: Vec<f64>,
        offset: f64,
    }

    impl LanguageModel for TablePrior {
        fn vocab(&self) -> &Vocab {
            &self.vocab
        }

        fn log_prob_next(&self, context: &[TokenId], next: TokenId) -> f64 {
            if context.is_empty() {
                self.first[next as usize] + self.offset
            } else {
                0.0
            }
        }
    }

    fn hyp(content: &[TokenId], vocab: &Vocab) -> Hypothesis {
        Hypothesis {
            tokens: TokenSeq::from_content(content, vocab).unwrap(),
            asr_logp: -1.0,
            lm_logp: None,
            score: -1.0,
            finished: true,
        }
    }

    fn beam_of(contents: &[&[TokenId]], vocab: &Vocab) -> Beam {
        Beam {
            hyps: contents.iter().map(|c| hyp(c, vocab)).collect(),
            k: contents.len(),
        }
    }

    fn wide() -> LengthFilter {
        LengthFilter::new(1e-9, 1e9).unwrap()
    }

    #[test]
    fn two_survivor_weights() {
        let v = Vocab::synthetic(3);
        let lm = TablePrior {
            vocab: v.clone(),
            first: vec![-1.0, -2.0, -9.0, -9.0],
            offset: 0.0,
        };
        let t = local_prior(&beam_of(&[&[0], &[1]], &v), &lm, 1, &wide()).unwrap();
        assert!((t.items[0].1 - 0.731059).abs() < 1e-6);
        assert!((t.items[1].1 - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn single_survivor_gets_all_mass_and_empty_beam_is_empty() {
        let v = Vocab::synthetic(3);
        let lm = TablePrior {
            vocab: v.clone(),
            first: vec![-1.0; 4],
            offset: 0.0,
        };
        let t = local_prior(&beam_of(&[&[0, 1]], &v), &lm, 2, &LengthFilter::default()).unwrap();
        assert_eq!(t.items.len(), 1);
        assert_eq!(t.items[0].1, 1.0);
        let t = local_prior(&beam_of(&[&[0, 1]], &v), &lm, 9, &LengthFilter::default()).unwrap();
        assert!(t.is_empty());
        let p = ParamVector::zeros(&ModelConfig::new(v.clone(), 3)).unwrap();
        let x = Utterance::new("x", vec![0], None).unwrap();
        assert_eq!(lpm_loss(&p, &x, &t).unwrap(), 0.0);
    }

    #[test]
    fn equal_prior_scores_match_uniform_distillation() {
        let v = Vocab::synthetic(3);
        let lm = TablePrior {
            vocab: v.clone(),
            first: vec![-0.5; 4],
            offset: 0.0,
        };
        let beam = beam_of(&[&[0], &[1], &[2], &[]], &v);
        let lp = local_prior(&beam, &lm, 1, &wide()).unwrap();
        let kd = kd_uniform_targets(&beam, 4).unwrap();
        assert_eq!(lp.items, kd.items);
        assert!(lp.items.iter().all(|(_, w)| *w == 0.25));
    }

    #[test]
    fn kd_boundary_rules() {
        let v = Vocab::synthetic(3);
        let beam = beam_of(&[&[0], &[1]], &v);
        let one = kd_uniform_targets(&beam, 1).unwrap();
        assert_eq!(one.items, vec![(beam.hyps[0].tokens.clone(), 1.0)]);
        let over = kd_uniform_targets(&beam, 5).unwrap();
        assert_eq!(over.items.len(), 2);
        assert!(over.items.iter().all(|(_, w)| *w == 0.5));
        assert!(kd_uniform_targets(&beam, 0).is_err());
        let empty = Beam { hyps: vec![], k: 4 };
        assert!(kd_uniform_targets(&empty, 4).unwrap().is_empty());
    }

    /// Tokens 0 and 1 share one emission and duration row, so any two
    /// transcripts that differ only by swapping them are equally likely
    /// under the channel.
    fn twin_channel() -> Channel {
        let durations = vec![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0]];
        let emissions = vec![
            vec![0.6, 0.3, 0.1, 0.0],
            vec![0.6, 0.3, 0.1, 0.0],
            vec![0.1, 0.2, 0.7, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        assert_eq!(durations[0].len(), MAX_DURATION);
        Channel::from_tables(durations, emissions).unwrap()
    }

    #[test]
    fn local_prior_with_generating_prior_equals_restricted_posterior() {
        let v = Vocab::synthetic(3);
        let lm = TrueLM::from_probs(
            v.clone(),
            vec![
                vec![0.1, 0.5, 0.2, 0.2],
                vec![0.3, 0.1, 0.4, 0.2],
                vec![0.25, 0.25, 0.1, 0.4],
                vec![0.5, 0.2, 0.25, 0.05],
            ],
        )
        .unwrap();
        let channel = twin_channel();
        let x = Utterance::new("x", vec![0, 1, 2, 2, 0, 3], None).unwrap();
        let contents: [&[TokenId]; 4] = [&[0, 2, 0], &[1, 2, 0], &[0, 2, 1], &[1, 2, 1]];
        let beam = beam_of(&contents, &v);
        let ll: Vec<f64> = beam
            .hyps
            .iter()
            .map(|h| channel_log_likelihood(&x, &h.tokens, &channel))
            .collect();
        assert!(ll[0].is_finite());
        assert!(ll.iter().all(|l| (l - ll[0]).abs() < 1e-12));

        let post: BTreeMap<TokenSeq, f64> = exact_posterior(&x, &lm, &channel, 4).unwrap();
        let mass: f64 = beam.hyps.iter().map(|h| post[&h.tokens]).sum();
        let t = local_prior(&beam, &lm, 3, &wide()).unwrap();
        for (y, w) in &t.items {
            assert!((w - post[y] / mass).abs() < 1e-9);
        }
    }

    fn small_model(seed: u64) -> ParamVector {
        let cfg = ModelConfig {
            embed_dim: 3,
            encoder_hidden: 3,
            decoder_hidden: 3,
            attention_dim: 2,
            vocab: Vocab::synthetic(3),
            obs_alphabet_size: 4,
            label_smoothing: 0.0,
        };
        let mut p = ParamVector::init(&cfg, &mut Rng::new(seed)).unwrap();
        p.scale(5.0);
        p
    }

    #[test]
    fn lpm_loss_is_weighted_nll_and_positive() {
        let v = Vocab::synthetic(3);
        let p = small_model(1);
        let x = Utterance::new("x", vec![0, 3, 1], None).unwrap();
        let y1 = TokenSeq::from_content(&[0, 1], &v).unwrap();
        let y2 = TokenSeq::from_content(&[2], &v).unwrap();
        let t = WeightedTargets {
            items: vec![(y1.clone(), 0.5), (y2.clone(), 0.5)],
            source: TargetSource::Lpm,
        };
        let s1 = score_sequence(&p, &x, &y1).unwrap();
        let s2 = score_sequence(&p, &x, &y2).unwrap();
        let l = lpm_loss(&p, &x, &t).unwrap();
        assert!((l - (-0.5 * s1 - 0.5 * s2)).abs() < 1e-12);
        assert!(l > 0.0);
    }

    #[test]
    fn lpm_gradient_is_weighted_sum_of_target_gradients() {
        let v = Vocab::synthetic(3);
        let p = small_model(2);
        let x = Utterance::new("x", vec![2, 2, 1, 0], None).unwrap();
        let ys: Vec<TokenSeq> = [[0u32].as_slice(), &[1, 2], &[2, 2, 0]]
            .iter()
            .map(|c| TokenSeq::from_content(c, &v).unwrap())
            .collect();
        let ws = [0.2, 0.5, 0.3];
        let t = WeightedTargets {
            items: ys.iter().cloned().zip(ws).collect(),
            source: TargetSource::Lpm,
        };
        let joint = gradient(&p, &t.loss_terms(&x, 1.0)).unwrap();
        let mut sum = ParamVector::zeros(p.config()).unwrap();
        for (y, w) in ys.iter().zip(ws) {
            let g = gradient(&p, &[LossTerm { x: &x, y, weight: 1.0 }]).unwrap();
            sum.add_scaled(&g, w).unwrap();
        }
        for (a, b) in joint.as_slice().iter().zip(sum.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn supervised_loss_matches_lpm_path() {
        let v = Vocab::synthetic(3);
        let p = small_model(3);
        let x1 = Utterance::new("a", vec![1, 2], None).unwrap();
        let x2 = Utterance::new("b", vec![3], None).unwrap();
        let y1 = TokenSeq::from_content(&[0, 0], &v).unwrap();
        let y2 = TokenSeq::from_content(&[], &v).unwrap();
        let sup = supervised_loss(&p, &[(&x1, &y1), (&x2, &y2)]).unwrap();
        let single = |x: &Utterance, y: &TokenSeq| {
            lpm_loss(
                &p,
                x,
                &WeightedTargets {
                    items: vec![(y.clone(), 1.0)],
                    source: TargetSource::Lpm,
                },
            )
            .unwrap()
        };
        assert!((sup - (single(&x1, &y1) + single(&x2, &y2)) / 2.0).abs() < 1e-12);
        let dup = supervised_loss(&p, &[(&x1, &y1), (&x1, &y1)]).unwrap();
        let one = supervised_loss(&p, &[(&x1, &y1)]).unwrap();
        assert!((dup - one).abs() < 1e-12);
    }

    #[test]
    fn width_one_lpm_is_self_training() {
        let v = Vocab::synthetic(3);
        let p = small_model(4);
        let x = Utterance::new("x", vec![0, 1, 2], None).unwrap();
        let beam = beam_search(&p, &x, 1, 6, None).unwrap();
        let lm = TablePrior {
            vocab: v,
            first: vec![-1.3; 4],
            offset: 0.0,
        };
        let t = local_prior(&beam, &lm, beam.hyps[0].tokens.len(), &LengthFilter::default()).unwrap();
        assert_eq!(t.items.len(), 1);
        let y = &beam.hyps[0].tokens;
        assert!((lpm_loss(&p, &x, &t).unwrap() - supervised_loss(&p, &[(&x, y)]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_without_fusion_is_plain_top_one() {
        let v = Vocab::synthetic(3);
        let p = small_model(5);
        let x = Utterance::new("x", vec![3, 1, 1], None).unwrap();
        let lm = TablePrior {
            vocab: v,
            first: vec![-1.0, -3.0, -0.1, -2.0],
            offset: 0.0,
        };
        let t = pseudo_label_target(&p, &lm, 0.0, &x, 3, 6).unwrap();
        let plain = beam_search(&p, &x, 3, 6, None).unwrap();
        assert_eq!(t.items, vec![(plain.hyps[0].tokens.clone(), 1.0)]);
        assert_eq!(t.source, TargetSource::PseudoLabel);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn local_prior_is_shift_invariant(
                first in proptest::collection::vec(-20.0f64..0.0, 4),
                c in -50.0f64..50.0,
            ) {
                let v = Vocab::synthetic(3);
                let beam = beam_of(&[&[0], &[1], &[2]], &v);
                let a = TablePrior { vocab: v.clone(), first: first.clone(), offset: 0.0 };
                let b = TablePrior { vocab: v.clone(), first, offset: c };
                let ta = local_prior(&beam, &a, 1, &wide()).unwrap();
                let tb = local_prior(&beam, &b, 1, &wide()).unwrap();
                let sa: f64 = ta.items.iter().map(|(_, w)| w).sum();
                prop_assert!((sa - 1.0).abs() < 1e-9);
                for ((_, wa), (_, wb)) in ta.items.iter().zip(&tb.items) {
                    prop_assert!((wa - wb).abs() < 1e-12);
                }
            }
        }
    }
}
