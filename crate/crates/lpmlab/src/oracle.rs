//! Brute-force checks of the local prior and beam search on instances small
//! enough to enumerate.

use anyhow::{ensure, Result};
use lpmlab_core::decode::{beam_search, Beam, Hypothesis, LengthFilter};
use lpmlab_core::objectives::local_prior;
use lpmlab_core::seq2seq::{step_distribution, ModelConfig, ParamVector};
use lpmlab_core::synth::{channel_log_likelihood, exact_posterior, Channel, LmShape, TrueLM};
use lpmlab_core::{Rng, TokenId, TokenSeq, Utterance, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Tokens 0 and 1 share their duration and emission rows, so swapping one
/// for the other never changes the channel likelihood.
fn twin_channel() -> Result<Channel> {
    let durations = vec![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0]];
    let emissions = vec![
        vec![0.6, 0.3, 0.1, 0.0],
        vec![0.6, 0.3, 0.1, 0.0],
        vec![0.1, 0.2, 0.7, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ];
    Ok(Channel::from_tables(durations, emissions)?)
}

fn hyp(tokens: TokenSeq) -> Hypothesis {
    Hypothesis {
        tokens,
        asr_logp: 0.0,
        lm_logp: None,
        score: 0.0,
        finished: true,
    }
}

/// Every transcript obtained from `content` by swapping twin tokens.
fn twin_variants(content: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for &t in content {
        let opts: &[TokenId] = if t < 2 { &[0, 1] } else { &[t] };
        out = out
            .into_iter()
            .flat_map(|p| {
                opts.iter().map(move |&o| {
                    let mut q = p.clone();
                    q.push(o);
                    q
                })
            })
            .collect();
    }
    out
}

/// Local prior under the generating LM against the exact posterior
/// restricted to a beam of equally likely (under the channel) transcripts.
pub fn posterior_equivalence(seed: u64) -> Result<f64> {
    const MAX_LEN: usize = 4;
    let vocab = Vocab::synthetic(3);
    let root = Rng::new(seed);
    let shape = LmShape {
        branching: 2,
        branch_mass: 0.7,
        eos_prob: 0.3,
        start_eos_prob: 0.05,
    };
    let lm = TrueLM::random(vocab.clone(), &shape, &mut root.derive(1))?;
    let channel = twin_channel()?;
    let mut rng = root.derive(2);
    let y = loop {
        match lm.sample(3, &mut rng) {
            Some((y, _)) if y.content().iter().any(|&t| t < 2) => break y,
            _ => continue,
        }
    };
    let x = Utterance::new("oracle", channel.sample_frames(&y, &mut rng), None)?;
    let mut hyps = Vec::new();
    for c in twin_variants(y.content()) {
        hyps.push(hyp(TokenSeq::from_content(&c, &vocab)?));
    }
    let k = hyps.len();
    let beam = Beam { hyps, k };
    let ll0 = channel_log_likelihood(&x, &beam.hyps[0].tokens, &channel);
    ensure!(ll0.is_finite(), "oracle instance has zero channel likelihood");
    for h in &beam.hyps {
        ensure!(
            (channel_log_likelihood(&x, &h.tokens, &channel) - ll0).abs() < 1e-12,
            "beam members differ in channel likelihood"
        );
    }
    let post = exact_posterior(&x, &lm, &channel, MAX_LEN)?;
    let mass: f64 = beam.hyps.iter().map(|h| post[&h.tokens]).sum();
    let targets = local_prior(&beam, &lm, y.len(), &LengthFilter::default())?;
    ensure!(targets.items.len() == beam.hyps.len(), "length filter dropped a hypothesis");
    Ok(targets
        .items
        .iter()
        .map(|(y, w)| (w - post[y] / mass).abs())
        .fold(0.0, f64::max))
}

fn tiny_model(seed: u64) -> Result<ParamVector> {
    let cfg = ModelConfig {
        embed_dim: 3,
        encoder_hidden: 4,
        decoder_hidden: 4,
        attention_dim: 3,
        vocab: Vocab::synthetic(3),
        obs_alphabet_size: 6,
        label_smoothing: 0.0,
    };
    let mut p = ParamVector::init(&cfg, &mut Rng::new(seed))?;
    p.scale(4.0);
    Ok(p)
}

/// Scores every sequence reachable within `max_steps` by explicit rollout.
fn universe(p: &ParamVector, x: &Utterance, max_steps: usize) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let vocab = p.config().vocab.clone();
    let eos = vocab.eos_id();
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<TokenId>::new(), 0.0)];
    for step in 0..max_steps {
        let mut next = Vec::new();
        for (prefix, s) in &frontier {
            let logp = step_distribution(p, x, prefix)?;
            let mut fin = prefix.clone();
            fin.push(eos);
            out.push((fin, s + logp[eos as usize]));
            for t in vocab.content_ids() {
                let mut ext = prefix.clone();
                ext.push(t);
                next.push((ext, s + logp[t as usize]));
            }
        }
        frontier = next;
        if step + 1 == max_steps {
            for (mut c, s) in frontier.drain(..) {
                c.push(eos);
                out.push((c, s));
            }
        }
    }
    Ok(out)
}

/// A beam as wide as the whole sequence space must return it exactly, in
/// score order.
pub fn exhaustive_beam(seed: u64) -> Result<f64> {
    const MAX_STEPS: usize = 3;
    let p = tiny_model(seed)?;
    let mut rng = Rng::new(seed).derive(7);
    let frames: Vec<u32> = (0..4).map(|_| rng.below(6) as u32).collect();
    let x = Utterance::new("oracle", frames, None)?;
    let mut all = universe(&p, &x, MAX_STEPS)?;
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let beam = beam_search(&p, &x, all.len(), MAX_STEPS, None)?;
    ensure!(beam.hyps.len() == all.len(), "beam returned {} of {} sequences", beam.hyps.len(), all.len());
    let mut err = 0.0f64;
    for (h, (ids, s)) in beam.hyps.iter().zip(&all) {
        ensure!(h.tokens.ids() == &ids[..], "beam order differs from exhaustive order");
        err = err.max((h.asr_logp - s).abs());
    }
    Ok(err)
}

/// The full suite over `seeds` seeds.
pub fn run_suite(seeds: u64) -> Result<Vec<OracleResult>> {
    let mut post = 0.0f64;
    let mut beam = 0.0f64;
    for s in 0..seeds {
        post = post.max(posterior_equivalence(s)?);
        beam = beam.max(exhaustive_beam(s)?);
    }
    Ok(vec![
        OracleResult {
            name: "local prior equals restricted posterior".into(),
            max_abs_error: post,
            tolerance: 1e-9,
        },
        OracleResult {
            name: "exhaustive beam equals enumeration".into(),
            max_abs_error: beam,
            tolerance: 1e-10,
        },
    ])
}
