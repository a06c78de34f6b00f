//! Beam search over pluggable token scorers and joint context-free /
//! context-conditioned decoding.
//!
//! The joint merge rule here is one concrete instantiation: decode under
//! both prompts, pool the finished hypotheses, re-score every pooled
//! hypothesis under *both* prompts, and rank by the larger of the two
//! normalized scores (context-free wins ties). It is swappable behind
//! [`MergeStrategy`].

pub mod scorers;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = String;

/// End-of-sequence marker shared by the bundled scorers.
pub const EOS_TOKEN: &str = "</s>";

/// A conditional next-token distribution provider. Implementations must be
/// deterministic and thread-safe; returned log-probabilities must
/// exponentiate-sum to 1 (+-1e-6) over the vocabulary, with omitted tokens
/// carrying zero probability.
pub trait TokenScorer: Send + Sync {
    fn next_log_probs(&self, prompt: &str, audio_key: &str, prefix: &[Token]) -> BTreeMap<Token, f64>;
    fn vocab(&self) -> &[Token];
    fn eos_token(&self) -> &str {
        EOS_TOKEN
    }
}

/// Which prompt produced a hypothesis during joint decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisSource {
    ContextFree,
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, including the end-of-sequence token when finished.
    pub tokens: Vec<Token>,
    /// Sum of the per-step log-probabilities of `tokens`.
    pub log_score: f64,
    pub source: HypothesisSource,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_score: 0.0,
            source: HypothesisSource::ContextFree,
            finished: false,
        }
    }

    /// Length-normalized score: `log_score / len^alpha`.
    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.log_score / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }

    /// Tokens joined for metric computation, without the EOS marker.
    pub fn text(&self, eos: &str) -> String {
        let tokens: Vec<&str> = self
            .tokens
            .iter()
            .filter(|t| t.as_str() != eos)
            .map(|t| t.as_str())
            .collect();
        tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Length-normalization exponent alpha; 0 ranks by raw log score.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 4,
            max_len: 16,
            length_penalty: 0.6,
        }
    }
}

impl BeamConfig {
    fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidBeamConfig("beam_width must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidBeamConfig("max_len must be >= 1"));
        }
        if !(self.length_penalty.is_finite() && self.length_penalty >= 0.0) {
            return Err(Error::InvalidBeamConfig(
                "length_penalty must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn validated_dist(
    scorer: &dyn TokenScorer,
    vocab: &BTreeSet<&str>,
    prompt: &str,
    audio_key: &str,
    prefix: &[Token],
) -> Result<BTreeMap<Token, f64>> {
    let dist = scorer.next_log_probs(prompt, audio_key, prefix);
    let mut sum = 0.0f64;
    for (token, lp) in &dist {
        if !vocab.contains(token.as_str()) {
            return Err(Error::TokenOutsideVocab(token.clone()));
        }
        if lp.is_nan() {
            return Err(Error::NonFinite("scorer log-probability"));
        }
        sum += lp.exp();
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::UnnormalizedScorer {
            prompt: prompt.to_string(),
            sum,
        });
    }
    Ok(dist)
}

/// Ties on equal scores break by lexicographic token order.
fn rank_hypotheses(hyps: &mut [Hypothesis], key: impl Fn(&Hypothesis) -> f64) {
    hyps.sort_by(|a, b| {
        key(b)
            .total_cmp(&key(a))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Standard breadth-first beam search.
///
/// Each live hypothesis expands over every token with nonzero probability;
/// the global top `beam_width` by raw log score stay live, EOS-terminated
/// ones retire to a finished pool, and the search stops when nothing is
/// live or `max_len` steps have run (leftover live hypotheses are returned
/// unfinished). The final list is ranked by length-normalized score.
pub fn beam_search(
    scorer: &dyn TokenScorer,
    prompt: &str,
    audio_key: &str,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab: BTreeSet<&str> = scorer.vocab().iter().map(|t| t.as_str()).collect();
    let eos = scorer.eos_token();
    let mut live = vec![Hypothesis::empty()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let dist = validated_dist(scorer, &vocab, prompt, audio_key, &hyp.tokens)?;
            for (token, lp) in dist {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = hyp.clone();
                next.tokens.push(token.clone());
                next.log_score += lp;
                if token == eos {
                    next.finished = true;
                    finished.push(next);
                } else {
                    candidates.push(next);
                }
            }
        }
        rank_hypotheses(&mut candidates, |h| h.log_score);
        candidates.truncate(cfg.beam_width);
        live = candidates;
    }
    finished.extend(live);
    rank_hypotheses(&mut finished, |h| h.normalized_score(cfg.length_penalty));
    finished.truncate(cfg.beam_width);
    Ok(finished)
}

/// Recomputes the log score of a token sequence step by step under the
/// given prompt. Tokens the scorer assigns zero probability contribute
/// negative infinity.
pub fn rescore(
    scorer: &dyn TokenScorer,
    prompt: &str,
    audio_key: &str,
    tokens: &[Token],
) -> Result<f64> {
    let vocab: BTreeSet<&str> = scorer.vocab().iter().map(|t| t.as_str()).collect();
    let mut total = 0.0f64;
    for i in 0..tokens.len() {
        let dist = validated_dist(scorer, &vocab, prompt, audio_key, &tokens[..i])?;
        total += dist.get(&tokens[i]).copied().unwrap_or(f64::NEG_INFINITY);
    }
    Ok(total)
}

/// A pooled hypothesis with its normalized re-scores under both prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct RescoredHypothesis {
    pub hypothesis: Hypothesis,
    pub context_free_score: f64,
    pub biased_score: f64,
}

impl RescoredHypothesis {
    pub fn max_score(&self) -> f64 {
        self.context_free_score.max(self.biased_score)
    }
}

/// How joint decoding picks the winner from the pooled, re-scored
/// hypotheses.
pub trait MergeStrategy {
    fn select(&self, pooled: &[RescoredHypothesis]) -> usize;
}

/// Default rule: rank by the larger of the two normalized scores;
/// context-free sources win ties, then lexicographic token order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxEitherPrompt;

impl MergeStrategy for MaxEitherPrompt {
    fn select(&self, pooled: &[RescoredHypothesis]) -> usize {
        let mut best = 0;
        for i in 1..pooled.len() {
            let (a, b) = (&pooled[i], &pooled[best]);
            let better = match a.max_score().total_cmp(&b.max_score()) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => match (a.hypothesis.source, b.hypothesis.source) {
                    (HypothesisSource::ContextFree, HypothesisSource::Biased) => true,
                    (HypothesisSource::Biased, HypothesisSource::ContextFree) => false,
                    _ => a.hypothesis.tokens < b.hypothesis.tokens,
                },
            };
            if better {
                best = i;
            }
        }
        best
    }
}

/// Joint decoding: beam search under the context-free and biased prompts
/// independently, pool both hypothesis lists with source tags, re-score
/// everything under both prompts, and let the merge strategy pick the
/// winner.
pub fn joint_beam_search(
    scorer: &dyn TokenScorer,
    free_prompt: &str,
    biased_prompt: &str,
    audio_key: &str,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    joint_beam_search_with(scorer, free_prompt, biased_prompt, audio_key, cfg, &MaxEitherPrompt)
}

pub fn joint_beam_search_with(
    scorer: &dyn TokenScorer,
    free_prompt: &str,
    biased_prompt: &str,
    audio_key: &str,
    cfg: &BeamConfig,
    strategy: &dyn MergeStrategy,
) -> Result<Hypothesis> {
    let free_list = beam_search(scorer, free_prompt, audio_key, cfg)?;
    let biased_list = beam_search(scorer, biased_prompt, audio_key, cfg)?;
    let mut pooled = Vec::with_capacity(free_list.len() + biased_list.len());
    for (list, source) in [
        (free_list, HypothesisSource::ContextFree),
        (biased_list, HypothesisSource::Biased),
    ] {
        for mut hyp in list {
            hyp.source = source;
            let denom = (hyp.tokens.len().max(1) as f64).powf(cfg.length_penalty);
            let free = rescore(scorer, free_prompt, audio_key, &hyp.tokens)? / denom;
            let biased = rescore(scorer, biased_prompt, audio_key, &hyp.tokens)? / denom;
            pooled.push(RescoredHypothesis {
                hypothesis: hyp,
                context_free_score: free,
                biased_score: biased,
            });
        }
    }
    if pooled.is_empty() {
        return Err(Error::EmptyInput("pooled hypotheses"));
    }
    let winner = strategy.select(&pooled);
    Ok(pooled.swap_remove(winner).hypothesis)
}

#[cfg(test)]
mod tests {
    use super::scorers::{EchoScorer, NgramScorer, TableScorerBuilder};
    use super::*;
    use crate::prompt::build_prompt;

    /// Explicit per-prefix distributions; prompt- and audio-agnostic.
    struct EnumScorer {
        vocab: Vec<Token>,
        dists: BTreeMap<Vec<Token>, BTreeMap<Token, f64>>,
    }

    impl TokenScorer for EnumScorer {
        fn next_log_probs(&self, _p: &str, _a: &str, prefix: &[Token]) -> BTreeMap<Token, f64> {
            self.dists
                .get(prefix)
                .cloned()
                .unwrap_or_else(|| BTreeMap::from([(EOS_TOKEN.to_string(), 0.0)]))
        }

        fn vocab(&self) -> &[Token] {
            &self.vocab
        }
    }

    fn tokens(ts: &[&str]) -> Vec<Token> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn beam_one_is_greedy() {
        // Deterministic preference chain a -> b -> EOS.
        let mut dists = BTreeMap::new();
        dists.insert(
            tokens(&[]),
            BTreeMap::from([("a".into(), (0.7f64).ln()), ("b".into(), (0.3f64).ln())]),
        );
        dists.insert(
            tokens(&["a"]),
            BTreeMap::from([("b".into(), (0.9f64).ln()), ("a".into(), (0.1f64).ln())]),
        );
        dists.insert(
            tokens(&["a", "b"]),
            BTreeMap::from([(EOS_TOKEN.into(), 0.0f64)]),
        );
        dists.insert(
            tokens(&["b"]),
            BTreeMap::from([(EOS_TOKEN.into(), 0.0f64)]),
        );
        dists.insert(
            tokens(&["a", "a"]),
            BTreeMap::from([(EOS_TOKEN.into(), 0.0f64)]),
        );
        let scorer = EnumScorer {
            vocab: tokens(&["a", "b", EOS_TOKEN]),
            dists,
        };
        let cfg = BeamConfig {
            beam_width: 1,
            max_len: 8,
            length_penalty: 0.0,
        };
        let out = beam_search(&scorer, "", "", &cfg).unwrap();
        assert_eq!(out[0].tokens, tokens(&["a", "b", EOS_TOKEN]));
        assert!(out[0].finished);
    }

    #[test]
    fn alpha_zero_ranks_by_raw_log_score() {
        let hyp = Hypothesis {
            tokens: tokens(&["a", "b", EOS_TOKEN]),
            log_score: -1.5,
            source: HypothesisSource::ContextFree,
            finished: true,
        };
        assert_eq!(hyp.normalized_score(0.0), -1.5);
        assert!(hyp.normalized_score(0.6) > -1.5);
    }

    #[test]
    fn scores_recompute_from_the_scorer() {
        let corpus = vec![
            tokens(&["the", "cat", "sat"]),
            tokens(&["the", "dog", "sat"]),
            tokens(&["a", "cat", "ran"]),
        ];
        let scorer = NgramScorer::from_corpus(&corpus).unwrap();
        let cfg = BeamConfig {
            beam_width: 3,
            max_len: 5,
            length_penalty: 0.6,
        };
        let out = beam_search(&scorer, "", "", &cfg).unwrap();
        assert!(!out.is_empty());
        for hyp in &out {
            let re = rescore(&scorer, "", "", &hyp.tokens).unwrap();
            assert!(
                (re - hyp.log_score).abs() < 1e-12,
                "rescore {re} vs {}",
                hyp.log_score
            );
        }
    }

    #[test]
    fn wider_beams_never_rank_worse() {
        let corpus = vec![
            tokens(&["x", "y", "z"]),
            tokens(&["x", "z"]),
            tokens(&["y", "x", "y", "z"]),
        ];
        let scorer = NgramScorer::from_corpus(&corpus).unwrap();
        let mut prev_best = f64::NEG_INFINITY;
        for width in 1..=6 {
            let cfg = BeamConfig {
                beam_width: width,
                max_len: 6,
                length_penalty: 0.6,
            };
            let out = beam_search(&scorer, "", "", &cfg).unwrap();
            let best = out[0].normalized_score(0.6);
            assert!(
                best >= prev_best - 1e-12,
                "beam {width} got {best} < {prev_best}"
            );
            prev_best = best;
        }
    }

    #[test]
    fn joint_degenerate_case_equals_single_search() {
        let corpus = vec![tokens(&["hello", "world"]), tokens(&["hello", "there"])];
        let scorer = NgramScorer::from_corpus(&corpus).unwrap();
        let cfg = BeamConfig::default();
        let single = beam_search(&scorer, "p", "k", &cfg).unwrap();
        let joint = joint_beam_search(&scorer, "p", "p", "k", &cfg).unwrap();
        assert_eq!(joint.tokens, single[0].tokens);
        assert_eq!(joint.log_score, single[0].log_score);
        assert_eq!(joint.source, HypothesisSource::ContextFree);
    }

    #[test]
    fn probability_one_sequence_wins_as_context_free() {
        let table = BTreeMap::from([("k1".to_string(), tokens(&["only", "path"]))]);
        let scorer = EchoScorer::new(table);
        let cfg = BeamConfig::default();
        let joint = joint_beam_search(&scorer, "free", "biased", "k1", &cfg).unwrap();
        assert_eq!(joint.tokens, tokens(&["only", "path", EOS_TOKEN]));
        assert_eq!(joint.source, HypothesisSource::ContextFree);
        assert_eq!(joint.log_score, 0.0);
    }

    #[test]
    fn bias_prompt_enables_hotword_only_on_matching_audio() {
        // A hard keyword decodes correctly only when prompted; on audio
        // without the keyword the free branch dominates.
        let builder = TableScorerBuilder::new(77)
            .vocab_surfaces(["zalbex"])
            .utterance("u-hit", "please play zalbex now", &["zalbex".to_string()])
            .utterance("u-miss", "please play music now", &[]);
        let scorer = builder.build().unwrap();
        let free = build_prompt::<&str>(&[]).unwrap().rendered;
        let biased = build_prompt(&["zalbex"]).unwrap().rendered;
        let cfg = BeamConfig::default();

        let hit = joint_beam_search(&scorer, &free, &biased, "u-hit", &cfg).unwrap();
        assert!(
            hit.text(EOS_TOKEN).contains("zalbex"),
            "prompted decode must recover the keyword: {hit:?}"
        );
        let base = beam_search(&scorer, &free, "u-hit", &cfg).unwrap();
        assert!(
            !base[0].text(EOS_TOKEN).contains("zalbex"),
            "unprompted decode should miss the hard keyword: {base:?}"
        );
        let miss = joint_beam_search(&scorer, &free, &biased, "u-miss", &cfg).unwrap();
        assert!(
            !miss.text(EOS_TOKEN).contains("zalbex"),
            "keyword must not be hallucinated on non-matching audio: {miss:?}"
        );
    }

    #[test]
    fn joint_winner_dominates_both_single_runs() {
        let corpus = vec![
            tokens(&["alpha", "beta"]),
            tokens(&["alpha", "gamma"]),
            tokens(&["beta", "gamma", "alpha"]),
        ];
        let scorer = NgramScorer::from_corpus(&corpus).unwrap();
        let cfg = BeamConfig::default();
        let free = beam_search(&scorer, "f", "k", &cfg).unwrap();
        let biased = beam_search(&scorer, "b", "k", &cfg).unwrap();
        let joint = joint_beam_search(&scorer, "f", "b", "k", &cfg).unwrap();
        let denom = (joint.tokens.len().max(1) as f64).powf(cfg.length_penalty);
        let winner_max = (rescore(&scorer, "f", "k", &joint.tokens).unwrap() / denom)
            .max(rescore(&scorer, "b", "k", &joint.tokens).unwrap() / denom);
        for list in [&free, &biased] {
            assert!(winner_max >= list[0].normalized_score(cfg.length_penalty) - 1e-12);
        }
    }

    #[test]
    fn unnormalized_scorers_are_rejected() {
        struct Bad {
            vocab: Vec<Token>,
        }
        impl TokenScorer for Bad {
            fn next_log_probs(&self, _: &str, _: &str, _: &[Token]) -> BTreeMap<Token, f64> {
                BTreeMap::from([("a".to_string(), -0.1), (EOS_TOKEN.to_string(), -0.1)])
            }
            fn vocab(&self) -> &[Token] {
                &self.vocab
            }
        }
        let scorer = Bad {
            vocab: tokens(&["a", EOS_TOKEN]),
        };
        assert!(matches!(
            beam_search(&scorer, "", "", &BeamConfig::default()),
            Err(Error::UnnormalizedScorer { .. })
        ));
    }

    #[test]
    fn exhaustive_beam_matches_enumeration_on_a_small_vocab() {
        let vocab = tokens(&["a", "b", "c", EOS_TOKEN]);
        let max_len = 3usize;
        let alpha = 0.6f64;
        // Uniform-ish but distinct masses per prefix, built determinically.
        let mut dists = BTreeMap::new();
        let mut stack = vec![tokens(&[])];
        while let Some(prefix) = stack.pop() {
            if prefix.len() >= max_len {
                continue;
            }
            let seedish = prefix.len() as f64 + 1.0;
            let mut weights: Vec<f64> = vec![1.0 * seedish, 2.0, 0.5, 1.5 / seedish];
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            let dist: BTreeMap<Token, f64> = vocab
                .iter()
                .cloned()
                .zip(weights.iter().map(|w| w.ln()))
                .collect();
            dists.insert(prefix.clone(), dist);
            for t in &vocab {
                if t != EOS_TOKEN {
                    let mut next = prefix.clone();
                    next.push(t.clone());
                    stack.push(next);
                }
            }
        }
        let scorer = EnumScorer {
            vocab: vocab.clone(),
            dists,
        };
        let cfg = BeamConfig {
            beam_width: 1000,
            max_len,
            length_penalty: alpha,
        };
        let beam_top = &beam_search(&scorer, "", "", &cfg).unwrap()[0];

        // Enumerate every finished and max-length sequence.
        let non_eos = tokens(&["a", "b", "c"]);
        let mut best: Option<(f64, Vec<Token>)> = None;
        let mut consider = |seq: Vec<Token>| {
            let score = rescore(&scorer, "", "", &seq).unwrap();
            let norm = score / (seq.len().max(1) as f64).powf(alpha);
            let better = match &best {
                None => true,
                Some((s, t)) => norm > *s || (norm == *s && seq < *t),
            };
            if better {
                best = Some((norm, seq));
            }
        };
        let mut frontier = vec![tokens(&[])];
        for _ in 0..max_len {
            let mut next_frontier = Vec::new();
            for prefix in frontier {
                let mut done = prefix.clone();
                done.push(EOS_TOKEN.to_string());
                consider(done);
                if prefix.len() + 1 < max_len {
                    for t in &non_eos {
                        let mut ext = prefix.clone();
                        ext.push(t.clone());
                        next_frontier.push(ext);
                    }
                } else if prefix.len() + 1 == max_len {
                    for t in &non_eos {
                        let mut ext = prefix.clone();
                        ext.push(t.clone());
                        consider(ext);
                    }
                }
            }
            frontier = next_frontier;
        }
        let (best_score, best_tokens) = best.unwrap();
        assert_eq!(beam_top.tokens, best_tokens);
        assert!((beam_top.normalized_score(alpha) - best_score).abs() < 1e-12);
    }
}
