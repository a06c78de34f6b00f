//! Desk-scale token scorers: a bias-sensitive acoustic table, a bigram
//! language model, and a lookup echo.

use std::collections::{BTreeMap, BTreeSet};

use crate::decoder::{Token, TokenScorer, EOS_TOKEN};
use crate::embedder::fnv1a64;
use crate::error::{Error, Result};
use crate::prompt::extract_hotwords;
use crate::textmetrics::{normalize, TokenSeq};

const TIER_SALT: u64 = 0x7c3a_91b4_55d2_0e61;
const RECOGNIZE_SALT: u64 = 0x2f8e_d1a7_6b40_93c5;
const SLIP_SALT: u64 = 0x91c0_4eb3_da27_7f19;
const CONFUSION_SALT: u64 = 0x5ba6_30f2_18ce_aa84;

/// How reliably the unprompted base recognizer handles a hotword surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// Always recognized; the kind of word vocabulary filtering removes.
    Easy,
    /// Recognized in some contexts only.
    Medium,
    /// Never recognized without a bias prompt.
    Hard,
}

/// Deterministic per-surface recognizability of the simulated base
/// recognizer. Shared by the bias-sensitive table scorer and the toy
/// filtering oracle so the two stages tell one consistent story.
#[derive(Debug, Clone, Copy)]
pub struct BaseBehavior {
    seed: u64,
}

impl BaseBehavior {
    pub fn new(seed: u64) -> Self {
        BaseBehavior { seed }
    }

    pub fn tier(&self, surface: &str) -> Tier {
        let h = fnv1a64(self.seed ^ TIER_SALT, normalize(surface).as_bytes());
        match h % 10 {
            0..=3 => Tier::Easy,
            4..=6 => Tier::Medium,
            _ => Tier::Hard,
        }
    }

    /// Whether the base recognizer gets `surface` right inside `context`
    /// (an utterance or carrier sentence).
    pub fn recognizes(&self, surface: &str, context: &str) -> bool {
        match self.tier(surface) {
            Tier::Easy => true,
            Tier::Hard => false,
            Tier::Medium => {
                let key = format!("{}\u{1f}{}", normalize(surface), normalize(context));
                fnv1a64(self.seed ^ RECOGNIZE_SALT, key.as_bytes()) & 1 == 0
            }
        }
    }
}

/// Weights shaping the table scorer's conditional distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableScorerParams {
    /// Correct token at an ordinary position.
    pub w_plain: f64,
    /// Keyword token when the prompt lists it.
    pub w_prompted: f64,
    /// Keyword token, unprompted, when the base recognizer knows it.
    pub w_unprompted_hit: f64,
    /// Keyword token, unprompted, when the base recognizer fails.
    pub w_unprompted_miss: f64,
    /// Confusion token at a failed keyword position.
    pub w_confusion: f64,
    /// Residual confusion mass once the keyword is prompted or known.
    pub w_confusion_residual: f64,
    /// Mass each filler floor token carries at every position. The floor
    /// is prompt-independent entropy: without it a context-free decode is
    /// perfectly confident and no prompted hypothesis could outscore it.
    pub w_floor: f64,
    /// Mass added to every prompted hotword at non-matching positions;
    /// models the pull toward hallucinating listed words.
    pub hallucination_boost: f64,
    /// Percentage of ordinary positions where a filler slip outweighs the
    /// correct token, so baseline WER is nonzero.
    pub slip_rate_pct: u64,
}

impl Default for TableScorerParams {
    fn default() -> Self {
        TableScorerParams {
            w_plain: 10.0,
            w_prompted: 12.0,
            w_unprompted_hit: 10.0,
            w_unprompted_miss: 1.5,
            w_confusion: 8.0,
            w_confusion_residual: 0.5,
            w_floor: 0.75,
            hallucination_boost: 0.05,
            slip_rate_pct: 4,
        }
    }
}

const SLIP_TOKENS: [&str; 4] = ["uh", "um", "er", "ah"];
const FLOOR_TOKENS: [&str; 2] = ["uh", "um"];

#[derive(Debug, Clone)]
enum PositionKind {
    Plain { slip: Option<Token> },
    Keyword { surface: String, confusion: Token, recognized: bool },
}

#[derive(Debug, Clone)]
struct TableUtterance {
    reference: Vec<Token>,
    kinds: Vec<PositionKind>,
}

/// A bias-sensitive acoustic table keyed on the overlap between prompt
/// hotwords and the audio content.
///
/// Each known audio key carries its reference token sequence. At a keyword
/// position the correct token dominates only when the keyword is prompted
/// or the base recognizer happens to know it; otherwise a confusion token
/// wins, which is exactly the failure mode bias prompting repairs.
/// Prompted hotwords also get a small boost everywhere else, so irrelevant
/// candidates exert hallucination pressure. Distributions depend on the
/// position alone, not the emitted prefix, and every quantity is a
/// deterministic function of the builder inputs.
///
/// Only single-token keywords get confusion handling; multi-token keywords
/// decode as ordinary text.
#[derive(Debug, Clone)]
pub struct TableScorer {
    vocab: Vec<Token>,
    token_set: BTreeSet<Token>,
    utterances: BTreeMap<String, TableUtterance>,
    params: TableScorerParams,
}

pub struct TableScorerBuilder {
    seed: u64,
    params: TableScorerParams,
    vocab_surfaces: Vec<String>,
    utterances: Vec<(String, String, Vec<String>)>,
}

impl TableScorerBuilder {
    pub fn new(seed: u64) -> Self {
        TableScorerBuilder {
            seed,
            params: TableScorerParams::default(),
            vocab_surfaces: Vec::new(),
            utterances: Vec::new(),
        }
    }

    pub fn params(mut self, params: TableScorerParams) -> Self {
        self.params = params;
        self
    }

    /// Hotword surfaces eligible for hallucination pressure when prompted.
    pub fn vocab_surfaces<I, S>(mut self, surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.vocab_surfaces
            .extend(surfaces.into_iter().map(|s| normalize(s.as_ref())));
        self
    }

    pub fn utterance(mut self, id: impl Into<String>, text: &str, keywords: &[String]) -> Self {
        self.utterances.push((
            id.into(),
            text.to_string(),
            keywords.iter().map(|k| normalize(k)).collect(),
        ));
        self
    }

    pub fn build(self) -> Result<TableScorer> {
        let behavior = BaseBehavior::new(self.seed);
        let mut tokens: BTreeSet<Token> = BTreeSet::new();
        tokens.insert(EOS_TOKEN.to_string());
        for s in &SLIP_TOKENS {
            tokens.insert((*s).to_string());
        }
        for surface in &self.vocab_surfaces {
            let seq = TokenSeq::tokenize(surface);
            if seq.len() == 1 {
                tokens.insert(seq.tokens()[0].clone());
            }
        }
        let mut references = Vec::new();
        let mut keyword_surfaces: BTreeSet<String> = BTreeSet::new();
        for (id, text, keywords) in &self.utterances {
            let seq = TokenSeq::tokenize(text);
            if seq.is_empty() {
                return Err(Error::InvalidUtterance {
                    id: id.clone(),
                    reason: "empty text".into(),
                });
            }
            for t in seq.tokens() {
                tokens.insert(t.clone());
            }
            for kw in keywords {
                if TokenSeq::tokenize(kw).len() == 1 {
                    keyword_surfaces.insert(kw.clone());
                }
            }
            references.push((id.clone(), seq, keywords.clone()));
        }

        // Derive one confusion token per keyword surface: close to the
        // original but never containing (or contained in) any keyword.
        let mut confusions: BTreeMap<String, Token> = BTreeMap::new();
        for surface in &keyword_surfaces {
            let confusion =
                derive_confusion(surface, self.seed, &tokens, &keyword_surfaces)?;
            tokens.insert(confusion.clone());
            confusions.insert(surface.clone(), confusion);
        }

        let mut utterances = BTreeMap::new();
        for (id, seq, keywords) in references {
            let single_token_keywords: BTreeSet<&String> = keywords
                .iter()
                .filter(|k| confusions.contains_key(*k))
                .collect();
            let mut kinds = Vec::with_capacity(seq.len());
            for (pos, token) in seq.tokens().iter().enumerate() {
                if single_token_keywords.contains(token) {
                    kinds.push(PositionKind::Keyword {
                        surface: token.clone(),
                        confusion: confusions[token].clone(),
                        recognized: behavior.recognizes(token, &seq.as_text()),
                    });
                } else {
                    let h = fnv1a64(
                        self.seed ^ SLIP_SALT,
                        format!("{id}\u{1f}{pos}").as_bytes(),
                    );
                    let slip = (h % 100 < self.params.slip_rate_pct)
                        .then(|| SLIP_TOKENS[(h / 100) as usize % SLIP_TOKENS.len()].to_string())
                        .filter(|s| s != token);
                    kinds.push(PositionKind::Plain { slip });
                }
            }
            utterances.insert(
                id,
                TableUtterance {
                    reference: seq.tokens().to_vec(),
                    kinds,
                },
            );
        }
        Ok(TableScorer {
            vocab: tokens.iter().cloned().collect(),
            token_set: tokens,
            utterances,
            params: self.params,
        })
    }
}

fn derive_confusion(
    surface: &str,
    seed: u64,
    taken: &BTreeSet<Token>,
    keywords: &BTreeSet<String>,
) -> Result<Token> {
    let chars: Vec<char> = surface.chars().collect();
    // Mutate a growing tail of the surface; one swapped character is not
    // enough when another keyword is a prefix of this one.
    for salt in 0u64..128 {
        let mut h = fnv1a64(
            seed ^ CONFUSION_SALT,
            format!("{surface}\u{1f}{salt}").as_bytes(),
        );
        let tail = ((salt / 8) as usize + 1).min(chars.len());
        let mut candidate: String = chars[..chars.len() - tail].iter().collect();
        for _ in 0..tail {
            candidate.push(char::from(b'a' + (h % 26) as u8));
            h = h.rotate_right(7) ^ FNV_SHUFFLE;
        }
        let clashes = candidate == surface
            || taken.contains(&candidate)
            || keywords
                .iter()
                .any(|k| candidate.contains(k.as_str()) || k.contains(&candidate));
        if !clashes {
            return Ok(candidate);
        }
    }
    Err(Error::Config(format!(
        "could not derive a confusion token for {surface:?}"
    )))
}

const FNV_SHUFFLE: u64 = 0x3d67_9c2b_e1a5_48f7;

impl TableScorer {
    fn weights_to_logs(weights: BTreeMap<Token, f64>) -> BTreeMap<Token, f64> {
        let total: f64 = weights.values().sum();
        weights
            .into_iter()
            .map(|(t, w)| (t, (w / total).ln()))
            .collect()
    }
}

impl TokenScorer for TableScorer {
    fn next_log_probs(&self, prompt: &str, audio_key: &str, prefix: &[Token]) -> BTreeMap<Token, f64> {
        let Some(utt) = self.utterances.get(audio_key) else {
            return BTreeMap::from([(EOS_TOKEN.to_string(), 0.0)]);
        };
        let pos = prefix.len();
        if pos >= utt.reference.len() {
            return BTreeMap::from([(EOS_TOKEN.to_string(), 0.0)]);
        }
        let prompted: BTreeSet<String> = extract_hotwords(prompt).into_iter().collect();
        let target = &utt.reference[pos];
        let mut weights: BTreeMap<Token, f64> = BTreeMap::new();
        for floor in FLOOR_TOKENS {
            weights.insert(floor.to_string(), self.params.w_floor);
        }
        match &utt.kinds[pos] {
            PositionKind::Plain { slip } => {
                weights.insert(target.clone(), self.params.w_plain);
                if let Some(slip) = slip {
                    weights.insert(slip.clone(), self.params.w_plain + 1.0);
                }
            }
            PositionKind::Keyword {
                surface,
                confusion,
                recognized,
            } => {
                let (w_target, w_conf) = if prompted.contains(surface) {
                    (self.params.w_prompted, self.params.w_confusion_residual)
                } else if *recognized {
                    (self.params.w_unprompted_hit, self.params.w_confusion_residual)
                } else {
                    (self.params.w_unprompted_miss, self.params.w_confusion)
                };
                weights.insert(target.clone(), w_target);
                weights.insert(confusion.clone(), w_conf);
            }
        }
        for hotword in &prompted {
            if hotword != target && self.token_set.contains(hotword) {
                *weights.entry(hotword.clone()).or_insert(0.0) += self.params.hallucination_boost;
            }
        }
        Self::weights_to_logs(weights)
    }

    fn vocab(&self) -> &[Token] {
        &self.vocab
    }
}

/// Bigram language model with add-one smoothing over a token corpus.
/// Ignores the prompt and audio key entirely (it is a pure LM).
#[derive(Debug, Clone)]
pub struct NgramScorer {
    vocab: Vec<Token>,
    // Context None is beginning-of-sequence.
    counts: BTreeMap<Option<Token>, BTreeMap<Token, usize>>,
    totals: BTreeMap<Option<Token>, usize>,
}

impl NgramScorer {
    pub fn from_corpus(corpus: &[Vec<Token>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("corpus"));
        }
        let mut vocab: BTreeSet<Token> = BTreeSet::new();
        vocab.insert(EOS_TOKEN.to_string());
        let mut counts: BTreeMap<Option<Token>, BTreeMap<Token, usize>> = BTreeMap::new();
        let mut totals: BTreeMap<Option<Token>, usize> = BTreeMap::new();
        for seq in corpus {
            let mut ctx: Option<Token> = None;
            for token in seq.iter().chain(std::iter::once(&EOS_TOKEN.to_string())) {
                if token.as_str() != EOS_TOKEN {
                    vocab.insert(token.clone());
                }
                *counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(token.clone())
                    .or_insert(0) += 1;
                *totals.entry(ctx.clone()).or_insert(0) += 1;
                ctx = Some(token.clone());
            }
        }
        Ok(NgramScorer {
            vocab: vocab.into_iter().collect(),
            counts,
            totals,
        })
    }
}

impl TokenScorer for NgramScorer {
    fn next_log_probs(&self, _prompt: &str, _audio_key: &str, prefix: &[Token]) -> BTreeMap<Token, f64> {
        let ctx = prefix.last().cloned();
        let empty = BTreeMap::new();
        let ctx_counts = self.counts.get(&ctx).unwrap_or(&empty);
        let total = *self.totals.get(&ctx).unwrap_or(&0);
        let v = self.vocab.len();
        let denom = (total + v) as f64;
        self.vocab
            .iter()
            .map(|t| {
                let c = ctx_counts.get(t).copied().unwrap_or(0);
                (t.clone(), ((c + 1) as f64 / denom).ln())
            })
            .collect()
    }

    fn vocab(&self) -> &[Token] {
        &self.vocab
    }
}

/// Emits exactly the token sequence keyed by the audio key, then EOS, each
/// step with probability one. Unknown keys emit EOS immediately.
#[derive(Debug, Clone)]
pub struct EchoScorer {
    vocab: Vec<Token>,
    table: BTreeMap<String, Vec<Token>>,
}

impl EchoScorer {
    pub fn new(table: BTreeMap<String, Vec<Token>>) -> Self {
        let mut vocab: BTreeSet<Token> = BTreeSet::new();
        vocab.insert(EOS_TOKEN.to_string());
        for seq in table.values() {
            vocab.extend(seq.iter().cloned());
        }
        EchoScorer {
            vocab: vocab.into_iter().collect(),
            table,
        }
    }
}

impl TokenScorer for EchoScorer {
    fn next_log_probs(&self, _prompt: &str, audio_key: &str, prefix: &[Token]) -> BTreeMap<Token, f64> {
        let target = self
            .table
            .get(audio_key)
            .and_then(|seq| seq.get(prefix.len()))
            .cloned()
            .unwrap_or_else(|| EOS_TOKEN.to_string());
        BTreeMap::from([(target, 0.0)])
    }

    fn vocab(&self) -> &[Token] {
        &self.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{beam_search, BeamConfig};
    use crate::prompt::build_prompt;

    #[test]
    fn tiers_and_recognition_are_deterministic() {
        let b = BaseBehavior::new(7);
        for surface in ["zalbex", "morvane", "quentic", "aspirin"] {
            assert_eq!(b.tier(surface), b.tier(surface));
            assert_eq!(
                b.recognizes(surface, "some carrier"),
                b.recognizes(surface, "some carrier")
            );
        }
        // Tier is a function of the seed too.
        let tiers_a: Vec<Tier> = (0..50)
            .map(|i| BaseBehavior::new(7).tier(&format!("word{i}")))
            .collect();
        let tiers_b: Vec<Tier> = (0..50)
            .map(|i| BaseBehavior::new(8).tier(&format!("word{i}")))
            .collect();
        assert_ne!(tiers_a, tiers_b);
    }

    #[test]
    fn table_distributions_are_normalized_everywhere() {
        let scorer = TableScorerBuilder::new(3)
            .vocab_surfaces(["zalbex", "morvane"])
            .utterance("u0", "play zalbex tonight", &["zalbex".to_string()])
            .build()
            .unwrap();
        let prompts = [
            build_prompt::<&str>(&[]).unwrap().rendered,
            build_prompt(&["zalbex"]).unwrap().rendered,
            build_prompt(&["morvane", "zalbex"]).unwrap().rendered,
        ];
        for prompt in &prompts {
            let mut prefix = Vec::new();
            for _ in 0..5 {
                let dist = scorer.next_log_probs(prompt, "u0", &prefix);
                let sum: f64 = dist.values().map(|lp| lp.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-9, "sum {sum} for prefix {prefix:?}");
                // Walk the argmax path.
                let next = dist
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(t, _)| t.clone())
                    .unwrap();
                if next == EOS_TOKEN {
                    break;
                }
                prefix.push(next);
            }
        }
    }

    #[test]
    fn confusion_tokens_never_contain_keywords() {
        let keywords: BTreeSet<String> =
            ["zalbex", "zalbexin", "mor", "morvane"].map(String::from).into();
        let taken: BTreeSet<Token> = BTreeSet::new();
        for kw in &keywords {
            let confusion = derive_confusion(kw, 11, &taken, &keywords).unwrap();
            for other in &keywords {
                assert!(!confusion.contains(other.as_str()), "{confusion} vs {other}");
                assert!(!other.contains(&confusion), "{confusion} vs {other}");
            }
        }
    }

    #[test]
    fn ngram_scorer_prefers_seen_continuations() {
        let corpus = vec![
            vec!["the".to_string(), "cat".to_string()],
            vec!["the".to_string(), "cat".to_string()],
            vec!["the".to_string(), "dog".to_string()],
        ];
        let scorer = NgramScorer::from_corpus(&corpus).unwrap();
        let dist = scorer.next_log_probs("", "", &["the".to_string()]);
        assert!(dist["cat"] > dist["dog"]);
        assert!(dist["dog"] > dist[EOS_TOKEN]);
        let sum: f64 = dist.values().map(|lp| lp.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn echo_scorer_replays_the_keyed_content() {
        let table = BTreeMap::from([(
            "utt-1".to_string(),
            vec!["hello".to_string(), "world".to_string()],
        )]);
        let scorer = EchoScorer::new(table);
        let out = beam_search(&scorer, "", "utt-1", &BeamConfig::default()).unwrap();
        assert_eq!(out[0].text(EOS_TOKEN), "hello world");
        assert_eq!(out[0].log_score, 0.0);
        let missing = beam_search(&scorer, "", "nope", &BeamConfig::default()).unwrap();
        assert_eq!(missing[0].text(EOS_TOKEN), "");
    }
}
