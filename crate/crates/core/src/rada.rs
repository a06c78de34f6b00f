//! Robustness-aware vocabulary filtering, fuzzy variant generation, and
//! training-mixture sampling.
//!
//! Filtering probes a pluggable recognizer with carrier sentences: words
//! the recognizer already gets right in every carrier are dropped from the
//! vocabulary, the rest stay. TTS and sentence generation are out of
//! scope; specs carry pre-written carrier sentences and the recognizer is
//! an interface with deterministic desk-scale implementations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::fnv1a64;
use crate::error::{Error, Result};
use crate::retriever::Vocabulary;
use crate::textmetrics::normalize;

/// A recognizer probe: deterministic for the same utterance and seed.
pub trait AsrOracle: Send + Sync {
    fn transcribe(&self, utterance: &str, seed: u64) -> String;
}

/// Returns every carrier verbatim; recognizes everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoOracle;

impl AsrOracle for EchoOracle {
    fn transcribe(&self, utterance: &str, _seed: u64) -> String {
        utterance.to_string()
    }
}

/// Returns nothing; recognizes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullOracle;

impl AsrOracle for NullOracle {
    fn transcribe(&self, _utterance: &str, _seed: u64) -> String {
        String::new()
    }
}

/// Drops each character with probability `drop_prob`, seeded by the
/// utterance content and seed, so probes are reproducible.
#[derive(Debug, Clone, Copy)]
pub struct CharDropoutOracle {
    pub drop_prob: f64,
}

impl AsrOracle for CharDropoutOracle {
    fn transcribe(&self, utterance: &str, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(seed, utterance.as_bytes()));
        utterance
            .chars()
            .filter(|_| rng.random_range(0.0..1.0) >= self.drop_prob)
            .collect()
    }
}

/// Fixed utterance -> hypothesis table; unmapped utterances transcribe to
/// the empty string.
#[derive(Debug, Clone, Default)]
pub struct LookupOracle {
    pub table: BTreeMap<String, String>,
}

impl AsrOracle for LookupOracle {
    fn transcribe(&self, utterance: &str, _seed: u64) -> String {
        self.table.get(utterance).cloned().unwrap_or_default()
    }
}

/// Probe material for one hotword: carrier sentences that contain its
/// surface, plus the synthesis seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hotword_id: String,
    pub carriers: Vec<String>,
    pub seed: u64,
}

/// Parses one `{"hotword_id":…,"carriers":[…],"seed":…}` object per line.
pub fn specs_from_jsonl(input: &str) -> Result<BTreeMap<String, SynthSpec>> {
    let mut specs = BTreeMap::new();
    for (lineno, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: SynthSpec = serde_json::from_str(line).map_err(|e| Error::LineParse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        specs.insert(spec.hotword_id.clone(), spec);
    }
    Ok(specs)
}

/// Filtering tallies, also the shape emitted by `rada filter` as JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub removed: usize,
    pub removal_rate: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vocabulary,
    pub removed: Vocabulary,
    pub stats: FilterStats,
}

#[derive(Debug, Clone, Copy)]
pub struct FilterOptions {
    /// Fraction of carriers that must be recognized for a word to count as
    /// reliably recognized (and be removed). 1.0 = all carriers.
    pub min_correct_fraction: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            min_correct_fraction: 1.0,
        }
    }
}

/// Partitions the vocabulary by probing the oracle with each hotword's
/// carriers. A hotword whose surface appears (normalized substring) in the
/// oracle hypothesis for at least `min_correct_fraction` of its carriers
/// is reliably recognized and goes to `removed`; everything else is kept.
/// `kept` and `removed` always partition the input.
pub fn filter_vocabulary(
    vocab: &Vocabulary,
    oracle: &dyn AsrOracle,
    specs: &BTreeMap<String, SynthSpec>,
    options: FilterOptions,
) -> Result<FilterOutcome> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for entry in vocab.entries() {
        let spec = specs
            .get(&entry.id)
            .ok_or_else(|| Error::MissingSpec(entry.id.clone()))?;
        if spec.carriers.is_empty() {
            return Err(Error::MissingSpec(entry.id.clone()));
        }
        let mut correct = 0usize;
        for carrier in &spec.carriers {
            if !normalize(carrier).contains(&entry.surface) {
                return Err(Error::BadCarrier {
                    id: entry.id.clone(),
                    carrier: carrier.clone(),
                });
            }
            let hyp = normalize(&oracle.transcribe(carrier, spec.seed));
            if hyp.contains(&entry.surface) {
                correct += 1;
            }
        }
        let fraction = correct as f64 / spec.carriers.len() as f64;
        if fraction >= options.min_correct_fraction {
            removed.push(entry.clone());
        } else {
            kept.push(entry.clone());
        }
    }
    let stats = FilterStats {
        total: vocab.len(),
        kept: kept.len(),
        removed: removed.len(),
        removal_rate: if vocab.len() > 0 {
            removed.len() as f64 / vocab.len() as f64
        } else {
            0.0
        },
    };
    Ok(FilterOutcome {
        kept: Vocabulary::new(kept)?,
        removed: Vocabulary::new(removed)?,
        stats,
    })
}

/// Fixed junk-token list used by fuzzy variants; index 0 matches the
/// canonical "word abc" perturbation shape.
pub const JUNK_TOKENS: [&str; 64] = [
    "abc", "xyz", "plus", "pro", "max", "mini", "lite", "neo", "ultra", "go", "one", "two",
    "three", "four", "five", "six", "seven", "eight", "nine", "ten", "red", "blue", "gold",
    "dash", "dot", "bar", "kit", "lab", "box", "hub", "air", "sky", "sun", "moon", "star",
    "east", "west", "north", "south", "prime", "next", "now", "new", "old", "big", "small",
    "fast", "slow", "alpha", "beta", "gamma", "delta", "omega", "zero", "core", "edge",
    "wave", "peak", "base", "apex", "arc", "bay", "cove", "dune",
];

/// Deterministic seeded fuzzy variants of a word. Each variant either
/// contains the word (suffix/prefix junk, case toggle) or is a prefix of
/// it no shorter than half its length (partial mention).
pub fn generate_fuzzy_variants(word: &str, count: usize, seed: u64) -> Vec<String> {
    if word.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = word.chars().collect();
    #[derive(Clone, Copy)]
    enum Kind {
        Suffix,
        Prefix,
        Partial,
        CaseToggle,
    }
    let mut kinds = vec![Kind::Suffix, Kind::Prefix];
    if chars.len() >= 4 {
        kinds.push(Kind::Partial);
    }
    if chars.iter().any(|c| c.is_alphabetic()) {
        kinds.push(Kind::CaseToggle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(seed, word.as_bytes()));
    (0..count)
        .map(|i| {
            let junk = JUNK_TOKENS[rng.random_range(0..JUNK_TOKENS.len())];
            match kinds[i % kinds.len()] {
                Kind::Suffix => format!("{word} {junk}"),
                Kind::Prefix => format!("{junk} {word}"),
                Kind::Partial => chars[..chars.len() - 1].iter().collect(),
                Kind::CaseToggle => {
                    if chars.iter().any(|c| c.is_uppercase()) {
                        word.to_lowercase()
                    } else {
                        let mut out = String::new();
                        let mut upper_done = false;
                        for c in &chars {
                            if !upper_done && c.is_alphabetic() {
                                out.extend(c.to_uppercase());
                                upper_done = true;
                            } else {
                                out.push(*c);
                            }
                        }
                        out
                    }
                }
            }
        })
        .collect()
}

/// One sample of the biased/non-biased training mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub utterance_id: String,
    pub is_biased: bool,
    pub prompt_hotwords: Vec<String>,
    pub contains_target: bool,
}

/// A hotword-bearing utterance available for positive biased samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasedExample {
    pub utterance_id: String,
    pub target: String,
}

/// Seeded mixture sampler.
///
/// Emits in shuffled blocks of 18 samples: 16 non-biased, one positive
/// biased (prompt contains the spoken target plus distractors) and one
/// negative biased (general utterance, distractor-only prompt). Any window
/// of a few blocks therefore holds the 8:1 non-biased:biased ratio and the
/// 1:1 positive:negative split, not just the long-run expectation.
/// Biased prompts carry 1-10 hotwords, sampled uniformly.
pub struct MixtureStream<'a> {
    biased_pool: &'a [BiasedExample],
    general_pool: &'a [String],
    distractors: Vec<String>,
    rng: ChaCha8Rng,
    block: Vec<MixtureSample>,
}

const MIXTURE_BLOCK_GENERAL: usize = 16;

impl<'a> MixtureStream<'a> {
    fn refill(&mut self) {
        #[derive(Clone, Copy)]
        enum Slot {
            General,
            Positive,
            Negative,
        }
        let mut slots = vec![Slot::General; MIXTURE_BLOCK_GENERAL];
        slots.push(Slot::Positive);
        slots.push(Slot::Negative);
        slots.shuffle(&mut self.rng);
        // Fill in reverse so `pop` emits in slot order.
        for slot in slots.into_iter().rev() {
            let sample = match slot {
                Slot::General => {
                    let id = &self.general_pool[self.rng.random_range(0..self.general_pool.len())];
                    MixtureSample {
                        utterance_id: id.clone(),
                        is_biased: false,
                        prompt_hotwords: Vec::new(),
                        contains_target: false,
                    }
                }
                Slot::Positive => {
                    let ex = &self.biased_pool[self.rng.random_range(0..self.biased_pool.len())];
                    let n = self.rng.random_range(1..=10usize);
                    let mut prompt = vec![ex.target.clone()];
                    prompt.extend(self.draw_distractors(n - 1, Some(&ex.target)));
                    prompt.shuffle(&mut self.rng);
                    MixtureSample {
                        utterance_id: ex.utterance_id.clone(),
                        is_biased: true,
                        prompt_hotwords: prompt,
                        contains_target: true,
                    }
                }
                Slot::Negative => {
                    let id = &self.general_pool[self.rng.random_range(0..self.general_pool.len())];
                    let n = self.rng.random_range(1..=10usize);
                    MixtureSample {
                        utterance_id: id.clone(),
                        is_biased: true,
                        prompt_hotwords: self.draw_distractors(n, None),
                        contains_target: false,
                    }
                }
            };
            self.block.push(sample);
        }
    }

    fn draw_distractors(&mut self, n: usize, exclude: Option<&str>) -> Vec<String> {
        let pool: Vec<&String> = self
            .distractors
            .iter()
            .filter(|d| Some(d.as_str()) != exclude)
            .collect();
        if pool.is_empty() {
            return (0..n)
                .map(|_| JUNK_TOKENS[self.rng.random_range(0..JUNK_TOKENS.len())].to_string())
                .collect();
        }
        (0..n)
            .map(|_| pool[self.rng.random_range(0..pool.len())].clone())
            .collect()
    }
}

impl Iterator for MixtureStream<'_> {
    type Item = MixtureSample;

    fn next(&mut self) -> Option<MixtureSample> {
        if self.block.is_empty() {
            self.refill();
        }
        self.block.pop()
    }
}

/// Infinite seeded sampler over the two pools; callers `take` what they
/// need. Errors when either pool is empty.
pub fn build_mixture<'a>(
    biased_pool: &'a [BiasedExample],
    general_pool: &'a [String],
    seed: u64,
) -> Result<MixtureStream<'a>> {
    if biased_pool.is_empty() {
        return Err(Error::EmptyInput("biased pool"));
    }
    if general_pool.is_empty() {
        return Err(Error::EmptyInput("general pool"));
    }
    let mut distractors: Vec<String> = biased_pool.iter().map(|b| b.target.clone()).collect();
    distractors.sort();
    distractors.dedup();
    Ok(MixtureStream {
        biased_pool,
        general_pool,
        distractors,
        rng: ChaCha8Rng::seed_from_u64(seed),
        block: Vec::with_capacity(MIXTURE_BLOCK_GENERAL + 2),
    })
}
