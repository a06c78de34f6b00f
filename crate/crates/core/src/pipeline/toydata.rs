//! Bundled synthetic dataset: two hotword domains plus a general
//! regression set, generated from templates and seeded pseudowords.
//!
//! Everything derives deterministically from one seed, including which
//! hotwords the simulated base recognizer already knows. That single
//! source of truth drives vocabulary filtering (known words get removed),
//! manifest annotation (test keywords are drawn from the surviving pool,
//! the "bad cases"), and the bias-sensitive table scorer used for
//! decoding, so the stages agree with each other end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::scorers::{BaseBehavior, TableScorer};
use crate::error::{Error, Result};
use crate::pipeline::{table_scorer_for, Utterance};
use crate::rada::{filter_vocabulary, AsrOracle, FilterOptions, SynthSpec};
use crate::retriever::{Hotword, Vocabulary};
use crate::textmetrics::normalize;

/// Default seed behind the files committed under `data/`.
pub const BUNDLED_SEED: u64 = 7;

const HOTWORDS_PER_DOMAIN: usize = 90;
const UTTERANCES_PER_SET: usize = 240;
const CARRIERS_PER_HOTWORD: usize = 3;
const TWO_KEYWORD_PERCENT: u64 = 15;

const ONSETS: [&str; 14] = [
    "b", "br", "d", "dr", "f", "fl", "g", "gr", "k", "m", "n", "p", "s", "t",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 8] = ["l", "n", "r", "s", "x", "st", "th", "m"];

const MEDIA_TEMPLATES: [&str; 8] = [
    "play {} again tonight",
    "queue up {} after dinner",
    "did you watch {} yesterday",
    "stream {} on the big screen",
    "the finale of {} was wild",
    "start {} from the beginning",
    "add {} to my watchlist",
    "skip the intro of {}",
];
const MEDIA_TEMPLATES_TWO: [&str; 2] = [
    "i watched {} and then {} last night",
    "is {} better than {} this season",
];
const MEDICAL_TEMPLATES: [&str; 8] = [
    "the doctor prescribed {} for me",
    "take {} twice a day",
    "is {} safe with food",
    "refill my {} prescription please",
    "my chart lists {} today",
    "does {} cause drowsiness",
    "order {} from the pharmacy",
    "check the dosage of {}",
];
const MEDICAL_TEMPLATES_TWO: [&str; 2] = [
    "can i take {} together with {}",
    "switch me from {} to {} next week",
];
const GENERAL_TEMPLATES: [&str; 10] = [
    "please close the {} before dinner",
    "the {} looks lovely this morning",
    "we walked past the {} yesterday",
    "meet me near the {} at noon",
    "the {} was crowded all afternoon",
    "someone left a coat in the {}",
    "can you describe the {} again",
    "they painted the {} last spring",
    "i forgot my umbrella at the {}",
    "the {} stays open until late",
];
const GENERAL_SLOTS: [&str; 12] = [
    "window", "garden", "kitchen", "harbor", "market", "library", "station", "hallway",
    "courtyard", "bakery", "bridge", "theater",
];

/// The simulated base recognizer: echoes its input but corrupts every
/// vocabulary surface it does not know in the given context. Determinism
/// comes from [`BaseBehavior`], the same table the bias-sensitive scorer
/// consults.
#[derive(Debug, Clone)]
pub struct SimulatedBaseOracle {
    behavior: BaseBehavior,
    surfaces: Vec<String>,
}

impl SimulatedBaseOracle {
    pub fn new(seed: u64, vocab: &Vocabulary) -> Self {
        let mut surfaces: Vec<String> =
            vocab.entries().iter().map(|e| e.surface.clone()).collect();
        // Longest first so nested replacements cannot clip each other.
        surfaces.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        SimulatedBaseOracle {
            behavior: BaseBehavior::new(seed),
            surfaces,
        }
    }
}

/// Deterministic corruption of a missed surface: same length, different
/// final character.
pub fn corrupt_surface(surface: &str) -> String {
    let mut chars: Vec<char> = surface.chars().collect();
    let last = chars.pop();
    let mut out: String = chars.into_iter().collect();
    out.push(if last == Some('u') { 'o' } else { 'u' });
    out
}

impl AsrOracle for SimulatedBaseOracle {
    fn transcribe(&self, utterance: &str, _seed: u64) -> String {
        let norm = normalize(utterance);
        let mut out = norm.clone();
        for surface in &self.surfaces {
            if out.contains(surface.as_str()) && !self.behavior.recognizes(surface, &norm) {
                out = out.replace(surface.as_str(), &corrupt_surface(surface));
            }
        }
        out
    }
}

/// The generated dataset plus everything needed to replay it.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub seed: u64,
    pub vocab: Vocabulary,
    pub manifests: BTreeMap<String, Vec<Utterance>>,
    pub specs: BTreeMap<String, SynthSpec>,
}

fn pseudoword(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3usize);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        word.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    word.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    word
}

fn surface_is_acceptable(candidate: &str, existing: &[String], reserved: &BTreeSet<&str>) -> bool {
    if candidate.chars().count() < 5 || reserved.contains(candidate) {
        return false;
    }
    let corrupted = corrupt_surface(candidate);
    for s in existing {
        let other_corrupt = corrupt_surface(s);
        if candidate.contains(s.as_str())
            || s.contains(candidate)
            || other_corrupt.contains(candidate)
            || corrupted.contains(s.as_str())
        {
            return false;
        }
    }
    true
}

fn reserved_words() -> BTreeSet<&'static str> {
    let mut reserved: BTreeSet<&str> = BTreeSet::new();
    for template in MEDIA_TEMPLATES
        .iter()
        .chain(&MEDIA_TEMPLATES_TWO)
        .chain(&MEDICAL_TEMPLATES)
        .chain(&MEDICAL_TEMPLATES_TWO)
        .chain(&GENERAL_TEMPLATES)
    {
        reserved.extend(template.split_whitespace().filter(|w| *w != "{}"));
    }
    reserved.extend(GENERAL_SLOTS);
    reserved.extend(["uh", "um", "er", "ah"]);
    reserved
}

fn sample_noise(rng: &mut ChaCha8Rng) -> f64 {
    // Mostly clean audio with a tail of genuinely hard proxies.
    match rng.random_range(0..10u32) {
        0..=3 => 0.1,
        4..=6 => 0.4,
        7..=8 => 0.8,
        _ => 1.5,
    }
}

impl ToyDataset {
    pub fn generate(seed: u64) -> Result<ToyDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reserved = reserved_words();

        // Hotword surfaces, unique and mutually substring-free.
        let mut surfaces: Vec<String> = Vec::new();
        while surfaces.len() < 2 * HOTWORDS_PER_DOMAIN {
            let candidate = pseudoword(&mut rng);
            if surface_is_acceptable(&candidate, &surfaces, &reserved) {
                surfaces.push(candidate);
            }
        }
        let domains = ["media", "medical"];
        let mut entries = Vec::new();
        let mut specs = BTreeMap::new();
        for (d, domain) in domains.iter().enumerate() {
            let templates = if *domain == "media" {
                &MEDIA_TEMPLATES
            } else {
                &MEDICAL_TEMPLATES
            };
            for i in 0..HOTWORDS_PER_DOMAIN {
                let surface = &surfaces[d * HOTWORDS_PER_DOMAIN + i];
                let id = format!("{domain}-{i:03}");
                entries.push(Hotword::new(&id, surface, Some((*domain).to_string()))?);
                let mut picks = BTreeSet::new();
                while picks.len() < CARRIERS_PER_HOTWORD {
                    picks.insert(rng.random_range(0..templates.len()));
                }
                let carriers = picks
                    .into_iter()
                    .map(|t| templates[t].replace("{}", surface))
                    .collect();
                specs.insert(
                    id.clone(),
                    SynthSpec {
                        hotword_id: id,
                        carriers,
                        seed: rng.random(),
                    },
                );
            }
        }
        let vocab = Vocabulary::new(entries)?;

        // Annotation pools are the hotwords the base recognizer cannot be
        // trusted with, i.e. whatever filtering keeps.
        let oracle = SimulatedBaseOracle::new(seed, &vocab);
        let outcome = filter_vocabulary(&vocab, &oracle, &specs, FilterOptions::default())?;
        let mut pools: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for entry in outcome.kept.entries() {
            if let Some(domain) = &entry.domain {
                pools
                    .entry(domains.iter().find(|d| *d == domain).ok_or_else(|| {
                        Error::Config(format!("unexpected domain {domain:?}"))
                    })?)
                    .or_default()
                    .push(entry.surface.clone());
            }
        }
        for domain in domains {
            let pool = pools.get(domain).map(Vec::len).unwrap_or(0);
            if pool < 10 {
                return Err(Error::Config(format!(
                    "seed {seed} leaves only {pool} usable {domain} hotwords"
                )));
            }
        }

        let mut manifests = BTreeMap::new();
        for domain in domains {
            let pool = &pools[domain];
            let (singles, doubles): (&[&str], &[&str]) = if domain == "media" {
                (&MEDIA_TEMPLATES, &MEDIA_TEMPLATES_TWO)
            } else {
                (&MEDICAL_TEMPLATES, &MEDICAL_TEMPLATES_TWO)
            };
            let mut utterances = Vec::with_capacity(UTTERANCES_PER_SET);
            for i in 0..UTTERANCES_PER_SET {
                let two = rng.random_range(0..100u64) < TWO_KEYWORD_PERCENT && pool.len() >= 2;
                let (text, keywords) = if two {
                    let template = doubles[rng.random_range(0..doubles.len())];
                    let a = pool[rng.random_range(0..pool.len())].clone();
                    let b = loop {
                        let b = pool[rng.random_range(0..pool.len())].clone();
                        if b != a {
                            break b;
                        }
                    };
                    let text = template.replacen("{}", &a, 1).replacen("{}", &b, 1);
                    (text, vec![a, b])
                } else {
                    let template = singles[rng.random_range(0..singles.len())];
                    let kw = pool[rng.random_range(0..pool.len())].clone();
                    (template.replace("{}", &kw), vec![kw])
                };
                utterances.push(Utterance {
                    id: format!("{domain}-utt-{i:03}"),
                    text,
                    keywords,
                    audio_seed: rng.random(),
                    noise_level: sample_noise(&mut rng),
                });
            }
            manifests.insert(domain.to_string(), utterances);
        }

        let mut general = Vec::with_capacity(UTTERANCES_PER_SET);
        for i in 0..UTTERANCES_PER_SET {
            let template = GENERAL_TEMPLATES[rng.random_range(0..GENERAL_TEMPLATES.len())];
            let slot = GENERAL_SLOTS[rng.random_range(0..GENERAL_SLOTS.len())];
            general.push(Utterance {
                id: format!("general-utt-{i:03}"),
                text: template.replace("{}", slot),
                keywords: Vec::new(),
                audio_seed: rng.random(),
                noise_level: sample_noise(&mut rng),
            });
        }
        manifests.insert("general".to_string(), general);

        Ok(ToyDataset {
            seed,
            vocab,
            manifests,
            specs,
        })
    }

    /// The base recognizer consistent with this dataset's seed.
    pub fn base_oracle(&self) -> SimulatedBaseOracle {
        SimulatedBaseOracle::new(self.seed, &self.vocab)
    }

    /// The bias-sensitive decoder scorer consistent with this dataset.
    pub fn table_scorer(&self) -> Result<TableScorer> {
        table_scorer_for(&self.manifests, &self.vocab, self.seed)
    }

    /// Writes vocab, manifests, synth specs, and a ready-to-run config.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();

        let mut tsv = String::from("# id\tsurface\tdomain\n");
        for e in self.vocab.entries() {
            tsv.push_str(&format!(
                "{}\t{}\t{}\n",
                e.id,
                e.surface,
                e.domain.as_deref().unwrap_or("")
            ));
        }
        let vocab_path = dir.join("vocab.tsv");
        std::fs::write(&vocab_path, tsv)?;
        files.push(vocab_path);

        for (set, utterances) in &self.manifests {
            let mut out = String::new();
            for utt in utterances {
                out.push_str(&serde_json::to_string(utt)?);
                out.push('\n');
            }
            let path = dir.join(format!("{set}_manifest.jsonl"));
            std::fs::write(&path, out)?;
            files.push(path);
        }

        let mut out = String::new();
        for spec in self.specs.values() {
            out.push_str(&serde_json::to_string(spec)?);
            out.push('\n');
        }
        let specs_path = dir.join("synth_specs.jsonl");
        std::fs::write(&specs_path, out)?;
        files.push(specs_path);

        let config_path = dir.join("run_config.toml");
        std::fs::write(&config_path, self.run_config_toml())?;
        files.push(config_path);
        Ok(files)
    }

    /// The bundled run configuration, pointing at the files
    /// [`ToyDataset::write_to_dir`] emits.
    pub fn run_config_toml(&self) -> String {
        format!(
            r#"seed = {seed}
k_values = [1, 2, 5, 10]
operating_k = 2
embedding_dim = 256

[beam]
width = 4
max_len = 16
length_penalty = 0.6

[rewards]
match_weight = 1.0
wer_weight = 1.0

[rada]
enabled = true
oracle = "base"
min_correct_fraction = 1.0

[retrieval]
arms = ["base", "rada", "fuzzy"]
fuzzy_variants_per_entry = 2
subsample = 1

[asr]
joint = true
scorer = "table"
vocab_arm = "fuzzy"
sets = ["media", "medical", "general"]

[paths]
vocab = "vocab.tsv"
synth_specs = "synth_specs.jsonl"

[paths.manifests]
media = "media_manifest.jsonl"
medical = "medical_manifest.jsonl"
general = "general_manifest.jsonl"
"#,
            seed = self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = ToyDataset::generate(BUNDLED_SEED).unwrap();
        let b = ToyDataset::generate(BUNDLED_SEED).unwrap();
        assert_eq!(a.vocab.entries(), b.vocab.entries());
        assert_eq!(a.manifests, b.manifests);
        assert_eq!(a.specs, b.specs);
        let c = ToyDataset::generate(BUNDLED_SEED + 1).unwrap();
        assert_ne!(a.vocab.entries(), c.vocab.entries());
    }

    #[test]
    fn dataset_shape_matches_the_documented_sizes() {
        let data = ToyDataset::generate(BUNDLED_SEED).unwrap();
        assert_eq!(data.vocab.len(), 180);
        assert_eq!(data.manifests.len(), 3);
        for (set, manifest) in &data.manifests {
            assert_eq!(manifest.len(), 240, "{set}");
            for utt in manifest {
                utt.validate().unwrap();
                if set == "general" {
                    assert!(utt.keywords.is_empty());
                } else {
                    assert!(!utt.keywords.is_empty());
                }
            }
        }
        assert_eq!(data.specs.len(), 180);
        for spec in data.specs.values() {
            assert_eq!(spec.carriers.len(), CARRIERS_PER_HOTWORD);
        }
    }

    #[test]
    fn annotated_keywords_survive_filtering() {
        let data = ToyDataset::generate(BUNDLED_SEED).unwrap();
        let outcome = filter_vocabulary(
            &data.vocab,
            &data.base_oracle(),
            &data.specs,
            FilterOptions::default(),
        )
        .unwrap();
        let kept: BTreeSet<&str> = outcome
            .kept
            .entries()
            .iter()
            .map(|e| e.surface.as_str())
            .collect();
        assert!(outcome.removed.len() > 10, "filtering should remove words");
        for set in ["media", "medical"] {
            for utt in &data.manifests[set] {
                for kw in &utt.keywords {
                    assert!(kept.contains(kw.as_str()), "{kw} was filtered away");
                }
            }
        }
    }

    #[test]
    fn oracle_corrupts_only_unknown_surfaces() {
        let data = ToyDataset::generate(BUNDLED_SEED).unwrap();
        let oracle = data.base_oracle();
        let behavior = BaseBehavior::new(data.seed);
        let mut corrupted = 0;
        let mut echoed = 0;
        for spec in data.specs.values() {
            let entry = data.vocab.get(&spec.hotword_id).unwrap();
            for carrier in &spec.carriers {
                let hyp = oracle.transcribe(carrier, spec.seed);
                let contains = hyp.contains(entry.surface.as_str());
                assert_eq!(
                    contains,
                    behavior.recognizes(&entry.surface, &normalize(carrier)),
                    "{} in {carrier:?}",
                    entry.surface
                );
                if contains {
                    echoed += 1;
                } else {
                    corrupted += 1;
                }
            }
        }
        assert!(corrupted > 100, "corrupted {corrupted}");
        assert!(echoed > 100, "echoed {echoed}");
    }

    #[test]
    fn written_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = ToyDataset::generate(BUNDLED_SEED).unwrap();
        let files = data.write_to_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let vocab = Vocabulary::load(dir.path().join("vocab.tsv")).unwrap();
        assert_eq!(vocab.entries(), data.vocab.entries());
        let media = crate::pipeline::load_manifest(dir.path().join("media_manifest.jsonl")).unwrap();
        assert_eq!(media, data.manifests["media"]);
        let cfg =
            crate::pipeline::config::RunConfig::load(dir.path().join("run_config.toml")).unwrap();
        assert_eq!(cfg.seed, BUNDLED_SEED);
    }
}
