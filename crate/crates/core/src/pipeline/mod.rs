//! End-to-end runners: manifest ingestion, synthetic audio proxies,
//! retrieval and ASR evaluation, and deterministic report emission.
//!
//! The full run is a pure function of the config file, the input files,
//! and the seeds: re-running writes byte-identical reports.

pub mod config;
pub mod toydata;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::scorers::{EchoScorer, TableScorer, TableScorerBuilder};
use crate::decoder::{beam_search, joint_beam_search, BeamConfig, TokenScorer, EOS_TOKEN};
use crate::embedder::{
    subsample_frames, AudioEncoder, FrameMatrix, MeanPoolAudioEncoder, NgramHashEncoder,
    TextEncoder,
};
use crate::error::{Error, Result};
use crate::pipeline::config::{Arm, RunConfig};
use crate::pipeline::toydata::SimulatedBaseOracle;
use crate::prompt::{build_prompt, context_free_prompt};
use crate::rada::{
    filter_vocabulary, generate_fuzzy_variants, specs_from_jsonl, AsrOracle, CharDropoutOracle,
    EchoOracle, FilterOptions, FilterStats, NullOracle, SynthSpec,
};
use crate::retriever::{Hotword, HotwordIndex, Vocabulary};
use crate::textmetrics::{
    edit_distance, is_recalled, normalize, EvalCounts, EvalReport, KeywordAnnotation, TokenSeq,
};

/// One test utterance: reference transcript, annotated keywords, and the
/// parameters of its synthetic audio proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub audio_seed: u64,
    #[serde(default)]
    pub noise_level: f64,
}

impl Utterance {
    /// Positive utterances must contain every keyword as a substring of
    /// the normalized text; negative utterances have no keywords.
    pub fn validate(&self) -> Result<()> {
        let text = normalize(&self.text);
        if text.is_empty() {
            return Err(Error::InvalidUtterance {
                id: self.id.clone(),
                reason: "empty text".into(),
            });
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::InvalidUtterance {
                id: self.id.clone(),
                reason: format!("bad noise_level {}", self.noise_level),
            });
        }
        for kw in &self.keywords {
            let kw_norm = normalize(kw);
            if kw_norm.is_empty() {
                return Err(Error::InvalidUtterance {
                    id: self.id.clone(),
                    reason: "empty keyword".into(),
                });
            }
            if !text.contains(&kw_norm) {
                return Err(Error::InvalidUtterance {
                    id: self.id.clone(),
                    reason: format!("keyword {kw:?} not in text"),
                });
            }
        }
        Ok(())
    }

    pub fn annotation(&self) -> Result<KeywordAnnotation> {
        KeywordAnnotation::new(self.id.clone(), self.keywords.iter().map(|k| normalize(k)))
    }
}

/// Parses one utterance object per line and validates each.
pub fn manifest_from_jsonl(input: &str) -> Result<Vec<Utterance>> {
    let mut utterances = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(line).map_err(|e| Error::LineParse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        utt.validate()?;
        utterances.push(utt);
    }
    if utterances.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    Ok(utterances)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    manifest_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Nominal frame rate of synthetic audio proxies.
pub const PROXY_FRAME_RATE_HZ: f64 = 25.0;

/// Builds the audio stand-in for an utterance: the text embedding
/// replicated across ceil(chars/4) frames with seeded per-component
/// Gaussian noise of overall magnitude `noise_level` per frame.
pub fn synth_audio_proxy(utt: &Utterance, encoder: &dyn TextEncoder) -> Result<FrameMatrix> {
    let base = encoder.embed_text(&utt.text)?;
    let n_frames = utt.text.chars().count().div_ceil(4).max(1);
    let dim = base.dim();
    let scale = utt.noise_level / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(utt.audio_seed);
    let frames = (0..n_frames)
        .map(|_| {
            base.values()
                .iter()
                .map(|&v| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    v + (noise * scale) as f32
                })
                .collect()
        })
        .collect();
    FrameMatrix::new(frames, PROXY_FRAME_RATE_HZ)
}

fn checked_encoders(index: &HotwordIndex) -> Result<(NgramHashEncoder, MeanPoolAudioEncoder)> {
    let text_encoder = NgramHashEncoder::new(index.dim())?;
    if text_encoder.fingerprint() != index.fingerprint() {
        return Err(Error::FingerprintMismatch {
            index: index.fingerprint(),
            encoder: text_encoder.fingerprint(),
        });
    }
    Ok((text_encoder, MeanPoolAudioEncoder::new(index.dim())))
}

fn proxy_embedding(
    utt: &Utterance,
    text_encoder: &NgramHashEncoder,
    audio_encoder: &MeanPoolAudioEncoder,
    subsample: usize,
) -> Result<crate::embedder::EmbeddingVector> {
    let frames = synth_audio_proxy(utt, text_encoder)?;
    let frames = if subsample > 1 {
        subsample_frames(&frames, subsample)?
    } else {
        frames
    };
    audio_encoder.embed_audio(&frames)
}

/// Percentage of annotated keywords recalled in the top-k surfaces, for
/// each requested k. Every utterance must carry at least one keyword.
pub fn eval_retrieval(
    manifest: &[Utterance],
    index: &HotwordIndex,
    k_values: &[usize],
    subsample: usize,
) -> Result<BTreeMap<usize, f64>> {
    if manifest.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    if k_values.is_empty() {
        return Err(Error::EmptyInput("k_values"));
    }
    let (text_encoder, audio_encoder) = checked_encoders(index)?;
    let k_max = *k_values.iter().max().expect("k_values is non-empty");
    let mut total_keywords = 0usize;
    let mut recalled: BTreeMap<usize, usize> = k_values.iter().map(|&k| (k, 0)).collect();
    for utt in manifest {
        if utt.keywords.is_empty() {
            return Err(Error::KeywordlessUtterance(utt.id.clone()));
        }
        let query = proxy_embedding(utt, &text_encoder, &audio_encoder, subsample)?;
        let result = index.query_topk(&query, k_max)?;
        let surfaces = result.surfaces();
        for kw in &utt.keywords {
            total_keywords += 1;
            for &k in k_values {
                let cut = k.min(surfaces.len());
                if is_recalled(kw, &surfaces[..cut]) {
                    *recalled.get_mut(&k).expect("k was inserted above") += 1;
                }
            }
        }
    }
    Ok(recalled
        .into_iter()
        .map(|(k, hits)| (k, 100.0 * hits as f64 / total_keywords as f64))
        .collect())
}

/// Settings for one ASR evaluation pass.
#[derive(Debug, Clone)]
pub struct AsrEvalOptions {
    pub beam: BeamConfig,
    pub operating_k: usize,
    pub joint: bool,
    pub k_values: Vec<usize>,
    pub subsample: usize,
}

/// Reports for the no-prompt baseline and the bias-prompted arm of one
/// test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrArmReports {
    pub base: EvalReport,
    pub biased: EvalReport,
}

struct MetricAccumulator {
    edits: usize,
    ref_tokens: usize,
    keyword_errors: usize,
    correct_sentences: usize,
}

impl MetricAccumulator {
    fn new() -> Self {
        MetricAccumulator {
            edits: 0,
            ref_tokens: 0,
            keyword_errors: 0,
            correct_sentences: 0,
        }
    }

    fn observe(&mut self, reference: &TokenSeq, hyp_text: &str, annotation: &KeywordAnnotation) {
        let hyp = TokenSeq::tokenize(hyp_text);
        self.edits += edit_distance(reference, &hyp);
        self.ref_tokens += reference.len();
        self.keyword_errors += crate::textmetrics::keyword_error_count(annotation, hyp_text);
        self.correct_sentences += usize::from(*reference == hyp);
    }

    fn report(
        &self,
        utterances: usize,
        keywords: usize,
        per_k_recall: BTreeMap<usize, f64>,
    ) -> EvalReport {
        let wer = if self.ref_tokens > 0 {
            self.edits as f64 / self.ref_tokens as f64
        } else {
            0.0
        };
        EvalReport::new(
            wer,
            per_k_recall,
            EvalCounts {
                utterances,
                keywords,
                keyword_errors: self.keyword_errors,
                correct_sentences: self.correct_sentences,
            },
        )
    }
}

/// Runs the full biased-ASR loop over one manifest: proxy, retrieve top-k,
/// build the bias prompt, decode (jointly when configured), and score both
/// the biased arm and the no-prompt baseline.
pub fn eval_asr(
    manifest: &[Utterance],
    index: &HotwordIndex,
    scorer: &dyn TokenScorer,
    opts: &AsrEvalOptions,
) -> Result<AsrArmReports> {
    if manifest.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let (text_encoder, audio_encoder) = checked_encoders(index)?;
    let k_max = opts
        .k_values
        .iter()
        .copied()
        .max()
        .unwrap_or(opts.operating_k)
        .max(opts.operating_k);
    let free_prompt = context_free_prompt();
    let has_keywords = manifest.iter().any(|u| !u.keywords.is_empty());

    let mut base_acc = MetricAccumulator::new();
    let mut biased_acc = MetricAccumulator::new();
    let mut total_keywords = 0usize;
    let mut recalled: BTreeMap<usize, usize> = opts.k_values.iter().map(|&k| (k, 0)).collect();

    for utt in manifest {
        let reference = TokenSeq::tokenize(&utt.text);
        let annotation = utt.annotation()?;
        let query = proxy_embedding(utt, &text_encoder, &audio_encoder, opts.subsample)?;
        let result = index.query_topk(&query, k_max)?;
        let surfaces = result.surfaces();

        total_keywords += utt.keywords.len();
        for kw in &utt.keywords {
            for &k in &opts.k_values {
                let cut = k.min(surfaces.len());
                if is_recalled(kw, &surfaces[..cut]) {
                    *recalled.get_mut(&k).expect("k was inserted above") += 1;
                }
            }
        }

        let base_hyp = beam_search(scorer, &free_prompt.rendered, &utt.id, &opts.beam)?
            .into_iter()
            .next()
            .ok_or(Error::EmptyInput("beam output"))?;
        base_acc.observe(&reference, &base_hyp.text(EOS_TOKEN), &annotation);

        let top = &surfaces[..opts.operating_k.min(surfaces.len())];
        let biased_prompt = build_prompt(top)?;
        let biased_hyp = if opts.joint {
            joint_beam_search(
                scorer,
                &free_prompt.rendered,
                &biased_prompt.rendered,
                &utt.id,
                &opts.beam,
            )?
        } else {
            beam_search(scorer, &biased_prompt.rendered, &utt.id, &opts.beam)?
                .into_iter()
                .next()
                .ok_or(Error::EmptyInput("beam output"))?
        };
        biased_acc.observe(&reference, &biased_hyp.text(EOS_TOKEN), &annotation);
    }

    let per_k_recall: BTreeMap<usize, f64> = if has_keywords && total_keywords > 0 {
        recalled
            .into_iter()
            .map(|(k, hits)| (k, 100.0 * hits as f64 / total_keywords as f64))
            .collect()
    } else {
        BTreeMap::new()
    };

    Ok(AsrArmReports {
        base: base_acc.report(manifest.len(), total_keywords, BTreeMap::new()),
        biased: biased_acc.report(manifest.len(), total_keywords, per_k_recall),
    })
}

/// The retrieval report file: per set, per arm, per k recall percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_values: Vec<usize>,
    pub arms: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rada_stats: Option<FilterStats>,
    pub sets: BTreeMap<String, BTreeMap<String, BTreeMap<usize, f64>>>,
}

/// The per-set ASR report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub set: String,
    pub operating_k: usize,
    pub joint: bool,
    pub vocab_arm: String,
    pub base: EvalReport,
    pub biased: EvalReport,
}

/// Reproducibility block written next to the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub encoder_fingerprint: String,
    pub index_sha256: String,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rada_stats: Option<FilterStats>,
    pub config: RunConfig,
    pub reports: Vec<String>,
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub report_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub retrieval: Option<RetrievalReport>,
    pub asr: BTreeMap<String, AsrReport>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn oracle_from_name(name: &str, seed: u64, vocab: &Vocabulary) -> Result<Box<dyn AsrOracle>> {
    if let Some(p) = name.strip_prefix("dropout:") {
        let p: f64 = p
            .parse()
            .map_err(|_| Error::Config(format!("bad dropout probability {p:?}")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} not in [0, 1]"
            )));
        }
        return Ok(Box::new(CharDropoutOracle { drop_prob: p }));
    }
    match name {
        "base" => Ok(Box::new(SimulatedBaseOracle::new(seed, vocab))),
        "echo" => Ok(Box::new(EchoOracle)),
        "null" => Ok(Box::new(NullOracle)),
        other => Err(Error::Config(format!(
            "unknown rada oracle {other:?}; expected base, echo, null, or dropout:<p>"
        ))),
    }
}

/// Appends fuzzy variants of every entry as extra index rows. Only
/// variants containing the parent surface help here (a retrieved variant
/// then recalls its parent under the substring rule), so the rest are
/// skipped, as are surfaces already present.
fn augment_with_variants(
    index: &HotwordIndex,
    encoder: &NgramHashEncoder,
    per_entry: usize,
    seed: u64,
) -> Result<HotwordIndex> {
    if per_entry == 0 || index.is_empty() {
        return Ok(index.clone());
    }
    let mut existing: std::collections::BTreeSet<String> = index
        .entries()
        .iter()
        .map(|e| e.surface.clone())
        .collect();
    let mut additions = Vec::new();
    for entry in index.entries() {
        let mut added = 0usize;
        for (i, variant) in generate_fuzzy_variants(&entry.surface, per_entry * 2, seed)
            .into_iter()
            .enumerate()
        {
            if added == per_entry {
                break;
            }
            let surface = normalize(&variant);
            if !surface.contains(&entry.surface) || existing.contains(&surface) {
                continue;
            }
            existing.insert(surface.clone());
            additions.push(Hotword {
                id: format!("{}~f{}", entry.id, i),
                surface,
                domain: entry.domain.clone(),
            });
            added += 1;
        }
    }
    index.add_entries(&additions, encoder)
}

struct RunState {
    cfg: RunConfig,
    report_dir: PathBuf,
    vocab: Vocabulary,
    manifests: BTreeMap<String, Vec<Utterance>>,
    specs: Option<BTreeMap<String, SynthSpec>>,
    input_hashes: BTreeMap<String, String>,
}

fn load_inputs(cfg: &RunConfig, base_dir: &Path) -> Result<RunState> {
    let mut input_hashes = BTreeMap::new();
    let mut read = |p: &Path| -> Result<String> {
        let resolved = RunConfig::resolve(base_dir, p);
        let bytes = std::fs::read(&resolved)?;
        input_hashes.insert(p.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    };

    let vocab_text = read(&cfg.paths.vocab)?;
    let vocab = match cfg.paths.vocab.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => Vocabulary::from_jsonl(&vocab_text)?,
        _ => Vocabulary::from_tsv(&vocab_text)?,
    };

    let mut manifests = BTreeMap::new();
    for (set, path) in &cfg.paths.manifests {
        manifests.insert(set.clone(), manifest_from_jsonl(&read(path)?)?);
    }

    let specs = match (&cfg.paths.synth_specs, cfg.rada.enabled) {
        (Some(path), true) => Some(specs_from_jsonl(&read(path)?)?),
        _ => None,
    };

    Ok(RunState {
        cfg: cfg.clone(),
        report_dir: PathBuf::new(),
        vocab,
        manifests,
        specs,
        input_hashes,
    })
}

fn build_scorer(state: &RunState) -> Result<Box<dyn TokenScorer>> {
    match state.cfg.asr.scorer.as_str() {
        "table" => Ok(Box::new(table_scorer_for(
            &state.manifests,
            &state.vocab,
            state.cfg.seed,
        )?)),
        "echo" => {
            let mut table = BTreeMap::new();
            for manifest in state.manifests.values() {
                for utt in manifest {
                    table.insert(
                        utt.id.clone(),
                        TokenSeq::tokenize(&utt.text).tokens().to_vec(),
                    );
                }
            }
            Ok(Box::new(EchoScorer::new(table)))
        }
        other => Err(Error::Config(format!("unknown scorer {other:?}"))),
    }
}

/// Builds the deterministic bias-sensitive table scorer for a set of
/// manifests against a vocabulary; the same construction `run` uses.
pub fn table_scorer_for(
    manifests: &BTreeMap<String, Vec<Utterance>>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<TableScorer> {
    let mut builder = TableScorerBuilder::new(seed)
        .vocab_surfaces(vocab.entries().iter().map(|e| e.surface.as_str()));
    for manifest in manifests.values() {
        for utt in manifest {
            builder = builder.utterance(&utt.id, &utt.text, &utt.keywords);
        }
    }
    builder.build()
}

/// Executes the full pipeline from a config file: index build, optional
/// vocabulary filtering, retrieval evaluation, ASR evaluation, and report
/// plus provenance emission. Any stage failure aborts with the stage name.
pub fn run_full(
    config_path: &Path,
    report_dir_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunOutcome> {
    let mut cfg = RunConfig::load(config_path).map_err(|e| e.at_stage("config"))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let base_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let report_dir = report_dir_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| base_dir.join("reports"));
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::from(e).at_stage("config"))?;

    let mut state = load_inputs(&cfg, &base_dir).map_err(|e| e.at_stage("load-inputs"))?;
    state.report_dir = report_dir;
    run_stages(state)
}

fn run_stages(state: RunState) -> Result<RunOutcome> {
    let cfg = &state.cfg;
    let mut files = Vec::new();

    // Index build over the raw vocabulary.
    let encoder =
        NgramHashEncoder::new(cfg.embedding_dim).map_err(|e| e.at_stage("index-build"))?;
    let base_index =
        HotwordIndex::build(&state.vocab, &encoder).map_err(|e| e.at_stage("index-build"))?;
    let index_path = state.report_dir.join("index.bin");
    base_index
        .save(&index_path)
        .map_err(|e| e.at_stage("index-build"))?;
    files.push(index_path.clone());

    // Optional robustness filtering.
    let mut rada_stats = None;
    let rada_index = if cfg.needs_rada() {
        let specs = state
            .specs
            .as_ref()
            .ok_or_else(|| Error::Config("missing synth specs".into()).at_stage("rada-filter"))?;
        let oracle = oracle_from_name(&cfg.rada.oracle, cfg.seed, &state.vocab)
            .map_err(|e| e.at_stage("rada-filter"))?;
        let outcome = filter_vocabulary(
            &state.vocab,
            oracle.as_ref(),
            specs,
            FilterOptions {
                min_correct_fraction: cfg.rada.min_correct_fraction,
            },
        )
        .map_err(|e| e.at_stage("rada-filter"))?;
        rada_stats = Some(outcome.stats);
        let removed_ids: Vec<&str> = outcome
            .removed
            .entries()
            .iter()
            .map(|e| e.id.as_str())
            .collect();
        Some(
            base_index
                .remove_entries(&removed_ids)
                .map_err(|e| e.at_stage("rada-filter"))?,
        )
    } else {
        None
    };

    // Fuzzy-variant augmentation on top of the filtered vocabulary.
    let needs_fuzzy = cfg.retrieval.arms.contains(&Arm::Fuzzy) || cfg.asr.vocab_arm == Arm::Fuzzy;
    let fuzzy_index = if needs_fuzzy {
        let parent = rada_index.as_ref().unwrap_or(&base_index);
        Some(
            augment_with_variants(
                parent,
                &encoder,
                cfg.retrieval.fuzzy_variants_per_entry,
                cfg.seed,
            )
            .map_err(|e| e.at_stage("fuzzy-augment"))?,
        )
    } else {
        None
    };

    let index_for = |arm: Arm| -> &HotwordIndex {
        match arm {
            Arm::Base => &base_index,
            Arm::Rada => rada_index.as_ref().unwrap_or(&base_index),
            Arm::Fuzzy => fuzzy_index.as_ref().unwrap_or(&base_index),
        }
    };

    // Retrieval evaluation over fully-annotated sets.
    let retrieval_sets: Vec<String> = cfg
        .asr_sets()
        .into_iter()
        .filter(|set| state.manifests[set].iter().all(|u| !u.keywords.is_empty()))
        .collect();
    let retrieval = if retrieval_sets.is_empty() {
        None
    } else {
        let mut sets = BTreeMap::new();
        for set in &retrieval_sets {
            let manifest = &state.manifests[set];
            let mut per_arm = BTreeMap::new();
            for arm in &cfg.retrieval.arms {
                let index = index_for(*arm);
                let table = if index.is_empty() {
                    cfg.k_values.iter().map(|&k| (k, 0.0)).collect()
                } else {
                    eval_retrieval(manifest, index, &cfg.k_values, cfg.retrieval.subsample)
                        .map_err(|e| e.at_stage("eval-retrieval"))?
                };
                per_arm.insert(arm.name().to_string(), table);
            }
            sets.insert(set.clone(), per_arm);
        }
        let report = RetrievalReport {
            k_values: cfg.k_values.clone(),
            arms: cfg
                .retrieval
                .arms
                .iter()
                .map(|a| a.name().to_string())
                .collect(),
            rada_stats,
            sets,
        };
        let path = state.report_dir.join("retrieval_report.json");
        write_json(&path, &report).map_err(|e| e.at_stage("eval-retrieval"))?;
        files.push(path);
        Some(report)
    };

    // ASR evaluation per configured set.
    let scorer = build_scorer(&state).map_err(|e| e.at_stage("eval-asr"))?;
    let asr_index = index_for(cfg.asr.vocab_arm);
    let opts = AsrEvalOptions {
        beam: cfg.beam.to_beam_config(),
        operating_k: cfg.operating_k,
        joint: cfg.asr.joint,
        k_values: cfg.k_values.clone(),
        subsample: cfg.retrieval.subsample,
    };
    let mut asr_reports = BTreeMap::new();
    for set in cfg.asr_sets() {
        let manifest = &state.manifests[&set];
        let arms = if asr_index.is_empty() {
            // Nothing to retrieve; both arms decode context-free.
            let report = eval_asr_without_retrieval(manifest, scorer.as_ref(), &opts)
                .map_err(|e| e.at_stage("eval-asr"))?;
            AsrArmReports {
                base: report.clone(),
                biased: report,
            }
        } else {
            eval_asr(manifest, asr_index, scorer.as_ref(), &opts)
                .map_err(|e| e.at_stage("eval-asr"))?
        };
        let report = AsrReport {
            set: set.clone(),
            operating_k: cfg.operating_k,
            joint: cfg.asr.joint,
            vocab_arm: cfg.asr.vocab_arm.name().to_string(),
            base: arms.base,
            biased: arms.biased,
        };
        let path = state.report_dir.join(format!("asr_report_{set}.json"));
        write_json(&path, &report).map_err(|e| e.at_stage("eval-asr"))?;
        files.push(path);
        asr_reports.insert(set, report);
    }

    // Provenance last: it lists everything written before it.
    let index_bytes = std::fs::read(state.report_dir.join("index.bin"))
        .map_err(|e| Error::from(e).at_stage("provenance"))?;
    let provenance = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        encoder_fingerprint: format!("{:#018x}", encoder.fingerprint()),
        index_sha256: sha256_hex(&index_bytes),
        inputs: state.input_hashes.clone(),
        rada_stats,
        config: cfg.clone(),
        reports: files
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };
    let path = state.report_dir.join("provenance.json");
    write_json(&path, &provenance).map_err(|e| e.at_stage("provenance"))?;
    files.push(path);

    Ok(RunOutcome {
        report_dir: state.report_dir,
        files,
        retrieval,
        asr: asr_reports,
    })
}

/// Decodes a manifest context-free only; used when the vocabulary emptied
/// out and there is nothing to retrieve.
fn eval_asr_without_retrieval(
    manifest: &[Utterance],
    scorer: &dyn TokenScorer,
    opts: &AsrEvalOptions,
) -> Result<EvalReport> {
    let free_prompt = context_free_prompt();
    let mut acc = MetricAccumulator::new();
    let mut total_keywords = 0usize;
    for utt in manifest {
        let reference = TokenSeq::tokenize(&utt.text);
        let annotation = utt.annotation()?;
        total_keywords += utt.keywords.len();
        let hyp = beam_search(scorer, &free_prompt.rendered, &utt.id, &opts.beam)?
            .into_iter()
            .next()
            .ok_or(Error::EmptyInput("beam output"))?;
        acc.observe(&reference, &hyp.text(EOS_TOKEN), &annotation);
    }
    Ok(acc.report(manifest.len(), total_keywords, BTreeMap::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::cosine;

    fn utt(id: &str, text: &str, keywords: &[&str], seed: u64, noise: f64) -> Utterance {
        Utterance {
            id: id.into(),
            text: text.into(),
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
            audio_seed: seed,
            noise_level: noise,
        }
    }

    #[test]
    fn noiseless_proxy_round_trips_to_the_text_embedding() {
        let enc = NgramHashEncoder::with_default_dim();
        let u = utt("u0", "play zalbex tonight", &["zalbex"], 3, 0.0);
        let frames = synth_audio_proxy(&u, &enc).unwrap();
        assert_eq!(
            frames.len(),
            "play zalbex tonight".chars().count().div_ceil(4)
        );
        assert!((frames.frame_rate_hz() - 25.0).abs() < 1e-12);
        let pooled = crate::embedder::mean_pool(frames.frames()).unwrap();
        let direct = enc.embed_text(&u.text).unwrap();
        // Equal up to f32 re-normalization rounding.
        assert!(cosine(&pooled, &direct).unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn proxies_are_deterministic_in_the_seed() {
        let enc = NgramHashEncoder::with_default_dim();
        let a = synth_audio_proxy(&utt("u", "hello there friend", &[], 9, 0.2), &enc).unwrap();
        let b = synth_audio_proxy(&utt("u", "hello there friend", &[], 9, 0.2), &enc).unwrap();
        assert_eq!(a, b);
        let c = synth_audio_proxy(&utt("u", "hello there friend", &[], 10, 0.2), &enc).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mild_noise_stays_close_to_the_clean_embedding() {
        let enc = NgramHashEncoder::with_default_dim();
        let pool = MeanPoolAudioEncoder::new(enc.dimension());
        let mut worst = 1.0f64;
        for i in 0..100 {
            let text = format!("utterance number {i} says zalbex and more words");
            let clean = utt("c", &text, &[], i, 0.0);
            let noisy = utt("n", &text, &[], i, 0.1);
            let e_clean = pool
                .embed_audio(&synth_audio_proxy(&clean, &enc).unwrap())
                .unwrap();
            let e_noisy = pool
                .embed_audio(&synth_audio_proxy(&noisy, &enc).unwrap())
                .unwrap();
            worst = worst.min(cosine(&e_clean, &e_noisy).unwrap());
        }
        assert!(worst > 0.9, "worst noisy/clean cosine {worst}");
    }

    #[test]
    fn manifest_validation_catches_bad_rows() {
        let ok = r#"{"id":"a","text":"play zalbex","keywords":["zalbex"],"audio_seed":1,"noise_level":0.0}"#;
        let missing_kw = r#"{"id":"b","text":"play something","keywords":["zalbex"],"audio_seed":1,"noise_level":0.0}"#;
        assert_eq!(manifest_from_jsonl(ok).unwrap().len(), 1);
        assert!(matches!(
            manifest_from_jsonl(missing_kw),
            Err(Error::InvalidUtterance { .. })
        ));
        assert!(manifest_from_jsonl("").is_err());
    }

    #[test]
    fn retrieval_eval_rejects_keywordless_utterances() {
        let enc = NgramHashEncoder::with_default_dim();
        let vocab = Vocabulary::new(vec![Hotword::new("h0", "zalbex", None).unwrap()]).unwrap();
        let index = HotwordIndex::build(&vocab, &enc).unwrap();
        let manifest = vec![utt("u0", "just words", &[], 1, 0.0)];
        assert!(matches!(
            eval_retrieval(&manifest, &index, &[1], 1),
            Err(Error::KeywordlessUtterance(_))
        ));
    }

    #[test]
    fn self_vocabulary_reaches_full_recall_at_k1() {
        let enc = NgramHashEncoder::with_default_dim();
        let words = ["zalbexor", "morvanith", "quenticol", "drafelune"];
        let entries: Vec<Hotword> = words
            .iter()
            .enumerate()
            .map(|(i, w)| Hotword::new(format!("h{i}"), *w, None).unwrap())
            .collect();
        let index = HotwordIndex::build(&Vocabulary::new(entries).unwrap(), &enc).unwrap();
        let manifest: Vec<Utterance> = words
            .iter()
            .enumerate()
            .map(|(i, w)| utt(&format!("u{i}"), w, &[w], i as u64, 0.0))
            .collect();
        let table = eval_retrieval(&manifest, &index, &[1, 2], 1).unwrap();
        assert_eq!(table[&1], 100.0);
        assert_eq!(table[&2], 100.0);
    }
}
