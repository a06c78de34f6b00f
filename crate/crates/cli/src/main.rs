use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hotbias::decoder::scorers::EchoScorer;
use hotbias::decoder::{beam_search, joint_beam_search, BeamConfig, TokenScorer, EOS_TOKEN};
use hotbias::embedder::{MeanPoolAudioEncoder, NgramHashEncoder, TextEncoder};
use hotbias::grpo::{gradient_check, score_response, GradCheckSettings, RewardWeights};
use hotbias::pipeline::toydata::{SimulatedBaseOracle, ToyDataset, BUNDLED_SEED};
use hotbias::pipeline::{
    eval_asr, eval_retrieval, load_manifest, run_full, synth_audio_proxy, table_scorer_for,
    AsrEvalOptions, AsrReport, Utterance,
};
use hotbias::prompt::{build_prompt, context_free_prompt};
use hotbias::rada::{
    build_mixture, filter_vocabulary, generate_fuzzy_variants, specs_from_jsonl, AsrOracle,
    BiasedExample, CharDropoutOracle, EchoOracle, FilterOptions, NullOracle,
};
use hotbias::retriever::{HotwordIndex, Vocabulary};

#[derive(Parser)]
#[command(name = "hotbias", version, about = "Hotword retrieval, bias prompting, and ASR evaluation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or query a hotword embedding index
    Index {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Vocabulary filtering, fuzzy variants, and training mixtures
    Rada {
        #[command(subcommand)]
        cmd: RadaCmd,
    },
    /// Retrieval and ASR evaluation over manifests
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Decode a manifest with (joint) beam search
    Decode(DecodeArgs),
    /// Reward scoring and the gradient check
    Grpo {
        #[command(subcommand)]
        cmd: GrpoCmd,
    },
    /// Run the full pipeline from a config file
    Run {
        /// Path to the TOML run configuration
        config: PathBuf,
        #[arg(long)]
        report_dir: Option<PathBuf>,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate the bundled synthetic dataset
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed a vocabulary (TSV or JSONL) into an index file
    Build {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
    /// Query an index with text embedded as a pseudo-audio query
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum RadaCmd {
    /// Partition a vocabulary by probing a recognizer oracle
    Filter {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// base | echo | null | dropout:<p>
        #[arg(long, default_value = "base")]
        oracle: String,
        #[arg(long, default_value_t = 1.0)]
        min_correct_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the kept vocabulary here (TSV)
        #[arg(long)]
        kept_out: Option<PathBuf>,
        /// Write the removed vocabulary here (TSV)
        #[arg(long)]
        removed_out: Option<PathBuf>,
    },
    /// Print seeded fuzzy variants of a word
    Variants {
        #[arg(long)]
        word: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample the 8:1 / 1:1 training mixture as JSONL
    Mixture {
        /// JSONL of {"utterance_id":…,"target":…}
        #[arg(long)]
        biased_pool: PathBuf,
        /// Text file with one general utterance id per line
        #[arg(long)]
        general_pool: PathBuf,
        #[arg(long, default_value_t = 9000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Recall@k of annotated keywords over a vocabulary
    Retrieval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Comma-separated k sweep
        #[arg(long, default_value = "1,2,5,10", value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        subsample: usize,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// KER/SACC/WER of base vs bias-prompted decoding
    Asr {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// table | echo
        #[arg(long, default_value = "table")]
        scorer: String,
        #[arg(short, long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        joint: bool,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// table | echo
    #[arg(long, default_value = "table")]
    scorer: String,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Retrieval depth; 0 decodes context-free only
    #[arg(short, long, default_value_t = 2)]
    k: usize,
    /// Pool context-free and biased hypotheses
    #[arg(long)]
    joint: bool,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    length_penalty: f64,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum GrpoCmd {
    /// Score JSONL rows of {"reference":…,"output":…,"candidates":[…]}
    Score {
        /// Input file; stdin when omitted
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        match_weight: f64,
        #[arg(long, default_value_t = 1.0)]
        wer_weight: f64,
    },
    /// Compare the analytic loss gradient against central differences
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        #[arg(long, default_value_t = 31)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Write vocab, manifests, synth specs, and a run config
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BUNDLED_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = stage_label(&cli.command);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{stage}]: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn stage_label(cmd: &Command) -> &'static str {
    match cmd {
        Command::Index { cmd: IndexCmd::Build { .. } } => "index-build",
        Command::Index { cmd: IndexCmd::Query { .. } } => "index-query",
        Command::Rada { cmd: RadaCmd::Filter { .. } } => "rada-filter",
        Command::Rada { cmd: RadaCmd::Variants { .. } } => "rada-variants",
        Command::Rada { cmd: RadaCmd::Mixture { .. } } => "rada-mixture",
        Command::Eval { cmd: EvalCmd::Retrieval { .. } } => "eval-retrieval",
        Command::Eval { cmd: EvalCmd::Asr { .. } } => "eval-asr",
        Command::Decode(_) => "decode",
        Command::Grpo { cmd: GrpoCmd::Score { .. } } => "grpo-score",
        Command::Grpo { cmd: GrpoCmd::CheckGrad { .. } } => "grpo-check-grad",
        Command::Run { .. } => "run",
        Command::Dataset { .. } => "dataset-gen",
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Index { cmd } => run_index(cmd),
        Command::Rada { cmd } => run_rada(cmd),
        Command::Eval { cmd } => run_eval(cmd),
        Command::Decode(args) => run_decode(args),
        Command::Grpo { cmd } => run_grpo(cmd),
        Command::Run {
            config,
            report_dir,
            seed,
        } => {
            let outcome = run_full(&config, report_dir.as_deref(), seed)?;
            for file in &outcome.files {
                println!("{}", file.display());
            }
            Ok(())
        }
        Command::Dataset { cmd: DatasetCmd::Gen { out, seed } } => {
            let data = ToyDataset::generate(seed)?;
            for file in data.write_to_dir(&out)? {
                println!("{}", file.display());
            }
            Ok(())
        }
    }
}

fn run_index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build { vocab, out, dim } => {
            let vocab = Vocabulary::load(&vocab)?;
            let encoder = NgramHashEncoder::new(dim)?;
            let index = HotwordIndex::build(&vocab, &encoder)?;
            index.save(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "entries": index.len(),
                    "dim": index.dim(),
                    "fingerprint": format!("{:#018x}", index.fingerprint()),
                    "path": out.display().to_string(),
                })
            );
            Ok(())
        }
        IndexCmd::Query { index, text, k } => {
            let index = HotwordIndex::load(&index)?;
            let encoder = NgramHashEncoder::new(index.dim())?;
            if encoder.fingerprint() != index.fingerprint() {
                bail!("index was built with a different encoder configuration");
            }
            let query = encoder.embed_text(&text)?;
            let result = index.query_topk(&query, k)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
    }
}

fn oracle_by_name(name: &str, seed: u64, vocab: &Vocabulary) -> Result<Box<dyn AsrOracle>> {
    if let Some(p) = name.strip_prefix("dropout:") {
        let p: f64 = p.parse().context("bad dropout probability")?;
        return Ok(Box::new(CharDropoutOracle { drop_prob: p }));
    }
    Ok(match name {
        "base" => Box::new(SimulatedBaseOracle::new(seed, vocab)),
        "echo" => Box::new(EchoOracle),
        "null" => Box::new(NullOracle),
        other => bail!("unknown oracle {other:?}; expected base, echo, null, or dropout:<p>"),
    })
}

fn write_vocab_tsv(path: &PathBuf, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for e in vocab.entries() {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.id,
            e.surface,
            e.domain.as_deref().unwrap_or("")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run_rada(cmd: RadaCmd) -> Result<()> {
    match cmd {
        RadaCmd::Filter {
            vocab,
            specs,
            oracle,
            min_correct_fraction,
            seed,
            kept_out,
            removed_out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let specs = specs_from_jsonl(&std::fs::read_to_string(&specs)?)?;
            let oracle = oracle_by_name(&oracle, seed.unwrap_or(BUNDLED_SEED), &vocab)?;
            let outcome = filter_vocabulary(
                &vocab,
                oracle.as_ref(),
                &specs,
                FilterOptions {
                    min_correct_fraction,
                },
            )?;
            if let Some(path) = kept_out {
                write_vocab_tsv(&path, &outcome.kept)?;
            }
            if let Some(path) = removed_out {
                write_vocab_tsv(&path, &outcome.removed)?;
            }
            println!("{}", serde_json::to_string(&outcome.stats)?);
            Ok(())
        }
        RadaCmd::Variants { word, count, seed } => {
            let variants = generate_fuzzy_variants(&word, count, seed);
            println!("{}", serde_json::to_string(&variants)?);
            Ok(())
        }
        RadaCmd::Mixture {
            biased_pool,
            general_pool,
            count,
            seed,
        } => {
            let mut biased = Vec::new();
            for (i, line) in std::fs::read_to_string(&biased_pool)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: BiasedExample = serde_json::from_str(line)
                    .with_context(|| format!("biased pool line {}", i + 1))?;
                biased.push(row);
            }
            let general: Vec<String> = std::fs::read_to_string(&general_pool)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect();
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for sample in build_mixture(&biased, &general, seed)?.take(count) {
                serde_json::to_writer(&mut out, &sample)?;
                out.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn scorer_by_name(
    name: &str,
    manifest: &[Utterance],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Box<dyn TokenScorer>> {
    match name {
        "table" => {
            let mut manifests = BTreeMap::new();
            manifests.insert("cli".to_string(), manifest.to_vec());
            Ok(Box::new(table_scorer_for(&manifests, vocab, seed)?))
        }
        "echo" => {
            let table = manifest
                .iter()
                .map(|u| {
                    (
                        u.id.clone(),
                        hotbias::textmetrics::TokenSeq::tokenize(&u.text)
                            .tokens()
                            .to_vec(),
                    )
                })
                .collect();
            Ok(Box::new(EchoScorer::new(table)))
        }
        other => bail!("unknown scorer {other:?}; expected table or echo"),
    }
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Retrieval {
            manifest,
            vocab,
            k,
            dim,
            subsample,
            report_dir,
        } => {
            let manifest = load_manifest(&manifest)?;
            let vocab = Vocabulary::load(&vocab)?;
            let encoder = NgramHashEncoder::new(dim)?;
            let index = HotwordIndex::build(&vocab, &encoder)?;
            let table = eval_retrieval(&manifest, &index, &k, subsample)?;
            let json = serde_json::json!({ "k_values": k, "recall": table });
            println!("{}", serde_json::to_string_pretty(&json)?);
            if let Some(dir) = report_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("retrieval_report.json"),
                    serde_json::to_string_pretty(&json)? + "\n",
                )?;
            }
            Ok(())
        }
        EvalCmd::Asr {
            manifest,
            vocab,
            scorer,
            k,
            joint,
            beam,
            dim,
            seed,
            report_dir,
        } => {
            let set = manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "set".into());
            let utterances = load_manifest(&manifest)?;
            let vocab = Vocabulary::load(&vocab)?;
            let encoder = NgramHashEncoder::new(dim)?;
            let index = HotwordIndex::build(&vocab, &encoder)?;
            let scorer = scorer_by_name(&scorer, &utterances, &vocab, seed.unwrap_or(BUNDLED_SEED))?;
            let opts = AsrEvalOptions {
                beam: BeamConfig {
                    beam_width: beam,
                    ..BeamConfig::default()
                },
                operating_k: k,
                joint,
                k_values: vec![k],
                subsample: 1,
            };
            let arms = eval_asr(&utterances, &index, scorer.as_ref(), &opts)?;
            let report = AsrReport {
                set: set.clone(),
                operating_k: k,
                joint,
                vocab_arm: "base".into(),
                base: arms.base,
                biased: arms.biased,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(dir) = report_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join(format!("asr_report_{set}.json")),
                    serde_json::to_string_pretty(&report)? + "\n",
                )?;
            }
            Ok(())
        }
    }
}

fn run_decode(args: DecodeArgs) -> Result<()> {
    let utterances = load_manifest(&args.manifest)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let encoder = NgramHashEncoder::new(args.dim)?;
    let audio_encoder = MeanPoolAudioEncoder::new(args.dim);
    let index = HotwordIndex::build(&vocab, &encoder)?;
    let scorer = scorer_by_name(
        &args.scorer,
        &utterances,
        &vocab,
        args.seed.unwrap_or(BUNDLED_SEED),
    )?;
    let cfg = BeamConfig {
        beam_width: args.beam,
        max_len: args.max_len,
        length_penalty: args.length_penalty,
    };
    let free = context_free_prompt();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for utt in &utterances {
        let hyp = if args.k == 0 {
            beam_search(scorer.as_ref(), &free.rendered, &utt.id, &cfg)?
                .into_iter()
                .next()
                .context("empty beam")?
        } else {
            let frames = synth_audio_proxy(utt, &encoder)?;
            let query = hotbias::embedder::AudioEncoder::embed_audio(&audio_encoder, &frames)?;
            let result = index.query_topk(&query, args.k)?;
            let prompt = build_prompt(&result.surfaces())?;
            if args.joint {
                joint_beam_search(scorer.as_ref(), &free.rendered, &prompt.rendered, &utt.id, &cfg)?
            } else {
                let mut list = beam_search(scorer.as_ref(), &prompt.rendered, &utt.id, &cfg)?;
                let mut hyp = list.remove(0);
                hyp.source = hotbias::decoder::HypothesisSource::Biased;
                hyp
            }
        };
        let row = serde_json::json!({
            "utterance_id": utt.id,
            "hypothesis": hyp.text(EOS_TOKEN),
            "source": hyp.source,
            "score": hyp.normalized_score(cfg.length_penalty),
        });
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn run_grpo(cmd: GrpoCmd) -> Result<()> {
    match cmd {
        GrpoCmd::Score {
            input,
            match_weight,
            wer_weight,
        } => {
            let weights = RewardWeights {
                match_weight,
                wer_weight,
            };
            let reader: Box<dyn BufRead> = match input {
                Some(path) => Box::new(std::io::BufReader::new(std::fs::File::open(path)?)),
                None => Box::new(std::io::BufReader::new(std::io::stdin())),
            };
            #[derive(serde::Deserialize)]
            struct Row {
                reference: String,
                output: String,
                #[serde(default)]
                candidates: Vec<String>,
            }
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: Row =
                    serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
                let record = score_response(&row.output, &row.reference, &row.candidates, weights)?;
                serde_json::to_writer(&mut out, &record)?;
                out.write_all(b"\n")?;
            }
            Ok(())
        }
        GrpoCmd::CheckGrad {
            steps,
            tokens,
            seed,
            h,
            tolerance,
        } => {
            let report = gradient_check(GradCheckSettings {
                steps,
                tokens,
                seed,
                h,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.max_relative_error > tolerance {
                bail!(
                    "gradient check failed: max relative error {} > {tolerance}",
                    report.max_relative_error
                );
            }
            Ok(())
        }
    }
}
