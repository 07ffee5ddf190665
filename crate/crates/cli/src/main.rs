//! Pipeline driver: corpus generation, codec training, LM training, synthesis,
//! prosody transfer, benchmarks, and diagnostic dumps.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use valler_core::bench::{
    build_cases, count_ar_steps, env_meta, render_merge_table, render_robustness_table,
    render_step_table, robustness_csv, robustness_sweep, standard_merge_sweep, time_ar_loop,
    DecoderKind, Pattern, PatternSpec,
};
use valler_core::codec::{
    decode as codec_decode, train_codebooks, CodebookSet, MergeConfig, TrainOpts,
};
use valler_core::corpus::{gen_corpus, load_corpus, CorpusConfig, PhonemeId, SyntheticUtterance};
use valler_core::decode::{
    check_ma_properties, ma_decode, nar_complete, prosody_transfer, repeat_expand, write_audit_log,
    AdvanceMode, DecodeSession, DecodeStatus, RawDecode,
};
use valler_core::lm::cache::ArSession;
use valler_core::lm::io::{load_weights, save_weights};
use valler_core::lm::train::{
    ar_example, prepare_ar_examples, prepare_nar_examples, train_ar, train_nar, LmTrainOpts,
};
use valler_core::lm::{LmConfig, LmWeights, ModelKind};
use valler_core::plot::{heatmap, line_chart, Series};
use valler_core::{Error, Result, Scalar};

use config::{log_resolved, resolve, resolve_opt, resolve_seed, FileConfig};

type S = valler_core::DefaultScalar;

#[derive(Parser)]
#[command(
    name = "valler",
    about = "Merged-RVQ codec language models with monotonic-alignment decoding, at desk scale",
    version
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL recipe; frames regenerate on load).
    GenCorpus(GenCorpusArgs),
    /// Train the 8-layer merged RVQ codebooks on a corpus.
    TrainCodec(TrainCodecArgs),
    /// Train the autoregressive model (joint acoustic+phoneme heads).
    TrainAr(TrainLmArgs),
    /// Train the non-autoregressive model (layers 2..8).
    TrainNar(TrainLmArgs),
    /// Synthesize codes for a target with monotonic-alignment decoding.
    Synth(SynthArgs),
    /// Synthesize with a preset duration schedule (prosody transfer).
    Prosody(ProsodyArgs),
    /// Print the AR step-count table for the six token arrangements.
    BenchSteps(BenchStepsArgs),
    /// Time the cached AR loop at given step counts.
    BenchTime(BenchTimeArgs),
    /// Reconstruction-SNR ordering across merge configurations.
    BenchMerge(BenchMergeArgs),
    /// Decoder A/B robustness sweep over top_p.
    BenchRobust(BenchRobustArgs),
    /// Check an alignment path for locality/monotonicity/completeness.
    CheckPath(CheckPathArgs),
    /// Dump prompt attention and the alignment path for one decode.
    DumpAttn(DumpAttnArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    vp: Option<u16>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    min_phonemes: Option<usize>,
    #[arg(long)]
    max_phonemes: Option<usize>,
    #[arg(long)]
    min_duration: Option<usize>,
    #[arg(long)]
    max_duration: Option<usize>,
    /// Draw each utterance's phonemes without replacement.
    #[arg(long, default_value_t = false)]
    unique_phonemes: bool,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Eight comma-separated merge rates, e.g. "2,1,1,1,1,1,1,1".
    #[arg(long)]
    merge: Option<String>,
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_seq: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    nar: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Corpus index of the acoustic prompt utterance.
    #[arg(long, default_value_t = 0)]
    prompt_id: usize,
    /// Corpus index providing the target phonemes.
    #[arg(long)]
    target_id: Option<usize>,
    /// Explicit target phonemes, comma separated (overrides --target-id).
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Advance rule: "restricted" or "eq5".
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Decode with the free-phoneme baseline instead of MA.
    #[arg(long, default_value_t = false)]
    baseline: bool,
}

#[derive(Args)]
struct ProsodyArgs {
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    nar: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    prompt_id: usize,
    /// Corpus index whose alignment is the preset schedule.
    #[arg(long)]
    preset_id: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct BenchStepsArgs {
    #[arg(long)]
    duration: f64,
    #[arg(long, default_value_t = 75.0)]
    hz: f64,
    #[arg(long, default_value_t = 105)]
    phonemes: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    merge_rate: usize,
    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchTimeArgs {
    /// Comma-separated step counts to time.
    #[arg(long, default_value = "375,750")]
    steps: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional trained AR weights; defaults to a fresh desk-scale model.
    #[arg(long)]
    ar: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchMergeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus; defaults to splitting the main corpus 80/20.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = false)]
    plot: bool,
}

#[derive(Args)]
struct BenchRobustArgs {
    /// Test corpus (targets to synthesize).
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus providing acoustic prompts; defaults to the test corpus.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "0.3,0.5,0.8,1.0")]
    grid: String,
    #[arg(long, default_value = "ma,baseline")]
    decoders: String,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = false)]
    plot: bool,
}

#[derive(Args)]
struct CheckPathArgs {
    /// JSON array of positions, or a .code file with a PATH section.
    #[arg(long)]
    file: PathBuf,
    /// Target phoneme count L.
    #[arg(long)]
    length: usize,
}

#[derive(Args)]
struct DumpAttnArgs {
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    prompt_id: usize,
    #[arg(long, default_value_t = 1)]
    target_id: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = true)]
    svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args, file),
        Command::TrainCodec(args) => cmd_train_codec(args, file),
        Command::TrainAr(args) => cmd_train_lm(args, file, ModelKind::Ar),
        Command::TrainNar(args) => cmd_train_lm(args, file, ModelKind::Nar),
        Command::Synth(args) => cmd_synth(args, file),
        Command::Prosody(args) => cmd_prosody(args, file),
        Command::BenchSteps(args) => cmd_bench_steps(args),
        Command::BenchTime(args) => cmd_bench_time(args, file),
        Command::BenchMerge(args) => cmd_bench_merge(args, file),
        Command::BenchRobust(args) => cmd_bench_robust(args, file),
        Command::CheckPath(args) => cmd_check_path(args),
        Command::DumpAttn(args) => cmd_dump_attn(args, file),
    }
}

fn parse_mode(s: Option<&str>) -> Result<AdvanceMode> {
    match s.unwrap_or("restricted") {
        "restricted" => Ok(AdvanceMode::RestrictedSoftmax),
        "eq5" => Ok(AdvanceMode::Eq5Literal),
        other => Err(Error::invalid(format!(
            "unknown advance mode {other:?} (use restricted or eq5)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

fn cmd_gen_corpus(args: GenCorpusArgs, file: FileConfig) -> Result<()> {
    let defaults = CorpusConfig::default();
    let config = CorpusConfig {
        v_p: resolve(args.vp, file.v_p, defaults.v_p),
        dim: resolve(args.dim, file.dim, defaults.dim),
        count: resolve(args.count, file.count, defaults.count),
        seed: resolve_seed(args.seed, file.seed)?,
        noise_std: resolve(args.noise_std, file.noise_std, defaults.noise_std),
        min_phonemes: resolve(args.min_phonemes, file.min_phonemes, defaults.min_phonemes),
        max_phonemes: resolve(args.max_phonemes, file.max_phonemes, defaults.max_phonemes),
        min_duration: resolve(args.min_duration, file.min_duration, defaults.min_duration),
        max_duration: resolve(args.max_duration, file.max_duration, defaults.max_duration),
        unique_phonemes: args.unique_phonemes || file.unique_phonemes.unwrap_or(false),
    };
    log_resolved(&args.out, &config)?;
    let path = args.out.join("corpus.jsonl");
    let stats = gen_corpus(&config, &path)?;
    println!(
        "wrote {} utterances ({} total frames) to {}",
        stats.count,
        stats.total_frames,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-codec
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CodecRunConfig {
    corpus: String,
    k: usize,
    iters: usize,
    merge: String,
    seed: u64,
}

fn cmd_train_codec(args: TrainCodecArgs, file: FileConfig) -> Result<()> {
    let merge = match resolve_opt(args.merge, file.merge) {
        Some(s) => MergeConfig::parse(&s)?,
        None => MergeConfig::first_layer(2),
    };
    let opts = TrainOpts {
        k: resolve(args.k, file.k, 64),
        iters: resolve(args.iters, file.iters, 30),
        seed: resolve_seed(args.seed, file.seed)?,
        ..TrainOpts::default()
    };
    log_resolved(
        &args.out,
        &CodecRunConfig {
            corpus: args.corpus.display().to_string(),
            k: opts.k,
            iters: opts.iters,
            merge: merge.to_string(),
            seed: opts.seed,
        },
    )?;
    let (_, utterances) = load_corpus::<S>(&args.corpus)?;
    let multiple = merge.frame_multiple();
    let latents: Vec<_> = utterances.iter().map(|u| u.padded(multiple).0).collect();
    let (books, report) = train_codebooks(&latents, &merge, &opts)?;
    let out_path = args.out.join("codebooks.mrvq");
    books.save(&out_path)?;
    std::fs::write(
        args.out.join("codec_report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "layer_mse": report.layer_mse,
            "degenerate_layers": report.degenerate_layers,
            "k": opts.k,
            "iters": opts.iters,
            "seed": opts.seed,
            "merge": merge.to_string(),
        }))?,
    )?;
    println!("wrote {}", out_path.display());
    println!("per-layer quantization MSE: {:?}", report.layer_mse);
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ar / train-nar
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LmRunConfig {
    kind: ModelKind,
    corpus: String,
    codec: String,
    lm: LmConfig,
    train: LmTrainOpts,
}

fn cmd_train_lm(args: TrainLmArgs, file: FileConfig, kind: ModelKind) -> Result<()> {
    let (meta, utterances) = load_corpus::<S>(&args.corpus)?;
    let books = CodebookSet::<S>::load(&args.codec)?;
    let defaults = LmConfig::default();
    let lm = LmConfig {
        layers: resolve(args.layers, file.layers, defaults.layers),
        heads: resolve(args.heads, file.heads, defaults.heads),
        dim: resolve(args.model_dim, file.model_dim, defaults.dim),
        ffn_dim: resolve(args.ffn_dim, file.ffn_dim, defaults.ffn_dim),
        dropout: resolve(args.dropout, file.dropout, defaults.dropout),
        max_seq: resolve(args.max_seq, file.max_seq, defaults.max_seq),
        acoustic_k: books.k(),
        phoneme_vocab: meta.v_p,
    };
    let steps_default = match kind {
        ModelKind::Ar => 1500,
        ModelKind::Nar => 800,
    };
    let steps = resolve(args.steps, file.steps, steps_default);
    let train_opts = LmTrainOpts {
        steps,
        warmup_steps: (steps / 10).max(1),
        lr_peak: resolve(args.lr, file.lr, 1e-3),
        micro_batch: resolve(args.micro_batch, file.micro_batch, 4),
        lambda: resolve(args.lambda, file.lambda, 1.0),
        seed: resolve_seed(args.seed, file.seed)?,
        ..LmTrainOpts::default()
    };
    log_resolved(
        &args.out,
        &LmRunConfig {
            kind,
            corpus: args.corpus.display().to_string(),
            codec: args.codec.display().to_string(),
            lm: lm.clone(),
            train: train_opts.clone(),
        },
    )?;

    let (name, weights, report) = match kind {
        ModelKind::Ar => {
            let data = prepare_ar_examples(&utterances, &books)?;
            let (w, r) = train_ar::<S>(&lm, &data, &train_opts)?;
            ("ar", w, r)
        }
        ModelKind::Nar => {
            let data = prepare_nar_examples(&utterances, &books)?;
            let (w, r) = train_nar::<S>(&lm, &data, &train_opts)?;
            ("nar", w, r)
        }
    };
    let out_path = args.out.join(format!("{name}.vrlm"));
    save_weights(&weights, &out_path)?;
    std::fs::write(
        args.out.join(format!("{name}_report.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "wrote {} ({} parameters, final accuracy acoustic {:.4} phoneme {:.4}, {:.1}s)",
        out_path.display(),
        report.param_count,
        report.final_acoustic_accuracy,
        report.final_phoneme_accuracy,
        report.wall_seconds
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth / prosody
// ---------------------------------------------------------------------------

struct Loaded {
    ar: LmWeights<S>,
    nar: LmWeights<S>,
    books: CodebookSet<S>,
    utterances: Vec<SyntheticUtterance<S>>,
    v_p: u16,
}

fn load_pipeline(
    ar: &Path,
    nar: &Path,
    codec: &Path,
    corpus: &Path,
) -> Result<Loaded> {
    let ar = load_weights::<S>(ar, ModelKind::Ar)?;
    let nar = load_weights::<S>(nar, ModelKind::Nar)?;
    let books = CodebookSet::<S>::load(codec)?;
    let (meta, utterances) = load_corpus::<S>(corpus)?;
    if books.k() != ar.config.acoustic_k {
        return Err(Error::Load(format!(
            "codebook K={} does not match AR model K={}",
            books.k(),
            ar.config.acoustic_k
        )));
    }
    Ok(Loaded {
        ar,
        nar,
        books,
        utterances,
        v_p: meta.v_p,
    })
}

fn utterance<'a>(utts: &'a [SyntheticUtterance<S>], id: usize) -> Result<&'a SyntheticUtterance<S>> {
    utts.get(id)
        .ok_or_else(|| Error::invalid(format!("utterance id {id} out of range ({} loaded)", utts.len())))
}

#[derive(Serialize)]
struct SynthReport {
    status: DecodeStatus,
    steps: usize,
    full_rate_frames: usize,
    path_ok: Option<bool>,
    snr_vs_preset_db: Option<f64>,
    seed: u64,
    top_p: f64,
}

fn write_decode_outputs(
    out: &Path,
    name: &str,
    raw: &RawDecode,
    pipeline: &Loaded,
    truncate_frames: Option<usize>,
) -> Result<(usize, PathBuf)> {
    let m = pipeline.books.merge.rate(0);
    let mut layer1 = repeat_expand(&raw.block_codes, m);
    let mut aligned = repeat_expand(&raw.phonemes, m);
    if let Some(t) = truncate_frames {
        layer1.truncate(t);
        aligned.truncate(t);
    }
    let codes = nar_complete(&pipeline.nar, &layer1, &aligned, &pipeline.books.merge)?;
    let code_path = out.join(format!("{name}.code"));
    let path_u32 = raw.path.as_ref().map(|p| p.positions.clone());
    valler_core::codec::save_code_matrix(&code_path, &codes, path_u32.as_deref())?;
    write_audit_log(&out.join(format!("{name}_audit.jsonl")), &raw.audit)?;

    // Latent reconstruction dump (little-endian f32, frame-major).
    let latent = codec_decode(&codes, &pipeline.books)?;
    let mut bytes = Vec::with_capacity(latent.raw().len() * 4);
    for v in latent.raw() {
        bytes.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    std::fs::write(out.join(format!("{name}_latent.f32")), bytes)?;
    Ok((latent.len(), code_path))
}

fn parse_target_list(s: &str, v_p: u16) -> Result<Vec<PhonemeId>> {
    let ids: Vec<PhonemeId> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<PhonemeId>()
                .map_err(|_| Error::invalid(format!("bad phoneme id {p:?}")))
        })
        .collect::<Result<_>>()?;
    if ids.iter().any(|&p| p >= v_p) {
        return Err(Error::invalid("target phoneme id out of vocabulary"));
    }
    if ids.is_empty() {
        return Err(Error::invalid("target must not be empty"));
    }
    Ok(ids)
}

fn cmd_synth(args: SynthArgs, file: FileConfig) -> Result<()> {
    let pipeline = load_pipeline(&args.ar, &args.nar, &args.codec, &args.corpus)?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let top_p = resolve(args.top_p, file.top_p, 0.8);
    let mode = parse_mode(resolve_opt(args.mode, file.mode.clone()).as_deref())?;
    let budget = resolve(args.budget, file.budget, 0);

    let prompt = utterance(&pipeline.utterances, args.prompt_id)?;
    let prompt_example = ar_example(prompt, &pipeline.books)?;
    let m = pipeline.books.merge.rate(0);
    let (target_phonemes, expected_steps) = match (&args.target, args.target_id) {
        (Some(list), _) => {
            let ids = parse_target_list(list, pipeline.v_p)?;
            let expected = ids.len() * 4;
            (ids, expected)
        }
        (None, Some(id)) => {
            let t = utterance(&pipeline.utterances, id)?;
            (
                t.phonemes.symbols().to_vec(),
                t.alignment.total_frames().div_ceil(m),
            )
        }
        (None, None) => {
            return Err(Error::invalid("one of --target or --target-id is required"))
        }
    };

    let session = DecodeSession {
        prompt_phonemes: prompt_example.prompt.clone(),
        prompt_pairs: prompt_example
            .block_codes
            .iter()
            .copied()
            .zip(prompt_example.block_aligned.iter().copied())
            .collect(),
        target_phonemes: target_phonemes.clone(),
        top_p,
        mode,
        step_budget: budget,
        expected_steps,
        seed,
    };
    log_resolved(
        &args.out,
        &serde_json::json!({
            "command": if args.baseline { "synth(baseline)" } else { "synth(ma)" },
            "prompt_id": args.prompt_id,
            "target_len": target_phonemes.len(),
            "top_p": top_p,
            "mode": format!("{mode:?}"),
            "budget": session.budget(),
            "seed": seed,
        }),
    )?;

    let mut stepper = ArSession::new(&pipeline.ar, false)?;
    let raw = if args.baseline {
        valler_core::decode::baseline_decode(&mut stepper, &session, pipeline.ar.config.p_eos())?
    } else {
        ma_decode(&mut stepper, &session, pipeline.ar.config.p_eos())?
    };
    let path_ok = raw
        .path
        .as_ref()
        .map(|p| check_ma_properties(&p.positions, target_phonemes.len()).all());
    let (frames, code_path) = write_decode_outputs(&args.out, "synth", &raw, &pipeline, None)?;
    let report = SynthReport {
        status: raw.status,
        steps: raw.block_codes.len(),
        full_rate_frames: frames,
        path_ok,
        snr_vs_preset_db: None,
        seed,
        top_p,
    };
    std::fs::write(
        args.out.join("synth_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{}: status {:?}, {} AR steps, {} frames",
        code_path.display(),
        report.status,
        report.steps,
        report.full_rate_frames
    );
    Ok(())
}

fn cmd_prosody(args: ProsodyArgs, file: FileConfig) -> Result<()> {
    let pipeline = load_pipeline(&args.ar, &args.nar, &args.codec, &args.corpus)?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let top_p = resolve(args.top_p, file.top_p, 0.8);
    let budget = resolve(args.budget, file.budget, 0);

    let prompt = utterance(&pipeline.utterances, args.prompt_id)?;
    let preset_utt = utterance(&pipeline.utterances, args.preset_id)?;
    let preset = preset_utt.alignment.clone();
    let prompt_example = ar_example(prompt, &pipeline.books)?;
    let m = pipeline.books.merge.rate(0);

    let session = DecodeSession {
        prompt_phonemes: prompt_example.prompt.clone(),
        prompt_pairs: prompt_example
            .block_codes
            .iter()
            .copied()
            .zip(prompt_example.block_aligned.iter().copied())
            .collect(),
        target_phonemes: preset.run_phonemes(),
        top_p,
        mode: AdvanceMode::RestrictedSoftmax,
        step_budget: budget,
        expected_steps: preset.total_frames().div_ceil(m),
        seed,
    };
    log_resolved(
        &args.out,
        &serde_json::json!({
            "command": "prosody",
            "prompt_id": args.prompt_id,
            "preset_id": args.preset_id,
            "preset_frames": preset.total_frames(),
            "top_p": top_p,
            "budget": session.budget(),
            "seed": seed,
        }),
    )?;

    let mut stepper = ArSession::new(&pipeline.ar, false)?;
    let raw = prosody_transfer(&mut stepper, &session, &preset, m)?;
    let preset_t = preset.total_frames();
    let (frames, code_path) =
        write_decode_outputs(&args.out, "prosody", &raw, &pipeline, Some(preset_t))?;

    // With matching lengths the preset utterance is a reference signal.
    let snr = {
        let (codes, _) = valler_core::codec::load_code_matrix(&code_path)?;
        let zhat = codec_decode(&codes, &pipeline.books)?;
        valler_core::codec::reconstruction_snr(&preset_utt.frames, &zhat).ok()
    };
    let report = SynthReport {
        status: raw.status,
        steps: raw.block_codes.len(),
        full_rate_frames: frames,
        path_ok: Some(true),
        snr_vs_preset_db: snr,
        seed,
        top_p,
    };
    std::fs::write(
        args.out.join("prosody_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{}: {} AR steps, {} frames (preset {}), SNR vs preset {:?} dB",
        code_path.display(),
        report.steps,
        report.full_rate_frames,
        preset_t,
        report.snr_vs_preset_db
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-steps / bench-time
// ---------------------------------------------------------------------------

fn cmd_bench_steps(args: BenchStepsArgs) -> Result<()> {
    let mut rows = Vec::new();
    for pattern in Pattern::all() {
        let spec = PatternSpec::new(pattern, args.layers, args.hz, args.phonemes, args.merge_rate);
        let steps = count_ar_steps(&spec, args.duration)?;
        rows.push((spec, steps));
    }
    print!("{}", render_step_table(&rows));
    if let Some(path) = args.json {
        let json: Vec<_> = rows
            .iter()
            .map(|(spec, steps)| {
                serde_json::json!({
                    "pattern": spec.pattern.name(),
                    "ar_steps": steps,
                })
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_bench_time(args: BenchTimeArgs, file: FileConfig) -> Result<()> {
    let steps: Vec<usize> = args
        .steps
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad step count {s:?}")))
        })
        .collect::<Result<_>>()?;
    let w = match &args.ar {
        Some(path) => load_weights::<S>(path, ModelKind::Ar)?,
        None => {
            let max_needed = steps.iter().max().copied().unwrap_or(0) + 8;
            let config = LmConfig {
                max_seq: max_needed.next_power_of_two().max(512),
                ..LmConfig::default()
            };
            LmWeights::<S>::new_ar(config, resolve(args.seed, file.seed, 0))?
        }
    };
    let mut results = Vec::new();
    for &n in &steps {
        let stats = time_ar_loop(&w, n, args.reps)?;
        println!(
            "{:>6} steps: median {:.4}s (IQR {:.4}s), {:.0} steps/s",
            n, stats.median_s, stats.iqr_s, stats.steps_per_sec
        );
        results.push(stats);
    }
    if results.len() >= 2 {
        for pair in results.windows(2) {
            println!(
                "ratio time({})/time({}) = {:.3}",
                pair[1].steps,
                pair[0].steps,
                pair[1].median_s / pair[0].median_s
            );
        }
    }
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(
            out.join("bench_time.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "results": results,
                "env": env_meta(),
            }))?,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-merge / bench-robust
// ---------------------------------------------------------------------------

fn cmd_bench_merge(args: BenchMergeArgs, file: FileConfig) -> Result<()> {
    let seed = resolve(args.seed, file.seed, 0);
    let opts = TrainOpts {
        k: resolve(args.k, file.k, 64),
        iters: resolve(args.iters, file.iters, 30),
        seed,
        ..TrainOpts::default()
    };
    let (_, utterances) = load_corpus::<S>(&args.corpus)?;
    let (train, heldout) = match &args.heldout {
        Some(path) => {
            let (_, h) = load_corpus::<S>(path)?;
            (utterances, h)
        }
        None => {
            let split = utterances.len() * 4 / 5;
            let heldout = utterances[split..].to_vec();
            (utterances[..split].to_vec(), heldout)
        }
    };
    log_resolved(
        &args.out,
        &serde_json::json!({
            "command": "bench-merge", "k": opts.k, "iters": opts.iters, "seed": seed,
            "train": train.len(), "heldout": heldout.len(),
        }),
    )?;
    let report = standard_merge_sweep(&train, &heldout, &opts)?;
    print!("{}", render_merge_table(&report));
    std::fs::write(
        args.out.join("merge_sweep.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("label,merge,mean_snr_db,utterances\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},\"{}\",{},{}\n",
            r.label, r.merge, r.mean_snr_db, r.utterances
        ));
    }
    std::fs::write(args.out.join("merge_sweep.csv"), csv)?;
    if args.plot {
        let series = vec![Series {
            label: "mean SNR (dB)".into(),
            points: report
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| (i as f64, r.mean_snr_db))
                .collect(),
        }];
        std::fs::write(
            args.out.join("merge_sweep.svg"),
            line_chart("reconstruction SNR by merge config", "config index", "dB", &series),
        )?;
    }
    if report.checks.iter().any(|c| !c.pass) {
        return Err(Error::invalid("merge sweep ordering checks failed"));
    }
    Ok(())
}

fn cmd_bench_robust(args: BenchRobustArgs, file: FileConfig) -> Result<()> {
    let seed = resolve_seed(args.seed, file.seed)?;
    let mode = parse_mode(resolve_opt(args.mode, file.mode.clone()).as_deref())?;
    let grid: Vec<f64> = args
        .grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad top_p {s:?}")))
        })
        .collect::<Result<_>>()?;
    let decoders: Vec<DecoderKind> = args
        .decoders
        .split(',')
        .map(|s| DecoderKind::parse(s.trim()))
        .collect::<Result<_>>()?;

    let ar = load_weights::<S>(&args.ar, ModelKind::Ar)?;
    let books = CodebookSet::<S>::load(&args.codec)?;
    let (_, targets) = load_corpus::<S>(&args.corpus)?;
    let prompt_utts = match &args.prompts {
        Some(p) => load_corpus::<S>(p)?.1,
        None => targets.clone(),
    };
    let prompt_examples = prepare_ar_examples(&prompt_utts, &books)?;
    let cases = build_cases(&prompt_examples, &targets, books.merge.rate(0));

    log_resolved(
        &args.out,
        &serde_json::json!({
            "command": "bench-robust", "seed": seed, "grid": grid,
            "decoders": decoders.iter().map(|d| d.name()).collect::<Vec<_>>(),
            "cases": cases.len(), "mode": format!("{mode:?}"),
        }),
    )?;
    let report = robustness_sweep(&ar, &cases, &decoders, &grid, mode, seed)?;
    print!("{}", render_robustness_table(&report));
    std::fs::write(
        args.out.join("robustness.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(args.out.join("robustness.csv"), robustness_csv(&report))?;
    if args.plot {
        let series: Vec<Series> = decoders
            .iter()
            .map(|d| Series {
                label: d.name().to_string(),
                points: report
                    .cells
                    .iter()
                    .filter(|c| c.decoder == d.name())
                    .map(|c| (c.top_p, c.error_proxy))
                    .collect(),
            })
            .collect();
        std::fs::write(
            args.out.join("robustness.svg"),
            line_chart("phoneme-error proxy vs top_p", "top_p", "error proxy", &series),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check-path / dump-attn
// ---------------------------------------------------------------------------

fn cmd_check_path(args: CheckPathArgs) -> Result<()> {
    let bytes = std::fs::read(&args.file)?;
    let positions: Vec<u32> = if bytes.starts_with(b"CODE") {
        let (_, path) = valler_core::codec::load_code_matrix(&args.file)?;
        path.ok_or_else(|| Error::invalid("code file has no PATH section"))?
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("path file is neither CODE binary nor text".into()))?;
        serde_json::from_str(&text)?
    };
    let props = check_ma_properties(&positions, args.length);
    println!("locality:     {}", props.locality);
    println!("monotonicity: {}", props.monotonicity);
    println!("completeness: {}", props.completeness);
    if props.all() {
        Ok(())
    } else {
        Err(Error::invalid("alignment path violates MA properties"))
    }
}

fn cmd_dump_attn(args: DumpAttnArgs, file: FileConfig) -> Result<()> {
    let ar = load_weights::<S>(&args.ar, ModelKind::Ar)?;
    let books = CodebookSet::<S>::load(&args.codec)?;
    let (_, utterances) = load_corpus::<S>(&args.corpus)?;
    let seed = resolve(args.seed, file.seed, 0);
    let top_p = resolve(args.top_p, file.top_p, 0.8);

    let prompt = utterance(&utterances, args.prompt_id)?;
    let target = utterance(&utterances, args.target_id)?;
    let prompt_example = ar_example(prompt, &books)?;
    let m = books.merge.rate(0);
    let session = DecodeSession {
        prompt_phonemes: prompt_example.prompt.clone(),
        prompt_pairs: prompt_example
            .block_codes
            .iter()
            .copied()
            .zip(prompt_example.block_aligned.iter().copied())
            .collect(),
        target_phonemes: target.phonemes.symbols().to_vec(),
        top_p,
        mode: AdvanceMode::RestrictedSoftmax,
        step_budget: 0,
        expected_steps: target.alignment.total_frames().div_ceil(m),
        seed,
    };
    log_resolved(
        &args.out,
        &serde_json::json!({
            "command": "dump-attn", "prompt_id": args.prompt_id, "target_id": args.target_id,
            "seed": seed, "top_p": top_p,
        }),
    )?;
    let mut stepper = ArSession::new(&ar, true)?;
    let raw = ma_decode(&mut stepper, &session, ar.config.p_eos())?;
    let rows = raw.attention.unwrap_or_default();
    let truncated = raw.status == DecodeStatus::Truncated;

    let mut csv = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    std::fs::write(args.out.join("attention.csv"), csv)?;
    if args.svg {
        std::fs::write(
            args.out.join("attention.svg"),
            heatmap("prompt attention per generated step", &rows),
        )?;
    }
    let path = raw.path.as_ref().unwrap();
    std::fs::write(
        args.out.join("path.json"),
        serde_json::to_string(&path.positions)?,
    )?;
    if args.svg {
        let series = vec![Series {
            label: "pointer".into(),
            points: path
                .positions
                .iter()
                .enumerate()
                .map(|(i, &p)| (i as f64, p as f64))
                .collect(),
        }];
        std::fs::write(
            args.out.join("path.svg"),
            line_chart("alignment path", "step", "phoneme index", &series),
        )?;
    }
    println!(
        "dumped {} x {} attention matrix (truncated: {truncated}) and a {}-step path",
        rows.len(),
        rows.first().map(|r| r.len()).unwrap_or(0),
        path.positions.len()
    );
    Ok(())
}
