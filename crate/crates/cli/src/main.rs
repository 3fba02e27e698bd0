mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srt_core::audio::{MelConfig, MelFeatures};
use srt_core::curriculum::{ablate, pretrain_base, run_stage, Checkpoint, Curriculum, Pipeline, StageData};
use srt_core::datasets::{
    load_lm_text, load_manifest, synth_corpus, AudioRef, FeatureSource, ManifestRow,
};
use srt_core::decoding::{bench, bench_csv, generate, generate_batch, DecodeConfig, LmStepper};
use srt_core::lm::Vocabulary;
use srt_core::metrics::{aggregate, bleu, wer, BleuSignature, DirectionScore};
use srt_core::model::SrtModel;
use srt_core::task::{build_instruction, split_srt_output, LanguageTag, SrtSample, TagRegistry, TaskKind};
use srt_core::tensor::Matrix;

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "srt", about = "Speech recognition and translation: training, inference, evaluation")]
struct Cli {
    /// Flat `dotted.key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for model init, pretraining, stages and corpus generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for checkpoints written without an explicit `--out`.
    #[arg(long, global = true, env = "SRT_CKPT_DIR")]
    ckpt_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: TaskKind,
        /// Checkpoint to resume; required for SMT and SRT.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the base LM, then run ASR, SMT and SRT in order.
    Curriculum {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transcribe and translate one utterance.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// WAV file or `features.bin#key`.
        #[arg(long)]
        audio: String,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        /// Beam width; 1 or absent decodes greedily.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a checkpoint on an SRT manifest, or a hypothesis file against references.
    Eval {
        #[arg(long, requires = "manifest")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, requires_all = ["reference", "src", "tgt"], conflicts_with = "ckpt")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        src: Option<String>,
        #[arg(long)]
        tgt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time batched decoding; writes `strategy,batch,wall_seconds,items`.
    Bench {
        /// Checkpoint to decode with; a fresh model of the configured size otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        items: usize,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "greedy,beam")]
        strategies: Vec<String>,
        /// Decoder-state budget in bytes; larger batches are reported as `/`.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full pipeline and each leave-one-stage-out variant.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
        cfg.synth.seed = seed;
    }
    if let Some(root) = &cli.ckpt_root {
        cfg.paths.ckpt = root.clone();
    }
    match cli.command {
        Command::Train { stage, init, out } => cmd_train(&cfg, stage, init.as_deref(), out),
        Command::Curriculum { out } => cmd_curriculum(&cfg, out),
        Command::Infer {
            ckpt,
            audio,
            src,
            tgt,
            beam,
        } => cmd_infer(&cfg, &ckpt, &audio, &src, &tgt, beam),
        Command::Eval {
            ckpt,
            manifest,
            hyp,
            reference,
            src,
            tgt,
            out,
        } => {
            let out = out.unwrap_or_else(|| cfg.paths.report.clone());
            match (ckpt, manifest, hyp) {
                (Some(c), Some(m), None) => cmd_eval_ckpt(&cfg, &c, &m, &out),
                (None, None, Some(h)) => cmd_eval_files(
                    &h,
                    &reference.expect("required by clap"),
                    &src.expect("required by clap"),
                    &tgt.expect("required by clap"),
                    &out,
                ),
                _ => bail!("eval needs either --ckpt with --manifest, or --hyp with --ref, --src and --tgt"),
            }
        }
        Command::Bench {
            ckpt,
            items,
            batches,
            strategies,
            budget,
            out,
        } => cmd_bench(&cfg, ckpt.as_deref(), items, &batches, &strategies, budget, out),
        Command::Ablate { seeds, out } => cmd_ablate(&cfg, &seeds, out),
        Command::Synth { out } => {
            let corpus = synth_corpus(&cfg.synth)?;
            corpus.write(&out)?;
            println!("wrote {} utterances to {}", cfg.synth.n_samples, out.display());
            Ok(())
        }
    }
}

fn tag(code: &str) -> Result<LanguageTag> {
    Ok(TagRegistry::builtin().get(code)?)
}

fn mel_config(cfg: &RunConfig) -> MelConfig {
    MelConfig {
        n_mels: cfg.model.encoder.n_mels,
        ..MelConfig::default()
    }
}

fn load_data(cfg: &RunConfig, kind: TaskKind) -> Result<StageData> {
    let paths = cfg.manifests(kind);
    if paths.is_empty() {
        bail!("no {kind} manifests configured (set data.dir or data.{kind})");
    }
    Ok(StageData::load(&paths, kind, &mel_config(cfg))?)
}

/// Vocabulary over every configured manifest and the LM text.
fn build_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let mut chars = std::collections::BTreeSet::new();
    for kind in TaskKind::ALL {
        for path in cfg.manifests(kind) {
            if !path.exists() {
                continue;
            }
            for r in load_manifest(&path)? {
                chars.extend(r.transcription.chars());
                chars.extend(r.translation.iter().flat_map(|t| t.chars()));
            }
        }
    }
    if let Some(p) = cfg.lm_text() {
        for pair in load_lm_text(&p)? {
            chars.extend(pair.source.chars().chain(pair.target.chars()));
        }
    }
    if chars.is_empty() {
        bail!("no training text found; configure data.dir or the data.* manifests");
    }
    Ok(Vocabulary::build(chars, &TagRegistry::builtin()))
}

/// Fresh model, LM-pretrained when LM text is available and `pretrain.steps` > 0.
fn base_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let fresh = Checkpoint::fresh(&cfg.model, build_vocab(cfg)?, cfg.seed)?;
    match cfg.lm_text() {
        Some(p) if cfg.pretrain.steps > 0 => {
            let pairs = load_lm_text(&p)?;
            eprintln!("pretraining the base LM for {} steps", cfg.pretrain.steps);
            Ok(pretrain_base(&cfg.pretrain, &fresh, &pairs)?)
        }
        _ => Ok(fresh),
    }
}

fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.save(dir).with_context(|| format!("writing checkpoint {}", dir.display()))?;
    let last = ckpt.loss_log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{}: {} (step {}, last loss {last:.4})",
        ckpt.last_stage().unwrap_or("init"),
        dir.display(),
        ckpt.step
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: TaskKind, init: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let init = match (stage, init) {
        (TaskKind::Asr, None) => base_checkpoint(cfg)?,
        (TaskKind::Smt, None) => bail!("SMT requires an ASR checkpoint (pass --init)"),
        (TaskKind::Srt, None) => bail!("SRT requires an SMT checkpoint (pass --init)"),
        (_, Some(dir)) => {
            let c = Checkpoint::load(dir)?;
            c.ensure_compatible(&cfg.model)?;
            c
        }
    };
    let data = load_data(cfg, stage)?;
    let ckpt = run_stage(cfg.stage(stage), &init, &data)?;
    save(&ckpt, &out.unwrap_or_else(|| cfg.paths.ckpt.join(stage.as_str())))
}

fn cmd_curriculum(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.paths.ckpt.clone());
    let mut ckpt = base_checkpoint(cfg)?;
    if !ckpt.provenance.is_empty() {
        save(&ckpt, &root.join("base"))?;
    }
    for kind in TaskKind::ALL {
        ckpt = run_stage(cfg.stage(kind), &ckpt, &load_data(cfg, kind)?)?;
        save(&ckpt, &root.join(kind.as_str()))?;
    }
    Ok(())
}

fn decode_config(cfg: &RunConfig, model: &SrtModel, beam: Option<usize>) -> DecodeConfig {
    let mut d = DecodeConfig {
        eos_id: model.vocab().eos(),
        ..cfg.decode.clone()
    };
    match beam {
        Some(b) if b > 1 => {
            d.strategy = "beam".into();
            d.beam_size = b;
        }
        Some(_) => {
            d.strategy = "greedy".into();
            d.beam_size = 1;
        }
        None => {}
    }
    d
}

fn load_features(cfg: &RunConfig, audio: &str) -> Result<MelFeatures> {
    let mut source = FeatureSource::with_config(".", mel_config(cfg));
    source
        .load(&AudioRef::parse(audio))
        .with_context(|| format!("loading audio {audio}"))
}

fn srt_prefix(model: &SrtModel, features: &MelFeatures, src: &LanguageTag, tgt: &LanguageTag) -> Result<Matrix> {
    let sample = SrtSample::new("", src.clone(), Some(tgt.clone()), "", Some(String::new()))?;
    let states = model.encode(features)?;
    Ok(model.prefix(&states, &build_instruction(TaskKind::Srt, &sample)?)?.rows)
}

fn cmd_infer(cfg: &RunConfig, ckpt: &Path, audio: &str, src: &str, tgt: &str, beam: Option<usize>) -> Result<()> {
    let (src, tgt) = (tag(src)?, tag(tgt)?);
    let model = Checkpoint::load(ckpt)?.restore()?;
    let features = load_features(cfg, audio)?;
    let prefix = srt_prefix(&model, &features, &src, &tgt)?;
    let dcfg = decode_config(cfg, &model, beam);
    let mut stepper = LmStepper::new(model.lm(), model.store());
    let g = generate(&mut stepper, &prefix, &dcfg)?;
    let text = model.vocab().decode(&g.tokens);
    let (y, z, missed) = split_srt_output(&text, &src, &tgt);
    if missed {
        eprintln!("warning: output has no {}{} delimiter; raw output follows", src.surface(), tgt.surface());
        println!("raw: {text}");
    } else {
        println!("transcription: {y}");
        println!("translation: {z}");
    }
    if g.truncated {
        eprintln!("warning: generation stopped at max_new_tokens={}", dcfg.max_new_tokens);
    }
    Ok(())
}

fn write_report(out: &Path, name: &str, json: &serde_json::Value, table: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(json)? + "\n")?;
    fs::write(out.join(format!("{name}.txt")), table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval_ckpt(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.restore()?;
    let rows = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut source = FeatureSource::with_config(base, mel_config(cfg));
    let mut groups: BTreeMap<(LanguageTag, LanguageTag), Vec<&ManifestRow>> = BTreeMap::new();
    for r in &rows {
        let tgt = r
            .tgt
            .clone()
            .with_context(|| format!("{}: every row needs a target language", manifest.display()))?;
        groups.entry((r.src.clone(), tgt)).or_default().push(r);
    }
    let dcfg = decode_config(cfg, &model, None);
    let mut scores = Vec::new();
    let mut misses = 0;
    for ((src, tgt), rows) in &groups {
        let prefixes = rows
            .iter()
            .map(|r| srt_prefix(&model, &source.load(&r.audio_ref())?, src, tgt))
            .collect::<Result<Vec<_>>>()?;
        let mut stepper = LmStepper::new(model.lm(), model.store());
        let gens = generate_batch(&mut stepper, &prefixes, &dcfg, 16, None)?;
        let (mut ys, mut zs) = (Vec::new(), Vec::new());
        for g in &gens {
            let (y, z, missed) = split_srt_output(&model.vocab().decode(&g.tokens), src, tgt);
            misses += usize::from(missed);
            ys.push(y);
            zs.push(z);
        }
        let y_ref: Vec<&str> = rows.iter().map(|r| r.transcription.as_str()).collect();
        let z_ref: Vec<&str> = rows.iter().map(|r| r.translation.as_deref().unwrap_or_default()).collect();
        scores.push(DirectionScore {
            src: src.clone(),
            tgt: tgt.clone(),
            bleu: bleu(&z_ref, &zs, &BleuSignature::for_language(tgt))?,
            wer: wer(&y_ref, &ys).ok(),
        });
    }
    if misses > 0 {
        eprintln!("warning: {misses} outputs lacked the tag-pair delimiter and were scored as translation only");
    }
    let report = aggregate(scores)?;
    write_report(out, "eval", &serde_json::to_value(&report)?, &report.table())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn cmd_eval_files(hyp: &Path, reference: &Path, src: &str, tgt: &str, out: &Path) -> Result<()> {
    let (src, tgt) = (tag(src)?, tag(tgt)?);
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let report = aggregate(vec![DirectionScore {
        bleu: bleu(&refs, &hyps, &BleuSignature::for_language(&tgt))?,
        src,
        tgt,
        wer: None,
    }])?;
    write_report(out, "eval", &serde_json::to_value(&report)?, &report.table())
}

/// SRT prefixes over random features of 0.5 to 3 seconds.
fn bench_prefixes(cfg: &RunConfig, model: &SrtModel, items: usize) -> Result<Vec<Matrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (src, tgt) = (tag("eng")?, tag("deu")?);
    let n_mels = cfg.model.encoder.n_mels;
    (0..items)
        .map(|_| {
            let frames = rng.random_range(50..=300);
            let m = Matrix::from_shape_fn((frames, n_mels), |_| rng.random_range(-1.0..1.0));
            srt_prefix(model, &MelFeatures::new(m, 0.01)?, &src, &tgt)
        })
        .collect()
}

fn cmd_bench(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    items: usize,
    batches: &[usize],
    strategies: &[String],
    budget: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = match ckpt {
        Some(dir) => Checkpoint::load(dir)?.restore()?,
        None => SrtModel::new(&cfg.model, build_vocab(cfg).or_else(|_| fallback_vocab())?, cfg.seed)?,
    };
    let prefixes = bench_prefixes(cfg, &model, items)?;
    let configs: Vec<DecodeConfig> = strategies
        .iter()
        .map(|s| {
            let mut d = decode_config(cfg, &model, None);
            d.strategy = s.clone();
            if s == "beam" && d.beam_size < 2 {
                d.beam_size = 5;
            }
            d
        })
        .collect();
    let mut stepper = LmStepper::new(model.lm(), model.store());
    let rows = bench(&mut stepper, &prefixes, &configs, batches, budget)?;
    let csv = bench_csv(&rows);
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, &csv)?;
            print!("{csv}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn fallback_vocab() -> Result<Vocabulary> {
    Ok(Vocabulary::build(
        "abcdefghijklmnopqrstuvwxyz ".chars(),
        &TagRegistry::builtin(),
    ))
}

fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.report.clone());
    let mut reports = Vec::new();
    let mut table = String::new();
    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.apply_seed(seed);
        let data = TaskKind::ALL
            .into_iter()
            .map(|k| Ok((k, load_data(&cfg, k)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let curriculum = Curriculum {
            stages: cfg.stage.clone(),
            data,
        };
        let base = base_checkpoint(&cfg)?;
        let dcfg = DecodeConfig {
            eos_id: base.vocab.iter().position(|t| t == "</s>").unwrap_or(2),
            ..cfg.decode.clone()
        };
        let report = ablate(&curriculum, &base, &Pipeline::leave_one_out(), &dcfg)?;
        table.push_str(&format!("seed {seed}\n{}\n", report.table()));
        reports.push(serde_json::json!({ "seed": seed, "report": report }));
    }
    write_report(&out, "ablation", &serde_json::Value::Array(reports), &table)
}
