//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mtevc_core::autodiff::suite::{describe, primitive_checks};
use mtevc_core::checks::model_checks;
use mtevc_core::wavenet::GlobalConditioning;

use crate::cache::{prepare, synth_dataset, FeatureCache};
use crate::config::RunConfig;
use crate::error::{exit, Error, Result};
use crate::features::read_ppg;
use crate::manifest::Manifest;
use crate::models;
use crate::report::evaluate;
use crate::synthesis::{analysis_mel, convert_manifest, convert_utterance, Generator, GeneratorKind, PairList, Selection};
use crate::train::{train_conversion, train_vocoder, VocoderKind};
use crate::wav::{read_wav, write_wav};

/// Pair list batch conversion maintains in its output directory.
pub const PAIRS_FILE: &str = "pairs.json";

#[derive(Debug, Parser)]
#[command(name = "mtevc", version, about = "Multi-target emotional voice conversion toolkit")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Turn skipped or missing inputs into a failing exit code.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Data {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache written by `prepare`.
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args)]
pub struct Synthesis {
    /// griffinlim, wavenet or flowavenet.
    #[arg(long, default_value = "griffinlim")]
    pub generator: String,
    /// Vocoder checkpoint (neural generators only).
    #[arg(long)]
    pub vocoder: Option<PathBuf>,
    /// Speaker id (or name, with --manifest) for vocoder conditioning.
    #[arg(long)]
    pub speaker: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured synthetic multi-emotion corpus.
    SynthDataset,
    /// Compute and cache Mel features for a manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the multi-target conversion model.
    TrainConversion {
        #[command(flatten)]
        data: Data,
        /// Train the Mel-only variant.
        #[arg(long)]
        baseline: bool,
    },
    /// Train a vocoder: wavenet or flowavenet.
    TrainVocoder {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        kind: String,
    },
    /// Convert one WAV (with --wav) or every parallel source utterance of the speaker.
    Convert {
        #[arg(long)]
        manifest: PathBuf,
        /// Conversion checkpoint.
        #[arg(long)]
        conversion: PathBuf,
        #[command(flatten)]
        synthesis: Synthesis,
        #[arg(long, requires = "emotion")]
        wav: Option<PathBuf>,
        #[arg(long, requires = "wav")]
        ppg: Option<PathBuf>,
        /// Target emotion id or name.
        #[arg(long)]
        emotion: Option<String>,
        /// Batch mode: only sentences held out from conversion training.
        #[arg(long, conflicts_with = "wav")]
        held_out: bool,
    },
    /// Vocode a Mel feature file or the analysis of a WAV.
    Synthesize {
        /// `.mel` feature file or `.wav`.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        synthesis: Synthesis,
        #[arg(long)]
        emotion: String,
        /// Resolves speaker and emotion names.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score converted/target pairs into report.json and report.txt.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Finite-difference check of every primitive and the tiny models.
    Gradcheck,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("--out <dir> is required".into()))
    }
}

fn resolve_id(key: &str, manifest: Option<&Manifest>, speaker: bool) -> Result<usize> {
    match manifest {
        Some(m) if speaker => m.speaker(key),
        Some(m) => m.emotion(key),
        None => key.parse().map_err(|_| Error::Usage(format!("{key:?} is not a numeric id (pass --manifest to use names)"))),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

fn out_file(dir: &Path, name: String) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    Ok(dir.join(name))
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::SynthDataset => {
            let out = cli.out_dir()?;
            let m = synth_dataset(&cfg, out)?;
            println!("wrote {} utterances and {}", m.entries.len(), out.join("manifest.json").display());
        }
        Command::Prepare { manifest } => {
            let m = Manifest::load(manifest)?;
            let r = prepare(&cfg, &m, cli.out_dir()?, cli.strict)?;
            println!("computed {}, reused {}, skipped {}", r.computed, r.reused, r.skipped.len());
            for s in &r.skipped {
                eprintln!("skipped {}: {}", s.utterance_id, s.reason);
            }
        }
        Command::TrainConversion { data, baseline } => {
            let m = Manifest::load(&data.manifest)?;
            let cache = FeatureCache::open(&data.features, &cfg.features)?;
            let run = train_conversion(&cfg, &m, &cache, cli.out_dir()?, *baseline)?;
            println!("{} training / {} validation pairs", run.train_pairs, run.validation_pairs);
            if let (Some(first), Some(last)) = (run.log.validation.first(), run.log.validation.last()) {
                println!("validation L1 {:.4} at step {} -> {:.4} at step {}", first.1, first.0, last.1, last.0);
            }
            println!("wrote {}", run.checkpoint.display());
        }
        Command::TrainVocoder { data, kind } => {
            let kind: VocoderKind = kind.parse()?;
            let m = Manifest::load(&data.manifest)?;
            let cache = FeatureCache::open(&data.features, &cfg.features)?;
            let run = train_vocoder(&cfg, &m, &cache, kind, cli.out_dir()?)?;
            let l = &run.log.train_loss;
            if let (Some(a), Some(b)) = (l.first(), l.last()) {
                println!("{kind} loss {a:.4} -> {b:.4} over {} steps", l.len());
            }
            println!("wrote {}", run.checkpoint.display());
        }
        Command::Convert { manifest, conversion, synthesis, wav, ppg, emotion, held_out } => {
            let kind: GeneratorKind = synthesis.generator.parse()?;
            let m = Manifest::load(manifest)?;
            let speaker = m.speaker(&synthesis.speaker)?;
            // both checkpoints are checked against the config before any work
            let model = models::load_conversion(conversion, &cfg)?.model;
            let generator = Generator::load(kind, synthesis.vocoder.as_deref(), &cfg)?;
            let out = cli.out_dir()?;
            match wav {
                Some(src) => {
                    let key = emotion.as_deref().expect("clap requires --emotion with --wav");
                    let gc = GlobalConditioning::new(speaker, m.emotion(key)?);
                    let ppg = ppg.as_deref().map(read_ppg).transpose()?;
                    let (_, audio) = convert_utterance(&cfg, &model, &generator, &read_wav(src)?, ppg.as_ref(), gc, cfg.seed)?;
                    let path = out_file(out, format!("{}_{}_{kind}.wav", file_stem(src), m.emotions[&gc.emotion]))?;
                    write_wav(&path, &audio)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    let selection = if *held_out { Selection::HeldOut } else { Selection::All };
                    let list = convert_manifest(&cfg, &m, &model, kind, &generator, speaker, selection, out)?;
                    // one pair list per output directory, shared by all generators
                    let path = out.join(PAIRS_FILE);
                    let mut all = if path.exists() { PairList::load(&path)? } else { PairList::default() };
                    all.pairs.retain(|p| p.system != kind.name());
                    all.pairs.extend(list.pairs.iter().cloned());
                    all.save(&path)?;
                    println!("converted {} utterances; wrote {}", list.pairs.len(), path.display());
                }
            }
        }
        Command::Synthesize { input, synthesis, emotion, manifest } => {
            let kind: GeneratorKind = synthesis.generator.parse()?;
            let m = manifest.as_deref().map(Manifest::load).transpose()?;
            let gc = GlobalConditioning::new(resolve_id(&synthesis.speaker, m.as_ref(), true)?, resolve_id(emotion, m.as_ref(), false)?);
            let generator = Generator::load(kind, synthesis.vocoder.as_deref(), &cfg)?;
            let mel = analysis_mel(input, &cfg)?;
            let audio = generator.render(&mel, gc, &cfg, cfg.seed)?;
            let path = out_file(cli.out_dir()?, format!("{}_{kind}.wav", file_stem(input)))?;
            write_wav(&path, &audio)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { pairs } => {
            let list = PairList::load(pairs)?;
            let root = pairs.parent().unwrap_or(Path::new(""));
            let report = evaluate(&list, root, &cfg.features, cli.out_dir()?, cli.strict)?;
            print!("{}", report.table());
        }
        Command::Gradcheck => {
            let mut checks = primitive_checks(cfg.seed)?;
            checks.extend(model_checks(cfg.seed)?);
            let lines: Vec<String> = checks.iter().map(describe).collect();
            for l in &lines {
                println!("{l}");
            }
            if let Some(out) = &cli.out {
                let path = out_file(out, "gradcheck.txt".into())?;
                fs::write(&path, lines.join("\n") + "\n").map_err(Error::io(&path))?;
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            if !failed.is_empty() {
                return Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
