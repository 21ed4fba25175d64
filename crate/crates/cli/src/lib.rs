//! Command implementations behind the `voxtracer` binary.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use voxtracer_core::audio::{load_wav, save_wav, MelExtractor};
use voxtracer_core::channel::{transmit, ChannelSpec, CodecRegistry};
use voxtracer_core::experiment::{self, files, ExperimentConfig};
use voxtracer_core::pipeline::{hide_speech, speech_verdict, trace_chunks, trace_csv};
use voxtracer_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "voxtracer", version, about = "Traceable voice conversion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every stage and evaluate.
    Run(Common),
    /// Train the speaker extractor, registry, ID encoder and generator.
    TrainHiding(Common),
    /// Train inverter and ID decoder against the saved hiding models.
    TrainTracing(Common),
    /// Evaluate saved models on every configured channel condition.
    Evaluate(Common),
    /// Convert `source` towards `target` with the source identity hidden.
    Hide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long = "output")]
        output: PathBuf,
    },
    /// Send a waveform through a simulated channel.
    Transmit {
        #[arg(long)]
        input: PathBuf,
        /// Channel spec, e.g. `mp3@64+noise:30`.
        #[arg(long)]
        channel: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Configuration holding codec commands.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recover and verify the speaker hidden in a waveform.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Acceptance threshold; defaults to the tuned clean-channel value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Chunks to vote over (odd); defaults to the largest odd count available.
        #[arg(long)]
        chunks: Option<usize>,
        /// Also write per-chunk decisions as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Project source and recovered embeddings to 2-D and draw them.
    PlotEmbeddings {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long = "output")]
        output: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Dependency(_) | Error::Environment { .. } => 3,
        _ => 4,
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    if !c.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", c.config.display())));
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_evaluation(ev: &experiment::Evaluation) {
    for c in &ev.conditions {
        println!(
            "{}: TA {:.4} ({} chunks), EER {:.4}, MCS {:.4}, threshold {:.4}, voting {:?}",
            c.spec, c.chunk_ta, c.chunks, c.eer, c.mcs, c.threshold, c.speech_ta
        );
    }
    println!(
        "leakage: identity {:.3}, converted {:.3} (chance {:.3}, upper {:.3})",
        ev.leakage_identity.match_rate, ev.leakage_converted.match_rate, ev.leakage_converted.chance, ev.leakage_converted.chance_upper
    );
    println!("noise rejection {:.3}; distinct sources cosine {:.3}", ev.noise_rejection, ev.distinct_sources_cosine);
    println!("MTC: vc {:.4}s, hide {:.4}s per chunk", ev.mtc_vc, ev.mtc_hide);
    if let Some(r) = &ev.restoration {
        println!(
            "restoration: self L1 {:.4} (untrained {:.4}), moved toward recovered {:.3}, source cosine {:.3}",
            r.self_l1, r.untrained_self_l1, r.toward_fraction, r.source_cosine
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let o = experiment::run_all(&cfg)?;
            print_evaluation(&o.evaluation);
            println!(
                "hiding checkpoints unchanged by tracing training: {}; validation |z~ - z| {:.5} (generator inverse {:.5})",
                o.tracing.hiding_unchanged, o.tracing.latent_error_finetuned, o.tracing.latent_error_generator
            );
            println!("done in {:.0}s; outputs in {}", o.seconds, cfg.output_dir.display());
        }
        Command::TrainHiding(c) => {
            let cfg = load_config(&c)?;
            let corpus = experiment::load_corpus(&cfg)?;
            let stage = experiment::stage_hiding(&cfg, &corpus)?;
            if let Some(d) = &stage.report.diverged {
                log::warn!("{d}");
            }
            println!("hiding models written to {}", cfg.output_dir.display());
        }
        Command::TrainTracing(c) => {
            let cfg = load_config(&c)?;
            let corpus = experiment::load_corpus(&cfg)?;
            let (hiding, _) = experiment::load_hiding(&cfg.output_dir)?;
            let stage = experiment::stage_tracing(&cfg, &corpus, &hiding)?;
            println!(
                "tracing models written to {}; validation |z~ - z| {:.5} (generator inverse {:.5})",
                cfg.output_dir.display(),
                stage.latent_error_finetuned,
                stage.latent_error_generator
            );
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c)?;
            let corpus = experiment::load_corpus(&cfg)?;
            let (hiding, registry) = experiment::load_hiding(&cfg.output_dir)?;
            let tracing = experiment::load_tracing(&cfg.output_dir)?;
            let ev = experiment::stage_evaluate(&cfg, &corpus, &hiding, &registry, &tracing)?;
            print_evaluation(&ev);
        }
        Command::Hide {
            common,
            source,
            target,
            output,
        } => {
            let cfg = load_config(&common)?;
            let (hiding, _) = experiment::load_hiding(&cfg.output_dir)?;
            let out = hide_speech(&hiding, &load_wav(&source)?, &load_wav(&target)?, cfg.backend.build().as_mut())?;
            save_wav(&out.audio, &output)?;
            println!("{} chunks written to {}", out.chunks, output.display());
        }
        Command::Transmit {
            input,
            channel,
            seed,
            output,
            config,
        } => {
            let spec: ChannelSpec = channel.parse()?;
            let codecs = match config {
                Some(p) => ExperimentConfig::load(p)?.codecs,
                None => CodecRegistry::default(),
            };
            let y = transmit(&load_wav(&input)?, &spec, &codecs, seed)?;
            save_wav(&y, &output)?;
        }
        Command::Trace {
            common,
            input,
            threshold,
            chunks,
            csv,
        } => {
            let cfg = load_config(&common)?;
            let (hiding, registry) = experiment::load_hiding(&cfg.output_dir)?;
            let tracing = experiment::load_tracing(&cfg.output_dir)?;
            let threshold = match threshold {
                Some(t) => t,
                None => default_threshold(&cfg.output_dir)?,
            };
            let mel = MelExtractor::new(*hiding.extractor.mel().config())?;
            let mut traces = trace_chunks(&tracing, &load_wav(&input)?, &registry, threshold, &mel)?;
            let n = chunks.unwrap_or(if traces.len() % 2 == 1 { traces.len() } else { traces.len() - 1 });
            if n > traces.len() {
                return Err(Error::Parameter(format!("asked for {n} chunks, speech has {}", traces.len())));
            }
            traces.truncate(n);
            for (i, t) in traces.iter().enumerate() {
                let d = &t.decision;
                println!(
                    "chunk {i}: {} (best {} at {:.4}, threshold {:.4})",
                    d.claimed.as_deref().unwrap_or("none"),
                    d.best_id,
                    d.best_score,
                    d.threshold
                );
            }
            match speech_verdict(&traces)? {
                Some(s) => println!("verdict: {s} ({n} chunks)"),
                None => println!("verdict: none ({n} chunks)"),
            }
            if let Some(p) = csv {
                write(&p, &trace_csv(&traces))?;
            }
        }
        Command::PlotEmbeddings { pairs, output } => {
            let text = fs::read_to_string(&pairs).map_err(|e| Error::io(&pairs, e))?;
            let points = plot::parse_pairs(&text)?;
            let proj = plot::pca_2d(&points.iter().map(|p| p.values.clone()).collect::<Vec<_>>())?;
            let labels: Vec<&str> = points.iter().map(|p| p.speaker.as_str()).collect();
            let purity = plot::neighbor_purity(&proj, &labels)?;
            plot::render(&proj, &points, &output)?;
            println!("{} points, nearest-neighbour speaker purity {purity:.3}", points.len());
        }
    }
    Ok(())
}

/// Threshold tuned for the first evaluation condition.
fn default_threshold(dir: &Path) -> Result<f64> {
    let p = dir.join(files::THRESHOLDS);
    let text = fs::read_to_string(&p).map_err(|_| Error::Dependency(format!("{} is missing; pass --threshold or run evaluate", p.display())))?;
    text.lines()
        .nth(1)
        .and_then(|l| l.rsplit(',').next())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("{} has no threshold rows", p.display())))
}
