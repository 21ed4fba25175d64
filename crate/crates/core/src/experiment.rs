//! Experiment orchestration: data, the three training stages, evaluation
//! over channel conditions and the diagnostics around them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::audio::{chunk_split, load_wav, MelExtractor, StftConfig, Waveform, CHUNK_SAMPLES};
use crate::channel::{transmit, ChannelSpec, CodecRegistry};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::id_vae::{IdDecoder, IdEncoder};
use crate::nn::{file_sha256, Checkpoint};
use crate::pipeline::{hide_mel, HidingModels, TracingModels};
use crate::restoration::{restore_speech, self_reconstruction_l1, train_restoration, RestorationConfig, RestorationItem, RestorationModel, RestorationTraining};
use crate::rng::{derive_seed, stream, streams};
use crate::speaker::{train_extractor, separation_margin, Extractor, ExtractorConfig, ExtractorTraining, SpeakerDataset, SpeakerEmbedding, SpeakerRegistry};
use crate::synth::{toy_corpus, CorpusConfig, Utterance};
use crate::tracing::{
    chunk_vote, compute_eer, compute_mcs, leakage_probe, measure_mtc, recover_embedding, score_trials, scores_csv, tracing_accuracy, tune_threshold, verify_speaker, LeakageReport,
    MetricReport, VerificationDecision,
};
use crate::training::{hide_chunk, train_hiding, train_tracing, validation_latent_error, HidingData, TracingItem, TrainConfig, TrainReport, TrainingChunk};
use crate::vc::{convert_to_mel, fit_to_chunks, BackendSpec, VcRequest};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; every random stream derives from it.
    pub seed: Option<u64>,
    /// Directory of `<speaker>/<utterance>.wav`; synthetic voices if unset.
    pub dataset: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub extractor: ExtractorConfig,
    pub extractor_training: ExtractorTraining,
    pub train: TrainConfig,
    pub restoration: RestorationConfig,
    pub restoration_training: RestorationTraining,
    /// Voice conversion used to build converted speech.
    pub backend: BackendSpec,
    /// Evaluation conditions.
    pub conditions: Vec<ChannelSpec>,
    /// Speech lengths (in chunks) for the voting curve; odd.
    pub vote_lengths: Vec<usize>,
    pub codecs: CodecRegistry,
    pub output_dir: PathBuf,
    pub timing_reps: usize,
    pub noise_probes: usize,
    /// Train the restoration model and report its diagnostics.
    pub restoration_diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            dataset: None,
            corpus: CorpusConfig::default(),
            extractor: ExtractorConfig::default(),
            extractor_training: ExtractorTraining::default(),
            train: TrainConfig::default(),
            restoration: RestorationConfig::default(),
            restoration_training: RestorationTraining::default(),
            backend: BackendSpec::TimbreTransfer,
            conditions: vec![ChannelSpec::identity()],
            vote_lengths: vec![1, 3, 5],
            codecs: CodecRegistry::default(),
            output_dir: PathBuf::from("runs/toy"),
            timing_reps: 10,
            noise_probes: 100,
            restoration_diagnostics: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("`seed` is required".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.train.validate()?;
        self.restoration.validate()?;
        if self.conditions.is_empty() {
            return Err(Error::Config("at least one evaluation condition is required".into()));
        }
        for c in &self.conditions {
            c.validate()?;
        }
        if self.vote_lengths.is_empty() || self.vote_lengths.iter().any(|n| n % 2 == 0) {
            return Err(Error::Config("vote lengths must be a non-empty list of odd numbers".into()));
        }
        let longest = *self.vote_lengths.iter().max().expect("non-empty");
        if longest > self.corpus.test_chunks {
            return Err(Error::Config(format!(
                "vote length {longest} exceeds the {} chunks per test utterance",
                self.corpus.test_chunks
            )));
        }
        if self.timing_reps < 10 {
            return Err(Error::Config("timing needs at least 10 repetitions".into()));
        }
        if let Some(d) = &self.dataset {
            if !d.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", d.display())));
            }
        }
        Ok(())
    }

    /// Copies of the stage configs with the experiment seed applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            seed: self.seed()?,
            ..self.train.clone()
        })
    }

    fn stft(&self) -> StftConfig {
        self.extractor.stft
    }
}

/// Labelled utterances split three ways.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<String>,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn id(&self, u: &Utterance) -> &str {
        &self.speakers[u.speaker]
    }
}

/// Synthetic corpus, or the dataset directory when configured. In a dataset
/// each speaker's sorted files go: last `test_utterances` to test, the
/// `val_utterances` before them to validation, the rest to training.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let c = &cfg.corpus;
    let Some(dir) = &cfg.dataset else {
        let toy = toy_corpus(c, &mut stream(cfg.seed()?, streams::CORPUS))?;
        return Ok(Corpus {
            speakers: (0..c.speakers).map(|s| format!("spk{s:02}")).collect(),
            train: toy.train,
            val: toy.val,
            test: toy.test,
        });
    };
    let mut speakers = Vec::new();
    let mut corpus = Corpus {
        speakers: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for sdir in entries {
        let mut files: Vec<PathBuf> = fs::read_dir(&sdir)
            .map_err(|e| Error::io(&sdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        files.sort();
        if files.len() < c.val_utterances + c.test_utterances + 2 {
            return Err(Error::Config(format!("{} has too few utterances", sdir.display())));
        }
        let s = speakers.len();
        speakers.push(sdir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let n_train = files.len() - c.val_utterances - c.test_utterances;
        for (i, f) in files.iter().enumerate() {
            let audio = load_wav(f)?;
            let u = Utterance { speaker: s, audio };
            if i < n_train {
                corpus.train.push(u);
            } else if i < n_train + c.val_utterances {
                corpus.val.push(u);
            } else {
                corpus.test.push(u);
            }
        }
    }
    if speakers.len() < 2 {
        return Err(Error::Config(format!("{} needs at least 2 speaker directories", dir.display())));
    }
    corpus.speakers = speakers;
    Ok(corpus)
}

/// Output file names inside the run directory.
pub mod files {
    pub const EXTRACTOR: &str = "extractor.safetensors";
    pub const ENCODER: &str = "id-encoder.safetensors";
    pub const GENERATOR: &str = "generator.safetensors";
    pub const INVERTER: &str = "inverter.safetensors";
    pub const DECODER: &str = "id-decoder.safetensors";
    pub const RESTORATION: &str = "restoration.safetensors";
    pub const REGISTRY: &str = "registry.tsv";
    pub const HIDING_REPORT: &str = "hiding_report.csv";
    pub const TRACING_REPORT: &str = "tracing_report.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const THRESHOLDS: &str = "thresholds.csv";
    pub const PAIRS: &str = "pairs.tsv";
}

/// One line per embedding: `speaker<TAB>source|recovered<TAB>v1 v2 ...`.
pub fn pairs_tsv(items: &[(String, SpeakerEmbedding, SpeakerEmbedding)]) -> String {
    let row = |id: &str, kind: &str, e: &SpeakerEmbedding| {
        let v: Vec<String> = e.values().iter().map(|x| format!("{x:e}")).collect();
        format!("{id}\t{kind}\t{}\n", v.join(" "))
    };
    items
        .iter()
        .flat_map(|(id, src, rec)| [row(id, "source", src), row(id, "recovered", rec)])
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn target_for(corpus: &Corpus, source: usize, k: usize) -> &Utterance {
    let n = corpus.speakers.len();
    let t = (source + 1 + k % (n - 1)) % n;
    corpus.train.iter().find(|u| u.speaker == t).expect("every speaker has training speech")
}

/// Converted mel of `u` towards another speaker, fitted to whole chunks.
fn converted_mel(cfg: &ExperimentConfig, corpus: &Corpus, u: &Utterance, k: usize) -> Result<crate::audio::MelSpectrogram> {
    let target = target_for(corpus, u.speaker, k);
    let req = VcRequest::new(u.audio.clone(), target.audio.clone())?;
    let mel = convert_to_mel(&req, cfg.backend.build().as_mut(), &cfg.stft())?;
    fit_to_chunks(&mel, CHUNK_SAMPLES / cfg.stft().hop)
}

fn tracing_items(cfg: &ExperimentConfig, corpus: &Corpus, utts: &[Utterance], extractor: &Extractor) -> Result<Vec<TracingItem>> {
    let cf = CHUNK_SAMPLES / cfg.stft().hop;
    let mut items = Vec::new();
    for (k, u) in utts.iter().enumerate() {
        let v = extractor.extract(&u.audio)?;
        let mel = converted_mel(cfg, corpus, u, k)?;
        for c in 0..mel.frames() / cf {
            items.push(TracingItem {
                embedding: v.clone(),
                mel: mel.slice_frames(c * cf, cf)?,
            });
        }
    }
    Ok(items)
}

pub struct HidingStage {
    pub models: HidingModels,
    pub registry: SpeakerRegistry,
    pub report: TrainReport,
    pub extractor_margin: f64,
}

/// Extractor, registry and the hiding models; checkpoints are written to the
/// output directory.
pub fn stage_hiding(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<HidingStage> {
    let seed = cfg.seed()?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let mel = MelExtractor::new(cfg.stft())?;
    let data = SpeakerDataset {
        utterances: corpus
            .train
            .iter()
            .map(|u| Ok((u.speaker, mel.compute(&u.audio)?)))
            .collect::<Result<_>>()?,
    };
    let extractor = train_extractor(&data, cfg.extractor, &cfg.extractor_training, &mut stream(seed, streams::EXTRACTOR_INIT))?;
    let mut per_speaker: BTreeMap<usize, Vec<SpeakerEmbedding>> = BTreeMap::new();
    let mut labelled = Vec::new();
    for u in &corpus.train {
        let e = extractor.extract(&u.audio)?;
        labelled.push((u.speaker, e.clone()));
        per_speaker.entry(u.speaker).or_default().push(e);
    }
    let mut registry = SpeakerRegistry::new();
    for (s, es) in &per_speaker {
        registry.register(&corpus.speakers[*s], es)?;
    }
    let extractor_margin = separation_margin(&labelled)?;
    log::info!("extractor separation margin {extractor_margin:.3}");

    let mut chunks = Vec::new();
    for u in &corpus.train {
        for c in chunk_split(&u.audio, CHUNK_SAMPLES)? {
            let m = mel.compute(&c)?;
            chunks.push(TrainingChunk { audio: c, mel: m });
        }
    }
    let hiding = HidingData {
        embeddings: labelled.into_iter().map(|(_, e)| e).collect(),
        chunks,
    };
    let (encoder, generator, report) = train_hiding(&hiding, &cfg.train_config()?)?;
    extractor.save(out.join(files::EXTRACTOR), None)?;
    encoder.save(out.join(files::ENCODER), None)?;
    generator.save(out.join(files::GENERATOR), None)?;
    registry.save(out.join(files::REGISTRY))?;
    report.save(out.join(files::HIDING_REPORT))?;
    Ok(HidingStage {
        models: HidingModels {
            extractor,
            encoder,
            generator,
        },
        registry,
        report,
        extractor_margin,
    })
}

/// Load the hiding checkpoints and registry written by [`stage_hiding`].
pub fn load_hiding(dir: &Path) -> Result<(HidingModels, SpeakerRegistry)> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency(format!("{} is missing; run train-hiding first", p.display())))
        }
    };
    let (extractor, _) = Extractor::load(need(files::EXTRACTOR)?)?;
    let (encoder, _) = IdEncoder::load(need(files::ENCODER)?)?;
    let (generator, _) = FlowModel::load(need(files::GENERATOR)?)?;
    let registry = SpeakerRegistry::load(need(files::REGISTRY)?)?;
    Ok((
        HidingModels {
            extractor,
            encoder,
            generator,
        },
        registry,
    ))
}

pub fn load_tracing(dir: &Path) -> Result<TracingModels> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency(format!("{} is missing; run train-tracing first", p.display())))
        }
    };
    let (inverter, _) = FlowModel::load(need(files::INVERTER)?)?;
    let (decoder, _) = IdDecoder::load(need(files::DECODER)?)?;
    Ok(TracingModels { inverter, decoder })
}

pub struct TracingStage {
    pub models: TracingModels,
    pub report: TrainReport,
    /// Hiding checkpoint files and freshly serialized hiding models hash the
    /// same after tracing training as before it.
    pub hiding_unchanged: bool,
    pub latent_error_finetuned: f64,
    pub latent_error_generator: f64,
}

fn hiding_hashes(dir: &Path, hiding: &HidingModels) -> Result<Vec<String>> {
    let tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    hiding.encoder.save(tmp.path().join("e"), None)?;
    hiding.generator.save(tmp.path().join("g"), None)?;
    Ok(vec![
        file_sha256(dir.join(files::ENCODER))?,
        file_sha256(dir.join(files::GENERATOR))?,
        file_sha256(tmp.path().join("e"))?,
        file_sha256(tmp.path().join("g"))?,
    ])
}

/// Train inverter and decoder against the frozen hiding models.
pub fn stage_tracing(cfg: &ExperimentConfig, corpus: &Corpus, hiding: &HidingModels) -> Result<TracingStage> {
    let out = &cfg.output_dir;
    let before = hiding_hashes(out, hiding)?;
    let tc = cfg.train_config()?;
    let items = tracing_items(cfg, corpus, &corpus.train, &hiding.extractor)?;
    let (inverter, decoder, report) = train_tracing(&items, &hiding.encoder, &hiding.generator, &tc, &cfg.codecs)?;
    let after = hiding_hashes(out, hiding)?;
    let gen_sha = before[1].clone();
    inverter.save(out.join(files::INVERTER), Some(gen_sha))?;
    decoder.save(out.join(files::DECODER), None)?;
    report.save(out.join(files::TRACING_REPORT))?;
    let val_items = tracing_items(cfg, corpus, &corpus.val, &hiding.extractor)?;
    let seed = derive_seed(tc.seed, streams::EVALUATION, u64::MAX);
    let latent_error_finetuned = validation_latent_error(&inverter, &val_items, &hiding.encoder, &hiding.generator, &tc.channels, &cfg.codecs, seed)?;
    let latent_error_generator = validation_latent_error(&hiding.generator, &val_items, &hiding.encoder, &hiding.generator, &tc.channels, &cfg.codecs, seed)?;
    log::info!("validation |z~ - z|: fine-tuned {latent_error_finetuned:.5}, generator {latent_error_generator:.5}");
    Ok(TracingStage {
        models: TracingModels { inverter, decoder },
        report,
        hiding_unchanged: before == after,
        latent_error_finetuned,
        latent_error_generator,
    })
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub spec: ChannelSpec,
    pub threshold: f64,
    /// Per-chunk tracing accuracy on the test split.
    pub chunk_ta: f64,
    pub chunks: usize,
    pub eer: f64,
    pub mcs: f64,
    /// `(N, speech-level TA)` for every configured vote length.
    pub speech_ta: Vec<(usize, f64)>,
    pub utterances: usize,
    pub mtc_trace: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub conditions: Vec<ConditionResult>,
    pub leakage_identity: LeakageReport,
    pub leakage_converted: LeakageReport,
    /// Share of pure-noise chunks that verify as nobody.
    pub noise_rejection: f64,
    /// Cosine between recovered embeddings of two sources hidden in speech
    /// converted towards the same target.
    pub distinct_sources_cosine: f64,
    pub mtc_vc: f64,
    pub mtc_hide: f64,
    pub restoration: Option<RestorationReport>,
}

#[derive(Debug, Clone)]
pub struct RestorationReport {
    pub self_l1: f64,
    pub untrained_self_l1: f64,
    /// Share of test speeches whose restored version sits closer to the
    /// recovered embedding than the degraded input does.
    pub toward_fraction: f64,
    pub source_cosine: f64,
}

struct Hidden {
    truth: String,
    v: SpeakerEmbedding,
    audio: Waveform,
}

fn hide_split(cfg: &ExperimentConfig, corpus: &Corpus, utts: &[Utterance], hiding: &HidingModels) -> Result<Vec<Hidden>> {
    utts.iter()
        .enumerate()
        .map(|(k, u)| {
            let v = hiding.extractor.extract(&u.audio)?;
            let mel = converted_mel(cfg, corpus, u, k)?;
            Ok(Hidden {
                truth: corpus.id(u).to_string(),
                audio: hide_mel(&hiding.encoder, &hiding.generator, &v, &mel)?,
                v,
            })
        })
        .collect()
}

/// Recovered per-chunk embeddings of every hidden speech after `spec`.
fn recover_split(
    hidden: &[Hidden],
    spec: &ChannelSpec,
    codecs: &CodecRegistry,
    tracing: &TracingModels,
    mel: &MelExtractor,
    seed: u64,
) -> Result<Vec<Vec<SpeakerEmbedding>>> {
    hidden
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let x = transmit(&h.audio, spec, codecs, derive_seed(seed, streams::CHANNEL, i as u64))?;
            chunk_split(&x, CHUNK_SAMPLES)?
                .iter()
                .map(|c| recover_embedding(c, &tracing.inverter, &tracing.decoder, mel))
                .collect()
        })
        .collect()
}

fn labelled(hidden: &[Hidden], rec: &[Vec<SpeakerEmbedding>]) -> Vec<(String, SpeakerEmbedding)> {
    hidden
        .iter()
        .zip(rec)
        .flat_map(|(h, r)| r.iter().map(|e| (h.truth.clone(), e.clone())))
        .collect()
}

/// Evaluate every condition and run the diagnostics; metric, threshold and
/// score files are written to the output directory.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    hiding: &HidingModels,
    registry: &SpeakerRegistry,
    tracing: &TracingModels,
) -> Result<Evaluation> {
    let seed = cfg.seed()?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let mel = MelExtractor::new(cfg.stft())?;
    let val = hide_split(cfg, corpus, &corpus.val, hiding)?;
    let test = hide_split(cfg, corpus, &corpus.test, hiding)?;
    let mut conditions = Vec::new();
    let mut thresholds = String::from("condition,threshold\n");
    for (ci, spec) in cfg.conditions.iter().enumerate() {
        let cseed = derive_seed(seed, streams::EVALUATION, ci as u64);
        let rv = recover_split(&val, spec, &cfg.codecs, tracing, &mel, cseed)?;
        let (g, i) = score_trials(&labelled(&val, &rv), registry);
        let threshold = tune_threshold(&g, &i)?;
        let rt = recover_split(&test, spec, &cfg.codecs, tracing, &mel, cseed ^ 1)?;
        let trials = labelled(&test, &rt);
        let (g, i) = score_trials(&trials, registry);
        fs::write(out.join(format!("scores_{ci}.csv")), scores_csv(&g, &i)).map_err(|e| Error::io(out, e))?;
        let eer = compute_eer(&g, &i)?;
        let decisions: Vec<Vec<VerificationDecision>> = rt
            .iter()
            .map(|r| r.iter().map(|e| verify_speaker(e, registry, threshold)).collect())
            .collect::<Result<_>>()?;
        let flat: Vec<(VerificationDecision, String)> = decisions
            .iter()
            .zip(&test)
            .flat_map(|(d, h)| d.iter().map(|d| (d.clone(), h.truth.clone())))
            .collect();
        let chunk_ta = tracing_accuracy(&flat)?;
        let pairs: Vec<(SpeakerEmbedding, SpeakerEmbedding)> = rt
            .iter()
            .zip(&test)
            .flat_map(|(r, h)| r.iter().map(|e| (e.clone(), h.v.clone())))
            .collect();
        let mcs = compute_mcs(&pairs)?;
        if ci == 0 {
            let items: Vec<_> = rt
                .iter()
                .zip(&test)
                .flat_map(|(r, h)| r.iter().map(|e| (h.truth.clone(), h.v.clone(), e.clone())))
                .collect();
            fs::write(out.join(files::PAIRS), pairs_tsv(&items)).map_err(|e| Error::io(out, e))?;
        }
        let mut speech_ta = Vec::new();
        for &n in &cfg.vote_lengths {
            let mut ok = 0usize;
            for (d, h) in decisions.iter().zip(&test) {
                if d.len() >= n && chunk_vote(&d[..n], &h.truth)? {
                    ok += 1;
                }
            }
            speech_ta.push((n, ok as f64 / test.len() as f64));
        }
        let probe = chunk_split(&test[0].audio, CHUNK_SAMPLES)?.remove(0);
        let mtc_trace = measure_mtc(cfg.timing_reps, || recover_embedding(&probe, &tracing.inverter, &tracing.decoder, &mel))?;
        log::info!("condition {spec}: threshold {threshold:.3}, chunk TA {chunk_ta:.3}, EER {eer:.3}, MCS {mcs:.3}, voting {speech_ta:?}");
        thresholds.push_str(&format!("{spec},{threshold:.9}\n"));
        conditions.push(ConditionResult {
            spec: spec.clone(),
            threshold,
            chunk_ta,
            chunks: flat.len(),
            eer,
            mcs,
            speech_ta,
            utterances: test.len(),
            mtc_trace,
        });
    }

    let rows: Vec<MetricReport> = conditions
        .iter()
        .flat_map(|c| {
            let (codec, bitrate) = (c.spec.codec.name().to_string(), c.spec.bitrate.map(|b| b.to_string()).unwrap_or_default());
            std::iter::once(MetricReport {
                condition: c.spec.to_string(),
                codec: codec.clone(),
                bitrate: bitrate.clone(),
                n: 1,
                ta: c.chunk_ta,
                eer: c.eer,
                mcs: c.mcs,
                mtc: c.mtc_trace,
            })
            .chain(c.speech_ta.iter().filter(|(n, _)| *n > 1).map(move |&(n, ta)| MetricReport {
                condition: c.spec.to_string(),
                codec: codec.clone(),
                bitrate: bitrate.clone(),
                n,
                ta,
                eer: c.eer,
                mcs: c.mcs,
                mtc: c.mtc_trace,
            }))
        })
        .collect();
    fs::write(out.join(files::METRICS), crate::tracing::metrics_csv(&rows)).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(files::THRESHOLDS), thresholds).map_err(|e| Error::io(out, e))?;

    // leakage: direct extraction from converted speech without hiding
    let direct = |u: &Utterance| hiding.extractor.extract(&u.audio).map(|e| (corpus.id(u).to_string(), e));
    let val_direct: Vec<(String, SpeakerEmbedding)> = corpus.val.iter().map(direct).collect::<Result<_>>()?;
    let (g, i) = score_trials(&val_direct, registry);
    let direct_threshold = tune_threshold(&g, &i)?;
    let mut identity = Vec::new();
    let mut converted = Vec::new();
    for (k, u) in corpus.test.iter().enumerate() {
        let id = corpus.id(u).to_string();
        identity.push((hiding.extractor.embed_mel(&mel.compute(&u.audio)?)?, id.clone()));
        converted.push((hiding.extractor.embed_mel(&converted_mel(cfg, corpus, u, k)?)?, id));
    }
    let leakage_identity = leakage_probe(&identity, registry, direct_threshold)?;
    let leakage_converted = leakage_probe(&converted, registry, direct_threshold)?;
    log::info!("leakage: identity {:.3}, converted {:.3} (chance {:.3}, upper {:.3})", leakage_identity.match_rate, leakage_converted.match_rate, leakage_converted.chance, leakage_converted.chance_upper);

    let noise_threshold = conditions[0].threshold;
    let mut rng = stream(seed, streams::EVALUATION);
    let normal = rand_distr::Normal::new(0.0f32, 0.1).expect("valid sigma");
    let mut rejected = 0usize;
    for _ in 0..cfg.noise_probes {
        let x: Vec<f32> = (0..CHUNK_SAMPLES).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        let w = Waveform::new(x, cfg.stft().sample_rate)?;
        let e = recover_embedding(&w, &tracing.inverter, &tracing.decoder, &mel)?;
        if verify_speaker(&e, registry, noise_threshold)?.claimed.is_none() {
            rejected += 1;
        }
    }
    let noise_rejection = rejected as f64 / cfg.noise_probes.max(1) as f64;

    let distinct_sources_cosine = distinct_sources(cfg, corpus, hiding, tracing, &mel)?;

    let u = &corpus.test[0];
    let t = target_for(corpus, u.speaker, 0);
    let req = VcRequest::new(u.audio.clone(), t.audio.clone())?;
    let mtc_vc = measure_mtc(cfg.timing_reps, || convert_to_mel(&req, cfg.backend.build().as_mut(), &cfg.stft()))?;
    let cmel = converted_mel(cfg, corpus, u, 0)?.slice_frames(0, CHUNK_SAMPLES / cfg.stft().hop)?;
    let v = &test[0].v;
    let mtc_hide = measure_mtc(cfg.timing_reps, || hide_chunk(&hiding.encoder, &hiding.generator, v, &cmel))?;

    let restoration = if cfg.restoration_diagnostics {
        Some(restoration_report(cfg, corpus, hiding, tracing, &test, &mel)?)
    } else {
        None
    };
    Ok(Evaluation {
        conditions,
        leakage_identity,
        leakage_converted,
        noise_rejection,
        distinct_sources_cosine,
        mtc_vc,
        mtc_hide,
        restoration,
    })
}

fn mean_embedding(es: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    SpeakerEmbedding::mean(es)
}

fn distinct_sources(cfg: &ExperimentConfig, corpus: &Corpus, hiding: &HidingModels, tracing: &TracingModels, mel: &MelExtractor) -> Result<f64> {
    let n = corpus.speakers.len();
    let a = corpus.test.iter().find(|u| u.speaker == 0).expect("speaker 0 has test speech");
    let b = corpus.test.iter().find(|u| u.speaker == n / 2).expect("every speaker has test speech");
    let target = corpus.train.iter().find(|u| u.speaker == n - 1).expect("every speaker has training speech");
    let mut rec = Vec::new();
    for u in [a, b] {
        let v = hiding.extractor.extract(&u.audio)?;
        let req = VcRequest::new(u.audio.clone(), target.audio.clone())?;
        let m = fit_to_chunks(&convert_to_mel(&req, cfg.backend.build().as_mut(), &cfg.stft())?, CHUNK_SAMPLES / cfg.stft().hop)?;
        let w = hide_mel(&hiding.encoder, &hiding.generator, &v, &m)?;
        let es: Vec<SpeakerEmbedding> = chunk_split(&w, CHUNK_SAMPLES)?
            .iter()
            .map(|c| recover_embedding(c, &tracing.inverter, &tracing.decoder, mel))
            .collect::<Result<_>>()?;
        rec.push(mean_embedding(&es)?);
    }
    Ok(rec[0].cosine(&rec[1]))
}

fn restoration_report(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    hiding: &HidingModels,
    tracing: &TracingModels,
    test: &[Hidden],
    mel: &MelExtractor,
) -> Result<RestorationReport> {
    let item = |u: &Utterance| -> Result<RestorationItem> {
        Ok(RestorationItem {
            mel: mel.compute(&u.audio)?,
            embedding: hiding.extractor.extract(&u.audio)?,
        })
    };
    let train: Vec<RestorationItem> = corpus.train.iter().map(item).collect::<Result<_>>()?;
    let held: Vec<RestorationItem> = corpus.val.iter().map(item).collect::<Result<_>>()?;
    let hp = RestorationTraining {
        seed: cfg.seed()?,
        ..cfg.restoration_training
    };
    let untrained = RestorationModel::new(cfg.restoration, DType::F32, &mut stream(hp.seed, streams::RESTORATION_INIT))?;
    let untrained_self_l1 = self_reconstruction_l1(&untrained, &held)?;
    let model = train_restoration(&train, &held, cfg.restoration, &hp)?;
    model.save(cfg.output_dir.join(files::RESTORATION), None)?;
    let self_l1 = self_reconstruction_l1(&model, &held)?;
    let mut toward = 0usize;
    let mut src = 0.0;
    for (k, h) in test.iter().enumerate() {
        let chunks = chunk_split(&h.audio, CHUNK_SAMPLES)?;
        let es: Vec<SpeakerEmbedding> = chunks
            .iter()
            .map(|c| recover_embedding(c, &tracing.inverter, &tracing.decoder, mel))
            .collect::<Result<_>>()?;
        let v_rec = mean_embedding(&es)?;
        let restored = restore_speech(&h.audio, &v_rec, &model, &hiding.generator, derive_seed(hp.seed, streams::VOCODER_LATENT, k as u64))?;
        let after = hiding.extractor.extract(&restored)?;
        let before = hiding.extractor.extract(&h.audio)?;
        if after.cosine(&v_rec) > before.cosine(&v_rec) {
            toward += 1;
        }
        src += after.cosine(&h.v);
    }
    Ok(RestorationReport {
        self_l1,
        untrained_self_l1,
        toward_fraction: toward as f64 / test.len() as f64,
        source_cosine: src / test.len() as f64,
    })
}

/// Everything one full run produces.
pub struct Outcome {
    pub corpus: Corpus,
    pub hiding: HidingStage,
    pub tracing: TracingStage,
    pub evaluation: Evaluation,
    pub seconds: f64,
}

pub fn run_all(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let start = Instant::now();
    let corpus = load_corpus(cfg)?;
    let hiding = stage_hiding(cfg, &corpus)?;
    let tracing = stage_tracing(cfg, &corpus, &hiding.models)?;
    let evaluation = stage_evaluate(cfg, &corpus, &hiding.models, &hiding.registry, &tracing.models)?;
    Ok(Outcome {
        corpus,
        hiding,
        tracing,
        evaluation,
        seconds: start.elapsed().as_secs_f64(),
    })
}
