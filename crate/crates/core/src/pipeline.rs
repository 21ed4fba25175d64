//! Whole-speech hiding and tracing on top of the per-chunk models.

use std::fmt::Write as _;

use crate::audio::{chunk_split, MelExtractor, MelSpectrogram, StftConfig, Waveform, CHUNK_SAMPLES};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::id_vae::{IdDecoder, IdEncoder};
use crate::speaker::{Extractor, SpeakerEmbedding, SpeakerRegistry};
use crate::tracing::{chunk_vote, recover_embedding, verify_speaker, VerificationDecision};
use crate::training::hide_chunk;
use crate::vc::{convert_to_mel, fit_to_chunks, VcBackend, VcRequest};

/// Models of the hiding stage.
pub struct HidingModels {
    pub extractor: Extractor,
    pub encoder: IdEncoder,
    pub generator: FlowModel,
}

/// Models of the tracing stage.
pub struct TracingModels {
    pub inverter: FlowModel,
    pub decoder: IdDecoder,
}

pub fn chunk_frames(stft: &StftConfig) -> usize {
    CHUNK_SAMPLES / stft.hop
}

/// Generate a hidden waveform for a whole mel, chunk by chunk. The mel is
/// first fitted to a whole number of chunks.
pub fn hide_mel(encoder: &IdEncoder, generator: &FlowModel, v: &SpeakerEmbedding, mel: &MelSpectrogram) -> Result<Waveform> {
    let cf = CHUNK_SAMPLES / mel.hop();
    let mel = fit_to_chunks(mel, cf)?;
    let parts = (0..mel.frames() / cf)
        .map(|k| Ok(hide_chunk(encoder, generator, v, &mel.slice_frames(k * cf, cf)?)?.0))
        .collect::<Result<Vec<_>>>()?;
    Waveform::concat(&parts)
}

#[derive(Debug, Clone)]
pub struct HiddenSpeech {
    pub audio: Waveform,
    /// Embedding of the source speaker that was hidden.
    pub embedding: SpeakerEmbedding,
    pub chunks: usize,
}

/// Convert `source` towards `target` and hide the source identity in the
/// generated speech.
pub fn hide_speech(
    models: &HidingModels,
    source: &Waveform,
    target: &Waveform,
    backend: &mut dyn VcBackend,
) -> Result<HiddenSpeech> {
    let v = models.extractor.extract(source)?;
    let req = VcRequest::new(source.clone(), target.clone())?;
    let mel = convert_to_mel(&req, backend, models.extractor.mel().config())?;
    let audio = hide_mel(&models.encoder, &models.generator, &v, &mel)?;
    Ok(HiddenSpeech {
        chunks: audio.len() / CHUNK_SAMPLES,
        audio,
        embedding: v,
    })
}

#[derive(Debug, Clone)]
pub struct ChunkTrace {
    pub embedding: SpeakerEmbedding,
    pub decision: VerificationDecision,
}

/// Recover and verify every whole chunk of `w`.
pub fn trace_chunks(
    models: &TracingModels,
    w: &Waveform,
    registry: &SpeakerRegistry,
    threshold: f64,
    mel: &MelExtractor,
) -> Result<Vec<ChunkTrace>> {
    let chunks = chunk_split(w, CHUNK_SAMPLES)?;
    if chunks.is_empty() {
        return Err(Error::Length(format!(
            "speech of {} samples is shorter than one {CHUNK_SAMPLES}-sample chunk",
            w.len()
        )));
    }
    chunks
        .iter()
        .map(|c| {
            let embedding = recover_embedding(c, &models.inverter, &models.decoder, mel)?;
            let decision = verify_speaker(&embedding, registry, threshold)?;
            Ok(ChunkTrace { embedding, decision })
        })
        .collect()
}

/// Speech-level verdict: majority of chunk decisions agree on one speaker.
pub fn speech_verdict(traces: &[ChunkTrace]) -> Result<Option<String>> {
    let decisions: Vec<VerificationDecision> = traces.iter().map(|t| t.decision.clone()).collect();
    let mut candidates: Vec<&str> = decisions.iter().filter_map(|d| d.claimed.as_deref()).collect();
    candidates.sort_unstable();
    candidates.dedup();
    for c in candidates {
        if chunk_vote(&decisions, c)? {
            return Ok(Some(c.to_string()));
        }
    }
    if decisions.len() % 2 == 0 {
        return Err(Error::Protocol(format!(
            "chunk voting needs an odd number of chunks, got {}",
            decisions.len()
        )));
    }
    Ok(None)
}

pub const TRACE_HEADER: &str = "chunk,claimed,best_id,best_score,threshold";

pub fn trace_csv(traces: &[ChunkTrace]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for (i, t) in traces.iter().enumerate() {
        let d = &t.decision;
        let _ = writeln!(
            s,
            "{i},{},{},{:.6},{:.6}",
            d.claimed.as_deref().unwrap_or(""),
            d.best_id,
            d.best_score,
            d.threshold
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker::EMBEDDING_DIM;

    fn trace(claim: Option<&str>) -> ChunkTrace {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = 1.0;
        ChunkTrace {
            embedding: SpeakerEmbedding::from_raw(v).unwrap(),
            decision: VerificationDecision {
                claimed: claim.map(String::from),
                best_id: claim.unwrap_or("a").into(),
                best_score: 0.3,
                threshold: 0.5,
            },
        }
    }

    #[test]
    fn verdict_follows_majority() {
        let t = [trace(Some("a")), trace(None), trace(Some("a"))];
        assert_eq!(speech_verdict(&t).unwrap().as_deref(), Some("a"));
        let t = [trace(Some("a")), trace(Some("b")), trace(None)];
        assert_eq!(speech_verdict(&t).unwrap(), None);
        assert!(matches!(speech_verdict(&t[..2]), Err(Error::Protocol(_))));
        assert!(trace_csv(&t).starts_with(TRACE_HEADER));
        assert_eq!(trace_csv(&t).lines().count(), 4);
    }
}
