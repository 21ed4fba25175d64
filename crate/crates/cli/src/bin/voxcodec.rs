//! MP3 round-trip tool used as the channel's codec command.
//!
//! ```text
//! voxcodec encode --bitrate 64 in.wav out.mp3
//! voxcodec decode in.mp3 out.wav
//! ```

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mp3lame_encoder::{Builder, FlushNoGap, MonoPcm, Quality, VbrMode};

#[derive(Parser)]
#[command(version, about = "MP3 encode/decode for channel simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a mono 16-bit WAV to MP3.
    Encode {
        /// Constant bitrate in kbps, or `vbr`.
        #[arg(long)]
        bitrate: String,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decode an MP3 to a mono 16-bit WAV.
    Decode { input: PathBuf, output: PathBuf },
}

const LAME_RATES: [(u32, mp3lame_encoder::Bitrate); 16] = {
    use mp3lame_encoder::Bitrate::*;
    [
        (8, Kbps8),
        (16, Kbps16),
        (24, Kbps24),
        (32, Kbps32),
        (40, Kbps40),
        (48, Kbps48),
        (64, Kbps64),
        (80, Kbps80),
        (96, Kbps96),
        (112, Kbps112),
        (128, Kbps128),
        (160, Kbps160),
        (192, Kbps192),
        (224, Kbps224),
        (256, Kbps256),
        (320, Kbps320),
    ]
};

fn encode(bitrate: &str, input: &PathBuf, output: &PathBuf) -> Result<(), String> {
    let mut reader = hound::WavReader::open(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let spec = reader.spec();
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|e| format!("{}: {e}", input.display()))?;
    let ch = spec.channels as usize;
    let pcm: Vec<i16> = raw
        .chunks(ch)
        .map(|f| (f.iter().map(|&s| s as i32).sum::<i32>() / ch as i32) as i16)
        .collect();
    let mut b = Builder::new().ok_or("cannot allocate LAME encoder")?;
    b.set_num_channels(1).map_err(|e| e.to_string())?;
    b.set_sample_rate(spec.sample_rate).map_err(|e| e.to_string())?;
    b.set_quality(Quality::Best).map_err(|e| e.to_string())?;
    if bitrate == "vbr" {
        b.set_vbr_mode(VbrMode::Mtrh).map_err(|e| e.to_string())?;
        b.set_vbr_quality(Quality::Good).map_err(|e| e.to_string())?;
    } else {
        let k: u32 = bitrate.parse().map_err(|_| format!("bad bitrate `{bitrate}`"))?;
        let (_, rate) = LAME_RATES
            .iter()
            .min_by_key(|(r, _)| r.abs_diff(k))
            .expect("non-empty table");
        b.set_brate(*rate).map_err(|e| e.to_string())?;
    }
    let mut enc = b.build().map_err(|e| e.to_string())?;
    let mut out: Vec<u8> = Vec::with_capacity(mp3lame_encoder::max_required_buffer_size(pcm.len()));
    enc.encode_to_vec(MonoPcm(&pcm), &mut out).map_err(|e| e.to_string())?;
    out.reserve(7200);
    enc.flush_to_vec::<FlushNoGap>(&mut out).map_err(|e| e.to_string())?;
    fs::write(output, out).map_err(|e| format!("{}: {e}", output.display()))
}

fn decode(input: &PathBuf, output: &PathBuf) -> Result<(), String> {
    let bytes = fs::read(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let mut dec = minimp3::Decoder::new(&bytes[..]);
    let mut pcm = Vec::new();
    let mut rate = None;
    loop {
        match dec.next_frame() {
            Ok(f) => {
                rate.get_or_insert(f.sample_rate as u32);
                let ch = f.channels.max(1);
                pcm.extend(f.data.chunks(ch).map(|c| (c.iter().map(|&s| s as i32).sum::<i32>() / ch as i32) as i16));
            }
            Err(minimp3::Error::Eof) => break,
            Err(minimp3::Error::SkippedData) => continue,
            Err(e) => return Err(format!("{}: {e}", input.display())),
        }
    }
    let rate = rate.ok_or_else(|| format!("{}: no MP3 frames", input.display()))?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(output, spec).map_err(|e| format!("{}: {e}", output.display()))?;
    for s in pcm {
        w.write_sample(s).map_err(|e| e.to_string())?;
    }
    w.finalize().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Encode { bitrate, input, output } => encode(bitrate, input, output),
        Cmd::Decode { input, output } => decode(input, output),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxcodec: {e}");
            ExitCode::from(4)
        }
    }
}
