//! Mono RIFF/WAVE reading and writing, 16-bit PCM or 32-bit IEEE float.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const PCM16_SCALE: f32 = 32767.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::WavFormat {
        field,
        detail: detail.into(),
    }
}

pub fn encode_wav(clip: &AudioClip, encoding: WavEncoding) -> Vec<u8> {
    let (format, bits) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = clip.len() as u32 * block_align as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (s.clamp(-1.0, 1.0) * PCM16_SCALE).round() as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavEncoding::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8], id: impl Into<String>) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(fmt_err(
            "riff_header",
            "file shorter than the 12-byte RIFF header",
        ));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(fmt_err("riff_id", "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("wave_id", "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let tag = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match tag {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(fmt_err("fmt_chunk", "fmt chunk truncated"));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| fmt_err("fmt_chunk", "data chunk before fmt chunk"))?;
                if channels != 1 {
                    return Err(fmt_err(
                        "num_channels",
                        format!("{channels} channels, only mono is supported"),
                    ));
                }
                if rate == 0 {
                    return Err(fmt_err("sample_rate", "sample rate is 0"));
                }
                if body + size > bytes.len() {
                    return Err(fmt_err(
                        "data",
                        format!(
                            "chunk declares {size} bytes, {} present",
                            bytes.len() - body
                        ),
                    ));
                }
                let data = &bytes[body..body + size];
                let samples: Vec<f32> = match (format, bits) {
                    (FORMAT_PCM, 16) => data
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / PCM16_SCALE)
                        .collect(),
                    (FORMAT_FLOAT, 32) => data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                    (FORMAT_PCM | FORMAT_FLOAT, b) => {
                        return Err(fmt_err(
                            "bits_per_sample",
                            format!("{b} bits not supported for format {format}"),
                        ))
                    }
                    (f, _) => {
                        return Err(fmt_err(
                            "audio_format",
                            format!("format tag {f} not supported"),
                        ))
                    }
                };
                return AudioClip::new(id, rate, samples)
                    .map_err(|e| fmt_err("data", e.to_string()));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(fmt_err("data", "no data chunk found"))
}

pub fn write_wav(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_wav(clip, encoding))
        .map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

/// Reads a mono WAV file; the clip id is the file stem.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> AudioClip {
        let samples = (0..1000).map(|i| i as f32 / 999.0 * 2.0 - 1.0).collect();
        AudioClip::new("ramp", 16_000, samples).unwrap()
    }

    #[test]
    fn float32_round_trip_is_lossless() {
        let clip = ramp();
        let back = decode_wav(&encode_wav(&clip, WavEncoding::Float32), "ramp").unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let clip = ramp();
        let back = decode_wav(&encode_wav(&clip, WavEncoding::Pcm16), "ramp").unwrap();
        let max = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(max <= 2f32.powi(-15), "{max}");
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode_wav(&ramp(), WavEncoding::Pcm16);
        for cut in [5, 30, 44, bytes.len() - 1] {
            assert!(
                matches!(decode_wav(&bytes[..cut], "x"), Err(Error::WavFormat { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn stereo_is_rejected_by_field() {
        let mut bytes = encode_wav(&ramp(), WavEncoding::Pcm16);
        bytes[22] = 2;
        match decode_wav(&bytes, "x") {
            Err(Error::WavFormat { field, .. }) => assert_eq!(field, "num_channels"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_bit_depth_is_rejected() {
        let mut bytes = encode_wav(&ramp(), WavEncoding::Pcm16);
        bytes[34] = 24;
        match decode_wav(&bytes, "x") {
            Err(Error::WavFormat { field, .. }) => assert_eq!(field, "bits_per_sample"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn skips_unknown_chunks() {
        let bytes = encode_wav(&ramp(), WavEncoding::Float32);
        let mut with_list = bytes[..12].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&bytes[12..]);
        assert_eq!(decode_wav(&with_list, "ramp").unwrap(), ramp());
    }
}
