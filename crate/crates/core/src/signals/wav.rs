//! Mono RIFF/WAVE reading and writing, PCM16 or IEEE float32.

use std::fs;
use std::path::Path;

use super::AudioSignal;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Float32,
}

/// Metadata returned by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WavWriteReport {
    /// Samples outside [-1, 1] that saturated when quantized to PCM16.
    pub clipped: usize,
}

impl WavWriteReport {
    pub fn saturated(&self) -> bool {
        self.clipped > 0
    }
}

pub fn encode_wav(signal: &AudioSignal, depth: BitDepth) -> (Vec<u8>, WavWriteReport) {
    let (format, bits) = match depth {
        BitDepth::Pcm16 => (FORMAT_PCM, 16u16),
        BitDepth::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = (signal.len() * block_align as usize) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate().to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());

    let mut report = WavWriteReport::default();
    for &v in signal.samples() {
        match depth {
            BitDepth::Pcm16 => {
                if v.abs() > 1.0 {
                    report.clipped += 1;
                }
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            BitDepth::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    (out, report)
}

pub fn write_wav(path: &Path, signal: &AudioSignal, depth: BitDepth) -> Result<WavWriteReport> {
    let (bytes, report) = encode_wav(signal, depth);
    fs::write(path, bytes)?;
    Ok(report)
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(len).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                let mut format = u16_at(body, 0);
                if format == FORMAT_EXTENSIBLE && body.len() >= 26 {
                    format = u16_at(body, 24);
                }
                fmt = Some((format, u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start.saturating_add(len + (len & 1));
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    if channels != 1 {
        return Err(Error::Format(format!("expected mono audio, found {channels} channels")));
    }
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    let samples: Vec<f64> = match (format, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(Error::Format(format!(
                "unsupported codec (format tag {format}, {bits} bits)"
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::Format("data chunk holds no samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite float sample".into()));
    }
    AudioSignal::new(samples, rate).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    decode_wav(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let s = AudioSignal::new(vec![0.0, 0.5, -0.5, 0.123456, -0.999], 8000).unwrap();
        let (bytes, report) = encode_wav(&s, BitDepth::Pcm16);
        assert!(!report.saturated());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        for (a, b) in s.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn float32_round_trip_is_exact_for_f32_values() {
        let s = AudioSignal::new(vec![0.25, -0.125, 0.1f32 as f64, 1.5], 16000).unwrap();
        let (bytes, _) = encode_wav(&s, BitDepth::Float32);
        assert_eq!(decode_wav(&bytes).unwrap(), s);
    }

    #[test]
    fn clipping_is_reported() {
        let s = AudioSignal::new(vec![1.5, -2.0, 0.3], 8000).unwrap();
        let (bytes, report) = encode_wav(&s, BitDepth::Pcm16);
        assert_eq!(report.clipped, 2);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples()[1], -1.0);
    }

    #[test]
    fn header_only_file_is_a_format_error() {
        let s = AudioSignal::new(vec![0.0], 8000).unwrap();
        let (bytes, _) = encode_wav(&s, BitDepth::Pcm16);
        let mut header = bytes[..44].to_vec();
        header[40..44].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_wav(&header), Err(Error::Format(_))));
        assert!(matches!(decode_wav(&bytes[..44]), Err(Error::Format(_))));
    }

    #[test]
    fn stereo_and_unknown_codecs_are_rejected() {
        let s = AudioSignal::new(vec![0.1, 0.2], 8000).unwrap();
        let (mut bytes, _) = encode_wav(&s, BitDepth::Pcm16);
        bytes[22] = 2;
        assert!(matches!(decode_wav(&bytes), Err(Error::Format(m)) if m.contains("mono")));
        let (mut bytes, _) = encode_wav(&s, BitDepth::Pcm16);
        bytes[20] = 6; // a-law
        assert!(matches!(decode_wav(&bytes), Err(Error::Format(m)) if m.contains("codec")));
        assert!(matches!(decode_wav(b"RIFF"), Err(Error::Format(_))));
    }
}
