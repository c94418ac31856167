//! RIFF/WAVE decoding restricted to 16-bit PCM, mono, 16 kHz.

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decodes PCM16 samples scaled by `1/32768`. Chunks after `data` are ignored.
pub fn parse_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: "file shorter than the 12-byte RIFF header".into(),
        });
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat {
            field: "container",
            value: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
            expected: "RIFF/WAVE",
        });
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(Error::Parse {
                offset: pos,
                reason: "truncated chunk header".into(),
            });
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let available = bytes.len() - body;
        if size > available {
            return Err(Error::Parse {
                offset: pos,
                reason: format!(
                    "chunk `{}` declares {size} bytes but only {available} remain",
                    String::from_utf8_lossy(id)
                ),
            });
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse {
                        offset: pos,
                        reason: format!("fmt chunk has {size} bytes, need 16"),
                    });
                }
                check_format(bytes, body)?;
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::Parse {
                        offset: pos,
                        reason: "data chunk before fmt chunk".into(),
                    });
                }
                if size % 2 != 0 {
                    return Err(Error::Parse {
                        offset: pos,
                        reason: format!("data chunk of {size} bytes is not a whole number of 16-bit samples"),
                    });
                }
                return Ok(bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect());
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::Parse {
        offset: bytes.len(),
        reason: if fmt_seen { "no data chunk" } else { "no fmt chunk" }.into(),
    })
}

fn check_format(b: &[u8], body: usize) -> Result<()> {
    let format = u16_at(b, body);
    let channels = u16_at(b, body + 2);
    let rate = u32_at(b, body + 4);
    let bits = u16_at(b, body + 14);
    if format != 1 {
        return Err(Error::UnsupportedFormat {
            field: "audio_format",
            value: format.to_string(),
            expected: "1 (PCM)",
        });
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat {
            field: "channels",
            value: channels.to_string(),
            expected: "1",
        });
    }
    if rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat {
            field: "sample_rate",
            value: rate.to_string(),
            expected: "16000",
        });
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat {
            field: "bits_per_sample",
            value: bits.to_string(),
            expected: "16",
        });
    }
    Ok(())
}

/// Canonical 44-byte-header PCM16 mono 16 kHz file.
pub fn encode_wav(samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Zero-pads symmetrically or center-crops to `len` samples.
pub fn normalize_length(samples: &[f32], len: usize) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot normalize an empty waveform".into()));
    }
    let n = samples.len();
    if n >= len {
        let start = (n - len) / 2;
        return Ok(samples[start..start + len].to_vec());
    }
    let left = (len - n) / 2;
    let mut out = vec![0.0; len];
    out[left..left + n].copy_from_slice(samples);
    Ok(out)
}
