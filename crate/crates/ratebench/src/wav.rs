//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads PCM 16/24/32-bit and 32-bit float, mono or multichannel
//! (interleaved); writes 16-bit PCM mono. Compressed formats are out of
//! scope for ingestion.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct WavData {
    /// Interleaved samples scaled to [-1, 1].
    pub samples: Vec<f32>,
    pub channels: u16,
    pub sample_rate_hz: u32,
}

impl WavData {
    /// Averages channels into a mono signal.
    pub fn to_mono(&self) -> Vec<f32> {
        if self.channels <= 1 {
            return self.samples.clone();
        }
        let ch = self.channels as usize;
        self.samples
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect()
    }
}

fn bad(path: &Path, msg: &str) -> Error {
    Error::invalid(format!("{}: {msg}", path.display()))
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let bytes = fs::read(path)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format_tag: Option<u16> = None;
    let mut channels = 0u16;
    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad(path, "truncated fmt chunk"));
                }
                let mut tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                // WAVE_FORMAT_EXTENSIBLE carries the real tag in the GUID.
                if tag == 0xFFFE && body.len() >= 26 {
                    tag = u16::from_le_bytes(body[24..26].try_into().unwrap());
                }
                format_tag = Some(tag);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let tag = format_tag.ok_or_else(|| bad(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad(path, "missing data chunk"))?;
    if channels == 0 || sample_rate == 0 {
        return Err(bad(path, "invalid fmt fields"));
    }
    let samples = match (tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect(),
        (1, 24) => data
            .chunks_exact(3)
            .map(|b| {
                let v = ((b[2] as i32) << 24 | (b[1] as i32) << 16 | (b[0] as i32) << 8) >> 8;
                v as f32 / 8_388_608.0
            })
            .collect(),
        (1, 32) => data
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32 / 2_147_483_648.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        _ => {
            return Err(bad(
                path,
                &format!("unsupported format tag {tag} / {bits}-bit"),
            ))
        }
    };
    Ok(WavData {
        samples,
        channels,
        sample_rate_hz: sample_rate,
    })
}

/// Writes mono 16-bit PCM.
pub fn write_wav_mono16(path: &Path, samples: &[f32], sample_rate_hz: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = std::env::temp_dir().join("ratebench_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tone.wav");
        let x: Vec<f32> = (0..800).map(|i| (i as f32 * 0.05).sin() * 0.8).collect();
        write_wav_mono16(&path, &x, 16_000).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.channels, 1);
        assert_eq!(back.sample_rate_hz, 16_000);
        assert_eq!(back.samples.len(), 800);
        for (a, b) in x.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-6);
        }
    }

    #[test]
    fn stereo_mixes_to_mono_mean() {
        let wav = WavData {
            samples: vec![1.0, 0.0, 0.5, 0.5, -1.0, 1.0],
            channels: 2,
            sample_rate_hz: 8000,
        };
        assert_eq!(wav.to_mono(), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn garbage_is_rejected_not_crashed() {
        let dir = std::env::temp_dir().join("ratebench_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.wav");
        std::fs::write(&path, b"not a wav at all............................").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
