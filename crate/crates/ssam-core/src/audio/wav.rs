//! Minimal RIFF/WAV reader and writer (mono PCM-16 little-endian) plus the
//! raw f32 sidecar format.
//!
//! Raw clips are stored as little-endian f32 samples in one file with a
//! one-line sidecar `<file>.meta` containing `<sample_count> <sample_rate>`.

use std::fs;
use std::path::Path;

use crate::audio::Waveform;
use crate::error::{Result, SsamError};

const REQUIRED_RATE: u32 = 16_000;

fn u16_at(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

/// Read a mono 16 kHz PCM-16 WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let buf = fs::read(path)?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(SsamError::Format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= buf.len() {
        let id = &buf[at..at + 4];
        let size = u32_at(&buf, at + 4) as usize;
        let body_start = at + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= buf.len());
        let Some(body_end) = body_end else {
            return Err(SsamError::Format(format!(
                "{}: truncated chunk '{}'",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        };
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(SsamError::Format(format!(
                        "{}: fmt chunk too small",
                        path.display()
                    )));
                }
                fmt = Some((
                    u16_at(&buf, body_start),
                    u16_at(&buf, body_start + 2),
                    u32_at(&buf, body_start + 4),
                    u16_at(&buf, body_start + 14),
                ));
            }
            b"data" => data = Some(&buf[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        at = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| {
        SsamError::Format(format!("{}: missing fmt chunk", path.display()))
    })?;
    let data = data
        .ok_or_else(|| SsamError::Format(format!("{}: missing data chunk", path.display())))?;

    if format != 1 || bits != 16 {
        return Err(SsamError::Data(format!(
            "{}: expected PCM-16, got format {format} with {bits} bits",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(SsamError::Data(format!(
            "{}: expected mono, got {channels} channels",
            path.display()
        )));
    }
    if rate != REQUIRED_RATE {
        return Err(SsamError::Data(format!(
            "{}: expected {REQUIRED_RATE} Hz, got {rate}",
            path.display()
        )));
    }
    if data.len() % 2 != 0 {
        return Err(SsamError::Format(format!(
            "{}: odd data chunk length",
            path.display()
        )));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Write a mono PCM-16 WAV file; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    let n = wav.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&wav.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read raw little-endian f32 samples described by `<file>.meta`.
pub fn read_raw_f32(path: &Path) -> Result<Waveform> {
    let meta_path = {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        std::path::PathBuf::from(p)
    };
    let meta = fs::read_to_string(&meta_path).map_err(|e| {
        SsamError::Data(format!("{}: missing sidecar ({e})", meta_path.display()))
    })?;
    let mut fields = meta.split_whitespace();
    let count: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SsamError::Format(format!("{}: bad sample count", meta_path.display())))?;
    let rate: u32 = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SsamError::Format(format!("{}: bad sample rate", meta_path.display())))?;

    let buf = fs::read(path)?;
    if buf.len() != count * 4 {
        return Err(SsamError::Format(format!(
            "{}: {} bytes but sidecar declares {count} samples",
            path.display(),
            buf.len()
        )));
    }
    let samples: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Waveform::new(samples, rate)
}

/// Write raw f32 samples plus the sidecar file.
pub fn write_raw_f32(path: &Path, wav: &Waveform) -> Result<()> {
    let mut buf = Vec::with_capacity(wav.samples.len() * 4);
    for &s in &wav.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, buf)?;
    let meta_path = {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        std::path::PathBuf::from(p)
    };
    fs::write(meta_path, format!("{} {}\n", wav.samples.len(), wav.sample_rate))?;
    Ok(())
}
