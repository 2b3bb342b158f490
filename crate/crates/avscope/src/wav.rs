//! Minimal mono WAV io: 32-bit float written, 16-bit PCM and 32-bit float
//! read. Unknown RIFF chunks are skipped.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Write a mono waveform as 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 4) as u32;
    let mut buf: Vec<u8> = Vec::with_capacity(44 + samples.len() * 4);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 4).to_le_bytes());
    buf.extend_from_slice(&4u16.to_le_bytes());
    buf.extend_from_slice(&32u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a mono WAV; returns samples and sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |msg: String| Error::Format { path: path.display().to_string(), message: msg };
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file".to_string()));
    }
    let mut pos = 12usize;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + len > bytes.len() {
            return Err(fail(format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id))));
        }
        let body = &bytes[pos..pos + len];
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(fail("fmt chunk too short".to_string()));
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                format = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd lengths carry a pad byte.
        pos += len + (len & 1);
    }
    let (tag, channels, rate, bits) = format.ok_or_else(|| fail("missing fmt chunk".to_string()))?;
    let data = data.ok_or_else(|| fail("missing data chunk".to_string()))?;
    if channels != 1 {
        return Err(fail(format!("only mono supported, file has {channels} channels")));
    }
    let samples = match (tag, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => return Err(fail(format!("unsupported format tag {tag} at {bits} bits"))),
    };
    Ok((samples, rate))
}
