use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

use super::MultichannelWaveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Float32,
    Int16,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelWaveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat(path.display().to_string()),
        other => Error::MalformedFile(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedFile(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?} samples (expected 16-bit integer or 32-bit float)",
                path.display()
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::MalformedFile(format!("{}: truncated sample frame", path.display())));
    }
    let len = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, len), |(c, i)| interleaved[i * channels + c]);
    MultichannelWaveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &MultichannelWaveform, encoding: WavEncoding) -> Result<()> {
    let channels = u16::try_from(wave.channels())
        .map_err(|_| Error::InvalidInput(format!("{} channels do not fit a WAV header", wave.channels())))?;
    let spec = match encoding {
        WavEncoding::Float32 => WavSpec {
            channels,
            sample_rate: wave.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
        WavEncoding::Int16 => WavSpec {
            channels,
            sample_rate: wave.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    let s = wave.samples();
    for i in 0..wave.len() {
        for c in 0..wave.channels() {
            let v = s[[c, i]];
            match encoding {
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
                WavEncoding::Int16 => writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
