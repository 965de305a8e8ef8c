//! Multichannel waveforms, STFT analysis/synthesis and WAV I/O.

mod convolve;
mod stft;
mod wav;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use convolve::fft_convolve;
pub use stft::{istft, stft, Spectrogram, StftConfig, SynthesisPlan, Window};
pub use wav::{read_wav, write_wav, WavEncoding};

/// Real multichannel signal stored as `[channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWaveform {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelWaveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(Array2::from_shape_vec((1, n), samples).expect("1 x n"), sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(Array2::zeros((channels, len)), sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Array2<f64> {
        &mut self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.samples.row(c)
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Copy of one channel as a mono waveform.
    pub fn select_channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels() {
            return Err(Error::InvalidInput(format!("channel {} of {}", c, self.channels())));
        }
        Self::mono(self.channel(c).to_vec(), self.sample_rate)
    }

    /// First `len` samples of every channel.
    pub fn truncated(&self, len: usize) -> Self {
        let n = len.min(self.len());
        Self {
            samples: self.samples.slice(ndarray::s![.., ..n]).to_owned(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `start..start + len`, clipped to the signal.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let a = start.min(self.len());
        let b = (start + len).min(self.len());
        Self {
            samples: self.samples.slice(ndarray::s![.., a..b]).to_owned(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self, c: usize) -> f64 {
        self.channel(c).iter().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
