use std::sync::Arc;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::MultichannelWaveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    /// Frame length in milliseconds.
    pub frame_len: f64,
    /// Frame shift in milliseconds.
    pub hop: f64,
    #[serde(default)]
    pub window: Window,
    pub sample_rate: u32,
}

fn ms_to_samples(ms: f64, sample_rate: u32, what: &str) -> Result<usize> {
    let exact = ms * sample_rate as f64 / 1000.0;
    let n = exact.round();
    if !exact.is_finite() || n < 1.0 || (exact - n).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "{what} of {ms} ms is not a whole number of samples at {sample_rate} Hz"
        )));
    }
    Ok(n as usize)
}

impl StftConfig {
    pub fn new(frame_len: f64, hop: f64, sample_rate: u32) -> Self {
        Self { frame_len, hop, window: Window::Hann, sample_rate }
    }

    /// 64 ms frames with a 16 ms shift at 16 kHz.
    pub fn wideband() -> Self {
        Self::new(64.0, 16.0, 16_000)
    }

    pub fn frame_len_samples(&self) -> Result<usize> {
        ms_to_samples(self.frame_len, self.sample_rate, "frame length")
    }

    pub fn hop_samples(&self) -> Result<usize> {
        ms_to_samples(self.hop, self.sample_rate, "hop")
    }

    /// Frame length rounded up to a power of two.
    pub fn fft_size(&self) -> Result<usize> {
        Ok(self.frame_len_samples()?.next_power_of_two())
    }

    pub fn bins(&self) -> Result<usize> {
        Ok(self.fft_size()? / 2 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let n = self.frame_len_samples()?;
        let h = self.hop_samples()?;
        if h > n {
            return Err(Error::Config(format!("hop ({h} samples) exceeds frame length ({n} samples)")));
        }
        if n % h != 0 {
            return Err(Error::Config(format!("hop ({h}) does not divide frame length ({n})")));
        }
        if n < 2 {
            return Err(Error::Config("frame length must be at least two samples".into()));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> Result<usize> {
        Ok(len.div_ceil(self.hop_samples()?))
    }
}

/// Complex STFT coefficients indexed `[frame][bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub coeffs: Array3<Complex64>,
    pub frame_len_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn bins(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn channels(&self) -> usize {
        self.coeffs.dim().2
    }

    /// `[frame][bin]` plane of one channel.
    pub fn channel(&self, c: usize) -> Array2<Complex64> {
        self.coeffs.index_axis(ndarray::Axis(2), c).to_owned()
    }

    /// Checks that `other` shares this spectrogram's layout.
    pub fn ensure_same_shape(&self, other: &Spectrogram) -> Result<()> {
        if self.coeffs.dim() != other.coeffs.dim() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {:?} vs {:?}",
                self.coeffs.dim(),
                other.coeffs.dim()
            )));
        }
        Ok(())
    }
}

/// Index into a signal of length `len` under repeated even reflection
/// (the sample at the boundary is not repeated).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Precomputed window, FFT plans and frame geometry shared by analysis and
/// synthesis of a single channel.
#[derive(Clone)]
pub struct SynthesisPlan {
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SynthesisPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SynthesisPlan")
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl SynthesisPlan {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let frame_len = cfg.frame_len_samples()?;
        let n_fft = cfg.fft_size()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame_len,
            hop: cfg.hop_samples()?,
            n_fft,
            window: cfg.window.coefficients(frame_len),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn fft_size(&self) -> usize {
        self.n_fft
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Longest output that `frames` frames can reconstruct.
    pub fn max_output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len - self.frame_len / 2
        }
    }

    /// One-sided spectra `[frame * bins + bin]` of a single channel.
    pub fn analyze(&self, x: &[f64]) -> Vec<Complex64> {
        let t_count = self.frames_for(x.len());
        let f_count = self.bins();
        let pad = self.frame_len / 2;
        let mut out = vec![Complex64::new(0.0, 0.0); t_count * f_count];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..t_count {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for n in 0..self.frame_len {
                let idx = (t * self.hop + n) as isize - pad as isize;
                buf[n] = Complex64::new(x[reflect_index(idx, x.len())] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            out[t * f_count..(t + 1) * f_count].copy_from_slice(&buf[..f_count]);
        }
        out
    }

    /// Squared-window overlap sum over the padded time axis.
    fn window_norm(&self, frames: usize) -> Vec<f64> {
        let total = (frames.saturating_sub(1)) * self.hop + self.frame_len;
        let mut norm = vec![0.0; total];
        for t in 0..frames {
            for n in 0..self.frame_len {
                norm[t * self.hop + n] += self.window[n] * self.window[n];
            }
        }
        norm
    }

    fn check_out_len(&self, frames: usize, out_len: usize) -> Result<()> {
        let max = self.max_output_len(frames);
        if out_len > max {
            return Err(Error::ShapeMismatch(format!(
                "{frames} frames reconstruct at most {max} samples, {out_len} requested"
            )));
        }
        Ok(())
    }

    /// Inverse of [`analyze`](Self::analyze): weighted overlap-add divided by
    /// the squared-window sum. Imaginary parts of the DC and Nyquist bins are
    /// ignored, as for any real signal.
    pub fn synthesize(&self, spec: &[Complex64], frames: usize, out_len: usize) -> Result<Vec<f64>> {
        let f_count = self.bins();
        if spec.len() != frames * f_count {
            return Err(Error::ShapeMismatch(format!(
                "expected {frames} x {f_count} coefficients, got {}",
                spec.len()
            )));
        }
        self.check_out_len(frames, out_len)?;
        let norm = self.window_norm(frames);
        let mut acc = vec![0.0; norm.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            let row = &spec[t * f_count..(t + 1) * f_count];
            buf[0] = Complex64::new(row[0].re, 0.0);
            for k in 1..f_count - 1 {
                buf[k] = row[k];
                buf[self.n_fft - k] = row[k].conj();
            }
            buf[f_count - 1] = Complex64::new(row[f_count - 1].re, 0.0);
            self.inverse.process(&mut buf);
            for n in 0..self.frame_len {
                acc[t * self.hop + n] += buf[n].re * scale * self.window[n];
            }
        }
        let pad = self.frame_len / 2;
        Ok((0..out_len)
            .map(|i| {
                let d = norm[i + pad];
                if d > 1e-12 {
                    acc[i + pad] / d
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Adjoint of [`synthesize`](Self::synthesize): maps a gradient on the
    /// output samples to `∂L/∂Re X + i ∂L/∂Im X` for every coefficient.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Result<Vec<Complex64>> {
        self.check_out_len(frames, grad.len())?;
        let f_count = self.bins();
        let norm = self.window_norm(frames);
        let pad = self.frame_len / 2;
        let mut g_pad = vec![0.0; norm.len()];
        for (i, g) in grad.iter().enumerate() {
            let d = norm[i + pad];
            if d > 1e-12 {
                g_pad[i + pad] = g / d;
            }
        }
        let mut out = vec![Complex64::new(0.0, 0.0); frames * f_count];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let inv_n = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for n in 0..self.frame_len {
                buf[n] = Complex64::new(g_pad[t * self.hop + n] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            let row = &mut out[t * f_count..(t + 1) * f_count];
            for k in 0..f_count {
                row[k] = if k == 0 || k == f_count - 1 {
                    Complex64::new(buf[k].re * inv_n, 0.0)
                } else {
                    buf[k] * (2.0 * inv_n)
                };
            }
        }
        Ok(out)
    }
}

pub fn stft(wave: &MultichannelWaveform, cfg: &StftConfig) -> Result<Spectrogram> {
    if wave.is_empty() {
        return Err(Error::InvalidInput("cannot analyse an empty waveform".into()));
    }
    if wave.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform sample rate {} differs from STFT sample rate {}",
            wave.sample_rate(),
            cfg.sample_rate
        )));
    }
    let plan = SynthesisPlan::new(cfg)?;
    let t_count = plan.frames_for(wave.len());
    let f_count = plan.bins();
    let mut coeffs = Array3::zeros((t_count, f_count, wave.channels()));
    for c in 0..wave.channels() {
        let x = wave.channel(c).to_vec();
        let spec = plan.analyze(&x);
        for t in 0..t_count {
            for f in 0..f_count {
                coeffs[[t, f, c]] = spec[t * f_count + f];
            }
        }
    }
    Ok(Spectrogram {
        coeffs,
        frame_len_samples: plan.frame_len(),
        hop_samples: plan.hop(),
        fft_size: plan.fft_size(),
        sample_rate: cfg.sample_rate,
    })
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, out_len: usize) -> Result<MultichannelWaveform> {
    let plan = SynthesisPlan::new(cfg)?;
    if spec.bins() != plan.bins()
        || spec.hop_samples != plan.hop()
        || spec.frame_len_samples != plan.frame_len()
        || spec.sample_rate != cfg.sample_rate
    {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram with {} bins / hop {} does not match the STFT configuration ({} bins / hop {})",
            spec.bins(),
            spec.hop_samples,
            plan.bins(),
            plan.hop()
        )));
    }
    let (t_count, f_count, c_count) = spec.coeffs.dim();
    let mut out = Array2::zeros((c_count, out_len));
    let mut plane = vec![Complex64::new(0.0, 0.0); t_count * f_count];
    for c in 0..c_count {
        for t in 0..t_count {
            for f in 0..f_count {
                plane[t * f_count + f] = spec.coeffs[[t, f, c]];
            }
        }
        let x = plan.synthesize(&plane, t_count, out_len)?;
        out.row_mut(c).assign(&ndarray::Array1::from(x));
    }
    MultichannelWaveform::new(out, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // numpy.pad([0,1,2,3], 5, mode="reflect") -> [1,2,3,2,1,0,1,2,3,2,1,0,1,2]
        let idx: Vec<usize> = (-5..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn wideband_geometry() {
        let cfg = StftConfig::wideband();
        assert_eq!(cfg.frame_len_samples().unwrap(), 1024);
        assert_eq!(cfg.hop_samples().unwrap(), 256);
        assert_eq!(cfg.bins().unwrap(), 513);
    }

    #[test]
    fn rejects_hop_longer_than_frame() {
        assert!(StftConfig::new(16.0, 32.0, 16_000).validate().is_err());
        assert!(StftConfig::new(64.0, 24.0, 16_000).validate().is_err());
    }

    #[test]
    fn non_power_of_two_frames_are_zero_padded() {
        let cfg = StftConfig::new(60.0, 15.0, 16_000);
        assert_eq!(cfg.frame_len_samples().unwrap(), 960);
        assert_eq!(cfg.fft_size().unwrap(), 1024);
        let x: Vec<f64> = (0..3000).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let w = MultichannelWaveform::mono(x.clone(), 16_000).unwrap();
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, x.len()).unwrap();
        for (a, b) in x.iter().zip(y.channel(0)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
