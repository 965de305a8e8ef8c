//! Oracle time-frequency masks, instantaneous spatial covariances and the
//! binary mask container.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::Spectrogram;

/// Real `[frame][bin]` mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFrequencyMask {
    values: Array2<f64>,
}

impl TimeFrequencyMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self { values: Array2::ones((frames, bins)) }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn complement(&self) -> Self {
        Self { values: self.values.mapv(|v| 1.0 - v) }
    }

    /// Per-frame sum over bins.
    pub fn frame_sums(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }
}

/// Instantaneous SCMs `Ψ[t, f] = m[t, f] · y yᴴ`, stored `[frame][bin][C][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IscmSequence {
    pub psi: Array4<Complex64>,
}

impl IscmSequence {
    pub fn frames(&self) -> usize {
        self.psi.dim().0
    }

    pub fn bins(&self) -> usize {
        self.psi.dim().1
    }

    pub fn channels(&self) -> usize {
        self.psi.dim().2
    }
}

pub fn wiener_like_mask(
    clean: &Spectrogram,
    noise: &Spectrogram,
    ref_channel: usize,
) -> Result<(TimeFrequencyMask, TimeFrequencyMask)> {
    clean.ensure_same_shape(noise)?;
    if ref_channel >= clean.channels() {
        return Err(Error::InvalidInput(format!(
            "reference channel {ref_channel} of {}",
            clean.channels()
        )));
    }
    let ms = Array2::from_shape_fn((clean.frames(), clean.bins()), |(t, f)| {
        let s = clean.coeffs[[t, f, ref_channel]].norm_sqr();
        let n = noise.coeffs[[t, f, ref_channel]].norm_sqr();
        if s + n > 0.0 {
            s / (s + n)
        } else {
            0.0
        }
    });
    let s = TimeFrequencyMask { values: ms };
    let n = s.complement();
    Ok((s, n))
}

pub fn compute_iscm(obs: &Spectrogram, mask: &TimeFrequencyMask) -> Result<IscmSequence> {
    let (t_count, f_count, c_count) = obs.coeffs.dim();
    if mask.values.dim() != (t_count, f_count) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.values.dim(),
            (t_count, f_count)
        )));
    }
    let mut psi = Array4::zeros((t_count, f_count, c_count, c_count));
    for t in 0..t_count {
        for f in 0..f_count {
            let m = mask.values[[t, f]];
            if m == 0.0 {
                continue;
            }
            // upper triangle, mirrored so the result is exactly Hermitian
            for i in 0..c_count {
                let yi = obs.coeffs[[t, f, i]];
                psi[[t, f, i, i]] = Complex64::new(m * yi.norm_sqr(), 0.0);
                for j in i + 1..c_count {
                    let v = yi * obs.coeffs[[t, f, j]].conj() * m;
                    psi[[t, f, i, j]] = v;
                    psi[[t, f, j, i]] = v.conj();
                }
            }
        }
    }
    Ok(IscmSequence { psi })
}

pub const MASK_MAGIC: [u8; 4] = *b"TFMK";
pub const WEIGHT_MAGIC: [u8; 4] = *b"ATTW";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes a 16-byte header (magic, version, rows, cols; little endian)
/// followed by row-major `f32` values.
pub(crate) fn write_container(path: &Path, magic: [u8; 4], values: &Array2<f64>) -> Result<()> {
    let (rows, cols) = values.dim();
    let mut bytes = Vec::with_capacity(16 + 4 * rows * cols);
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    for d in [rows, cols] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dimension {d} too large")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_container(path: &Path, magic: [u8; 4]) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::MalformedFile(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("shorter than the 16-byte header"));
    }
    if bytes[0..4] != magic {
        return Err(bad("wrong magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header dimensions overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(bad(&format!("payload is {} bytes, header implies {expected}", bytes.len() - 16)));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("size checked"))
}

/// Stores the speech mask; the noise mask is its complement.
pub fn save_mask(path: impl AsRef<Path>, mask: &TimeFrequencyMask) -> Result<()> {
    write_container(path.as_ref(), MASK_MAGIC, &mask.values)
}

/// Loads an externally estimated speech mask, clipping to `[0, 1]`.
pub fn load_external_masks(
    path: impl AsRef<Path>,
    expected_shape: (usize, usize),
) -> Result<(TimeFrequencyMask, TimeFrequencyMask)> {
    let path = path.as_ref();
    let mut values = read_container(path, MASK_MAGIC)?;
    if values.dim() != expected_shape {
        return Err(Error::ShapeMismatch(format!(
            "mask file {} is {:?}, spectrogram is {:?}",
            path.display(),
            values.dim(),
            expected_shape
        )));
    }
    let mut clipped = 0usize;
    let mut non_finite = 0usize;
    values.mapv_inplace(|v| {
        if v.is_nan() {
            non_finite += 1;
            0.0
        } else if !(0.0..=1.0).contains(&v) {
            clipped += 1;
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    });
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} mask values to [0, 1]", path.display());
    }
    if non_finite > 0 {
        log::warn!("{}: replaced {non_finite} NaN mask values by 0", path.display());
    }
    let s = TimeFrequencyMask { values };
    let n = s.complement();
    Ok((s, n))
}
