use ndarray::{Array2, Array3};

use super::{inside, ArrayGeometry, SPEED_OF_SOUND};
use crate::error::{Error, Result};

/// Reflection coefficient shared by all six walls, from Sabine's formula.
pub fn sabine_beta(room: [f64; 3], t60: f64) -> Result<f64> {
    let [w, d, h] = room;
    let volume = w * d * h;
    let surface = 2.0 * (w * d + w * h + d * h);
    let sabine = 24.0 * std::f64::consts::LN_10 / SPEED_OF_SOUND;
    let absorption = sabine * volume / (surface * t60);
    let beta_sq = 1.0 - absorption;
    if !(t60 > 0.0) || beta_sq <= 0.0 {
        return Err(Error::InvalidReverb { t60, beta_sq });
    }
    Ok(beta_sq.sqrt())
}

/// Knobs of the image-source simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirOptions {
    pub sample_rate: u32,
    /// Maximum total number of wall reflections per image.
    pub max_order: usize,
    /// Impulse response length in samples.
    pub length: usize,
}

impl RirOptions {
    /// Long enough for the decay plus the farthest direct path in the room.
    pub fn for_room(room: [f64; 3], t60: f64, sample_rate: u32, max_order: usize) -> Self {
        let diag = (room[0].powi(2) + room[1].powi(2) + room[2].powi(2)).sqrt();
        let length = ((t60 + diag / SPEED_OF_SOUND) * sample_rate as f64).ceil() as usize;
        Self { sample_rate, max_order, length: length.max(1) }
    }
}

/// Per-axis image offsets: `(position multiplier, offset, reflections)`.
/// An image coordinate is `sign * x + offset`.
fn axis_images(len: f64, order: usize) -> Vec<(f64, f64, usize)> {
    let mut out = Vec::new();
    let n_max = order.div_ceil(2) as i64 + 1;
    for n in -n_max..=n_max {
        for u in 0..=1i64 {
            let refl = (2 * n - u).unsigned_abs() as usize;
            if refl <= order {
                let sign = if u == 0 { 1.0 } else { -1.0 };
                out.push((sign, 2.0 * n as f64 * len, refl));
            }
        }
    }
    out
}

/// Image-method impulse responses `[channel][tap]` from `src` to every mic.
///
/// Each image contributes `β^reflections / (4π d)` at delay `d / c`, split
/// between the two neighbouring samples by linear interpolation, so no energy
/// arrives earlier than one sample before the true delay.
pub fn simulate_rir(
    room: [f64; 3],
    t60: f64,
    src: [f64; 3],
    geometry: &ArrayGeometry,
    opts: &RirOptions,
) -> Result<Array2<f64>> {
    if !inside(room, src) {
        return Err(Error::OutsideRoom(src));
    }
    geometry.validate(room)?;
    let beta = sabine_beta(room, t60)?;
    let fs = opts.sample_rate as f64;
    let axes: Vec<Vec<(f64, f64, usize)>> = (0..3).map(|a| axis_images(room[a], opts.max_order)).collect();
    let beta_pow: Vec<f64> = (0..=opts.max_order).map(|k| beta.powi(k as i32)).collect();
    let mut h = Array2::zeros((geometry.channels(), opts.length));
    for (c, mic) in geometry.mic_positions.iter().enumerate() {
        for &(sx, ox, rx) in &axes[0] {
            let dx = sx * src[0] + ox - mic[0];
            for &(sy, oy, ry) in &axes[1] {
                if rx + ry > opts.max_order {
                    continue;
                }
                let dy = sy * src[1] + oy - mic[1];
                for &(sz, oz, rz) in &axes[2] {
                    let refl = rx + ry + rz;
                    if refl > opts.max_order {
                        continue;
                    }
                    let dz = sz * src[2] + oz - mic[2];
                    let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                    let delay = dist / SPEED_OF_SOUND * fs;
                    let i0 = delay.floor();
                    if i0 as usize + 1 >= opts.length {
                        continue;
                    }
                    let frac = delay - i0;
                    let amp = beta_pow[refl] / (4.0 * std::f64::consts::PI * dist.max(1e-3));
                    let i0 = i0 as usize;
                    h[[c, i0]] += amp * (1.0 - frac);
                    h[[c, i0 + 1]] += amp * frac;
                }
            }
        }
    }
    Ok(h)
}

/// Impulse responses for every trajectory point, `[point][channel][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    pub rirs: Array3<f64>,
    pub sample_rate: u32,
}

impl RirSet {
    pub fn points(&self) -> usize {
        self.rirs.dim().0
    }

    pub fn channels(&self) -> usize {
        self.rirs.dim().1
    }

    pub fn taps(&self) -> usize {
        self.rirs.dim().2
    }

    pub fn simulate(
        room: [f64; 3],
        t60: f64,
        trajectory: &[[f64; 3]],
        geometry: &ArrayGeometry,
        opts: &RirOptions,
    ) -> Result<Self> {
        let mut rirs = Array3::zeros((trajectory.len(), geometry.channels(), opts.length));
        for (p, pos) in trajectory.iter().enumerate() {
            let h = simulate_rir(room, t60, *pos, geometry, opts)?;
            rirs.index_axis_mut(ndarray::Axis(0), p).assign(&h);
        }
        Ok(Self { rirs, sample_rate: opts.sample_rate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_images_count_reflections() {
        // order 1: the source itself and its mirror in each of the two walls
        let imgs = axis_images(4.0, 1);
        assert_eq!(imgs.len(), 3);
        assert!(imgs.contains(&(1.0, 0.0, 0)));
        assert!(imgs.contains(&(-1.0, 0.0, 1)));
        assert!(imgs.contains(&(-1.0, 8.0, 1)));
    }

    #[test]
    fn short_reverb_in_large_room_is_rejected() {
        assert!(matches!(sabine_beta([10.0, 10.0, 3.0], 0.05), Err(Error::InvalidReverb { .. })));
        let b = sabine_beta([5.0, 5.0, 2.5], 0.3).unwrap();
        assert!(b > 0.0 && b < 1.0);
    }
}
