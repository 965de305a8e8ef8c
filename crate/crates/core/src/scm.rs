//! Spatial covariance estimation as a weighted sum of instantaneous SCMs.
//!
//! Every scheme is expressed through a nonnegative `T x T` weight matrix `c`
//! with `Φ[t] = Σ_t' c[t, t'] Ψ[t']`. Mask-normalised schemes need one matrix
//! per frequency bin, the online and learned schemes share one matrix across
//! bins.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mask::{read_container, write_container, IscmSequence, TimeFrequencyMask, WEIGHT_MAGIC};

/// Mask sums below this are treated as silent.
pub const DEGENERATE_MASK_SUM: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeightMatrix {
    /// `[bin][query t][key t']`; a single leading slice when shared.
    weights: Array3<f64>,
    per_frequency: bool,
    fallback_rows: usize,
}

impl AttentionWeightMatrix {
    pub fn shared(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c {
            return Err(Error::ShapeMismatch(format!("weight matrix must be square, got {r} x {c}")));
        }
        check_nonnegative(weights.iter())?;
        Ok(Self { weights: weights.insert_axis(Axis(0)), per_frequency: false, fallback_rows: 0 })
    }

    pub fn per_frequency(weights: Array3<f64>) -> Result<Self> {
        let (_, r, c) = weights.dim();
        if r != c {
            return Err(Error::ShapeMismatch(format!("weight matrices must be square, got {r} x {c}")));
        }
        check_nonnegative(weights.iter())?;
        Ok(Self { weights, per_frequency: true, fallback_rows: 0 })
    }

    pub fn frames(&self) -> usize {
        self.weights.dim().1
    }

    pub fn is_per_frequency(&self) -> bool {
        self.per_frequency
    }

    /// Number of bins carried (1 when shared).
    pub fn slices(&self) -> usize {
        self.weights.dim().0
    }

    /// Rows that fell back to uniform weights because of a silent mask.
    pub fn fallback_rows(&self) -> usize {
        self.fallback_rows
    }

    pub fn for_bin(&self, f: usize) -> ArrayView2<'_, f64> {
        let k = if self.per_frequency { f } else { 0 };
        self.weights.index_axis(Axis(0), k)
    }

    pub fn raw(&self) -> &Array3<f64> {
        &self.weights
    }
}

fn check_nonnegative<'a>(mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
    match it.find(|v| !(v.is_finite() && **v >= 0.0)) {
        Some(v) => Err(Error::InvalidInput(format!("weight {v} is not a finite nonnegative number"))),
        None => Ok(()),
    }
}

/// Spatial covariance matrices `[frame][bin][C][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmSequence {
    pub phi: Array4<Complex64>,
}

impl ScmSequence {
    pub fn frames(&self) -> usize {
        self.phi.dim().0
    }

    pub fn bins(&self) -> usize {
        self.phi.dim().1
    }

    pub fn channels(&self) -> usize {
        self.phi.dim().2
    }
}

/// `1 / Σ_τ m[τ, f]` in every entry of the bin's matrix.
pub fn weights_time_invariant(mask: &TimeFrequencyMask) -> AttentionWeightMatrix {
    let (t_count, f_count) = mask.values().dim();
    let mut w = Array3::zeros((f_count, t_count, t_count));
    let mut fallback = 0;
    for f in 0..f_count {
        let s = mask.values().column(f).sum();
        let v = if s < DEGENERATE_MASK_SUM {
            fallback += t_count;
            1.0 / t_count as f64
        } else {
            1.0 / s
        };
        w.index_axis_mut(Axis(0), f).fill(v);
    }
    if fallback > 0 {
        log::warn!("time-invariant weights: {} silent bins fell back to uniform weights", fallback / t_count.max(1));
    }
    AttentionWeightMatrix { weights: w, per_frequency: true, fallback_rows: fallback }
}

/// `α^(t − t')` for `t' ≤ t`, zero above the diagonal.
pub fn weights_online(alpha: f64, frames: usize) -> Result<AttentionWeightMatrix> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("forgetting factor {alpha} outside (0, 1]")));
    }
    let w = Array2::from_shape_fn((frames, frames), |(t, tp)| if tp <= t { alpha.powi((t - tp) as i32) } else { 0.0 });
    AttentionWeightMatrix::shared(w)
}

fn block(t: usize, l: usize, frames: usize) -> std::ops::Range<usize> {
    t.saturating_sub(l)..(t + l + 1).min(frames)
}

/// Banded weights `1 / Σ_{τ ∈ block} m[τ, f]` on `|t − t'| ≤ L`.
pub fn weights_blockwise(mask: &TimeFrequencyMask, l: usize) -> AttentionWeightMatrix {
    let (t_count, f_count) = mask.values().dim();
    let mut w = Array3::zeros((f_count, t_count, t_count));
    let mut fallback = 0;
    for f in 0..f_count {
        let col = mask.values().column(f);
        for t in 0..t_count {
            let r = block(t, l, t_count);
            let s: f64 = col.slice(ndarray::s![r.clone()]).sum();
            let v = if s < DEGENERATE_MASK_SUM {
                fallback += 1;
                1.0 / r.len() as f64
            } else {
                1.0 / s
            };
            for tp in r {
                w[[f, t, tp]] = v;
            }
        }
    }
    if fallback > 0 {
        log::warn!("block-wise weights: {fallback} silent blocks fell back to uniform weights");
    }
    AttentionWeightMatrix { weights: w, per_frequency: true, fallback_rows: fallback }
}

pub fn apply_weights(weights: &AttentionWeightMatrix, iscms: &IscmSequence) -> Result<ScmSequence> {
    let (t_count, f_count, c, _) = iscms.psi.dim();
    if weights.frames() != t_count {
        return Err(Error::ShapeMismatch(format!(
            "{} x {} weights for {t_count} frames",
            weights.frames(),
            weights.frames()
        )));
    }
    if weights.per_frequency && weights.slices() != f_count {
        return Err(Error::ShapeMismatch(format!("{} weight slices for {f_count} bins", weights.slices())));
    }
    let cc = c * c;
    let mut phi = Array4::zeros((t_count, f_count, c, c));
    let psi = iscms.psi.as_slice().expect("standard layout");
    let out = phi.as_slice_mut().expect("standard layout");
    for f in 0..f_count {
        let w = weights.for_bin(f);
        for t in 0..t_count {
            let dst = (t * f_count + f) * cc;
            for tp in 0..t_count {
                let c_ttp = w[[t, tp]];
                if c_ttp == 0.0 {
                    continue;
                }
                let src = (tp * f_count + f) * cc;
                for k in 0..cc {
                    out[dst + k] += psi[src + k] * c_ttp;
                }
            }
        }
    }
    Ok(ScmSequence { phi })
}

/// Time-invariant SCM computed without a weight matrix; equal to
/// `apply_weights(weights_time_invariant(mask), iscms)`.
pub fn scm_time_invariant(iscms: &IscmSequence, mask: &TimeFrequencyMask) -> Result<ScmSequence> {
    check_mask(iscms, mask)?;
    let (t_count, f_count, c, _) = iscms.psi.dim();
    let mut phi = Array4::zeros((t_count, f_count, c, c));
    for f in 0..f_count {
        let s = mask.values().column(f).sum();
        let norm = if s < DEGENERATE_MASK_SUM { 1.0 / t_count as f64 } else { 1.0 / s };
        let mut acc = Array2::<Complex64>::zeros((c, c));
        for t in 0..t_count {
            acc += &iscms.psi.slice(ndarray::s![t, f, .., ..]);
        }
        acc *= Complex64::new(norm, 0.0);
        for t in 0..t_count {
            phi.slice_mut(ndarray::s![t, f, .., ..]).assign(&acc);
        }
    }
    Ok(ScmSequence { phi })
}

/// Online SCM by the recursion `Φ[t] = α Φ[t − 1] + Ψ[t]`.
pub fn scm_online(iscms: &IscmSequence, alpha: f64) -> Result<ScmSequence> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("forgetting factor {alpha} outside (0, 1]")));
    }
    let mut phi = iscms.psi.clone();
    let t_count = phi.dim().0;
    for t in 1..t_count {
        let (prev, mut cur) = phi.view_mut().split_at(Axis(0), t);
        let prev = prev.index_axis(Axis(0), t - 1);
        cur.index_axis_mut(Axis(0), 0).zip_mut_with(&prev, |c, p| *c += p * alpha);
    }
    Ok(ScmSequence { phi })
}

/// Block-wise SCM via running sums; equal to
/// `apply_weights(weights_blockwise(mask, l), iscms)`.
pub fn scm_blockwise(iscms: &IscmSequence, mask: &TimeFrequencyMask, l: usize) -> Result<ScmSequence> {
    check_mask(iscms, mask)?;
    let (t_count, f_count, c, _) = iscms.psi.dim();
    // prefix[t] = Σ_{τ < t} Ψ[τ]
    let mut prefix = Array4::<Complex64>::zeros((t_count + 1, f_count, c, c));
    let mut mprefix = Array2::<f64>::zeros((t_count + 1, f_count));
    for t in 0..t_count {
        let next = &prefix.index_axis(Axis(0), t) + &iscms.psi.index_axis(Axis(0), t);
        prefix.index_axis_mut(Axis(0), t + 1).assign(&next);
        let mnext = &mprefix.row(t) + &mask.values().row(t);
        mprefix.row_mut(t + 1).assign(&mnext);
    }
    let mut phi = Array4::zeros((t_count, f_count, c, c));
    for t in 0..t_count {
        let r = block(t, l, t_count);
        for f in 0..f_count {
            let s = mprefix[[r.end, f]] - mprefix[[r.start, f]];
            let norm = if s < DEGENERATE_MASK_SUM { 1.0 / r.len() as f64 } else { 1.0 / s };
            for i in 0..c {
                for j in 0..c {
                    phi[[t, f, i, j]] = (prefix[[r.end, f, i, j]] - prefix[[r.start, f, i, j]]) * norm;
                }
            }
        }
    }
    Ok(ScmSequence { phi })
}

fn check_mask(iscms: &IscmSequence, mask: &TimeFrequencyMask) -> Result<()> {
    if mask.values().dim() != (iscms.frames(), iscms.bins()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs ISCMs {:?}",
            mask.values().dim(),
            (iscms.frames(), iscms.bins())
        )));
    }
    Ok(())
}

/// Replaces row `t` by the mean of rows `t − L' ..= t + L'`, truncated at the
/// sequence edges.
pub fn smooth_weights(weights: &AttentionWeightMatrix, l_prime: usize) -> AttentionWeightMatrix {
    if l_prime == 0 {
        return weights.clone();
    }
    let (k, t_count, _) = weights.weights.dim();
    let mut out = Array3::zeros((k, t_count, t_count));
    for s in 0..k {
        let w = weights.weights.index_axis(Axis(0), s);
        // running row sums keep this O(T²)
        let mut prefix = Array2::<f64>::zeros((t_count + 1, t_count));
        for t in 0..t_count {
            let next = &prefix.row(t) + &w.row(t);
            prefix.row_mut(t + 1).assign(&next);
        }
        for t in 0..t_count {
            let r = block(t, l_prime, t_count);
            let n = r.len() as f64;
            let row = (&prefix.row(r.end) - &prefix.row(r.start)) / n;
            out.slice_mut(ndarray::s![s, t, ..]).assign(&row);
        }
    }
    AttentionWeightMatrix { weights: out, per_frequency: weights.per_frequency, fallback_rows: weights.fallback_rows }
}

/// Weights scaled by the frame-level mask mass and renormalised per row.
/// Rows whose denominator vanishes are left at zero and counted.
pub fn visualization_weights(
    weights: &AttentionWeightMatrix,
    mask: &TimeFrequencyMask,
) -> Result<(Array2<f64>, usize)> {
    if weights.per_frequency {
        return Err(Error::InvalidInput("visualisation needs a frequency-shared weight matrix".into()));
    }
    let t_count = weights.frames();
    if mask.frames() != t_count {
        return Err(Error::ShapeMismatch(format!("mask has {} frames, weights {t_count}", mask.frames())));
    }
    let activity = mask.frame_sums();
    let w = weights.for_bin(0);
    let mut out = Array2::zeros((t_count, t_count));
    let mut zero_rows = 0;
    for t in 0..t_count {
        let denom: f64 = (0..t_count).map(|tp| w[[t, tp]] * activity[tp]).sum();
        if denom <= 0.0 {
            zero_rows += 1;
            continue;
        }
        for tp in 0..t_count {
            out[[t, tp]] = w[[t, tp]] * activity[tp] / denom;
        }
    }
    if zero_rows > 0 {
        log::warn!("visualisation weights: {zero_rows} rows with zero mass left empty");
    }
    Ok((out, zero_rows))
}

pub fn save_weights(path: impl AsRef<Path>, weights: &Array2<f64>) -> Result<()> {
    write_container(path.as_ref(), WEIGHT_MAGIC, weights)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_container(path.as_ref(), WEIGHT_MAGIC)
}
