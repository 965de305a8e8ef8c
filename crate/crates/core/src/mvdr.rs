//! Time-varying MVDR beamforming in the trace-normalised form
//! `w = (Φᴺ⁻¹ Φˢ / tr(Φᴺ⁻¹ Φˢ)) u`.

use ndarray::{Array3, Array4};
use num_complex::Complex64;
use tvbf_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::scm::ScmSequence;
use crate::signal::{istft, MultichannelWaveform, Spectrogram, StftConfig};

/// Relative diagonal loading applied to every noise SCM.
pub const DEFAULT_LOADING: f64 = 1e-6;
/// Traces below this produce an all-zero filter.
pub const DEGENERATE_TRACE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerFilters {
    /// `[frame][bin][channel]`
    pub w: Array3<Complex64>,
    pub reference: usize,
    /// Number of (frame, bin) pairs that fell back to a zero filter.
    pub degenerate: usize,
}

impl BeamformerFilters {
    /// Selects the reference channel unchanged.
    pub fn passthrough(frames: usize, bins: usize, channels: usize, reference: usize) -> Self {
        let mut w = Array3::zeros((frames, bins, channels));
        w.slice_mut(ndarray::s![.., .., reference]).fill(Complex64::new(1.0, 0.0));
        Self { w, reference, degenerate: 0 }
    }
}

/// Solves `N X = S` for `C x C` row-major matrices by Gaussian elimination
/// with partial pivoting. `None` if `N` is numerically singular.
fn solve(n: &[Complex64], s: &[Complex64], c: usize) -> Option<Vec<Complex64>> {
    let mut a = n.to_vec();
    let mut x = s.to_vec();
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..c {
        let piv = (col..c).max_by(|&i, &j| a[i * c + col].norm().total_cmp(&a[j * c + col].norm()))?;
        if a[piv * c + col].norm() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for k in 0..c {
                a.swap(piv * c + k, col * c + k);
                x.swap(piv * c + k, col * c + k);
            }
        }
        let inv = 1.0 / a[col * c + col];
        for r in col + 1..c {
            let f = a[r * c + col] * inv;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in col..c {
                let v = a[col * c + k];
                a[r * c + k] -= f * v;
            }
            for k in 0..c {
                let v = x[col * c + k];
                x[r * c + k] -= f * v;
            }
        }
    }
    for col in (0..c).rev() {
        let inv = 1.0 / a[col * c + col];
        for k in 0..c {
            let mut v = x[col * c + k];
            for j in col + 1..c {
                v -= a[col * c + j] * x[j * c + k];
            }
            x[col * c + k] = v * inv;
        }
    }
    Some(x)
}

/// One MVDR filter; `None` on a degenerate trace or singular noise SCM.
pub fn mvdr_filter(phi_s: &[Complex64], phi_n: &[Complex64], c: usize, reference: usize, eps: f64) -> Option<Vec<Complex64>> {
    let tr_n: f64 = (0..c).map(|i| phi_n[i * c + i].re).sum();
    let mut loaded = phi_n.to_vec();
    for i in 0..c {
        loaded[i * c + i] += eps * tr_n / c as f64;
    }
    let m = solve(&loaded, phi_s, c)?;
    let tr: Complex64 = (0..c).map(|i| m[i * c + i]).sum();
    if !(tr.norm() >= DEGENERATE_TRACE) {
        return None;
    }
    Some((0..c).map(|i| m[i * c + reference] / tr).collect())
}

pub fn mvdr_filters(scm_s: &ScmSequence, scm_n: &ScmSequence, reference: usize, eps: f64) -> Result<BeamformerFilters> {
    if scm_s.phi.dim() != scm_n.phi.dim() {
        return Err(Error::ShapeMismatch(format!("speech SCMs {:?} vs noise SCMs {:?}", scm_s.phi.dim(), scm_n.phi.dim())));
    }
    let (t_count, f_count, c, _) = scm_s.phi.dim();
    if reference >= c {
        return Err(Error::InvalidInput(format!("reference channel {reference} of {c}")));
    }
    let s = scm_s.phi.as_slice().expect("standard layout");
    let n = scm_n.phi.as_slice().expect("standard layout");
    let cc = c * c;
    let mut w = Array3::zeros((t_count, f_count, c));
    let mut degenerate = 0;
    for t in 0..t_count {
        for f in 0..f_count {
            let off = (t * f_count + f) * cc;
            match mvdr_filter(&s[off..off + cc], &n[off..off + cc], c, reference, eps) {
                Some(v) => {
                    for (ch, z) in v.into_iter().enumerate() {
                        w[[t, f, ch]] = z;
                    }
                }
                None => degenerate += 1,
            }
        }
    }
    if degenerate > 0 {
        log::debug!("MVDR: {degenerate} of {} bins fell back to a zero filter", t_count * f_count);
    }
    Ok(BeamformerFilters { w, reference, degenerate })
}

/// `Ŝ[t, f] = w[t, f]ᴴ Y[t, f]`.
pub fn apply_filters(filters: &BeamformerFilters, obs: &Spectrogram) -> Result<Spectrogram> {
    if filters.w.dim() != obs.coeffs.dim() {
        return Err(Error::ShapeMismatch(format!("filters {:?} vs observation {:?}", filters.w.dim(), obs.coeffs.dim())));
    }
    let (t_count, f_count, c) = obs.coeffs.dim();
    let coeffs = Array3::from_shape_fn((t_count, f_count, 1), |(t, f, _)| {
        (0..c).map(|ch| filters.w[[t, f, ch]].conj() * obs.coeffs[[t, f, ch]]).sum()
    });
    Ok(Spectrogram {
        coeffs,
        frame_len_samples: obs.frame_len_samples,
        hop_samples: obs.hop_samples,
        fft_size: obs.fft_size,
        sample_rate: obs.sample_rate,
    })
}

pub fn enhance(
    obs: &Spectrogram,
    scm_s: &ScmSequence,
    scm_n: &ScmSequence,
    reference: usize,
    cfg: &StftConfig,
    out_len: usize,
) -> Result<MultichannelWaveform> {
    let filters = mvdr_filters(scm_s, scm_n, reference, DEFAULT_LOADING)?;
    istft(&apply_filters(&filters, obs)?, cfg, out_len)
}

/// Flattens SCMs of the selected bins into a `[T, K, C, C, 2]` tensor.
pub fn scm_tensor(phi: &Array4<Complex64>, bins: &[usize]) -> Tensor {
    let (t_count, _, c, _) = phi.dim();
    let mut data = Vec::with_capacity(t_count * bins.len() * c * c * 2);
    for t in 0..t_count {
        for &f in bins {
            for i in 0..c {
                for j in 0..c {
                    let z = phi[[t, f, i, j]];
                    data.push(z.re);
                    data.push(z.im);
                }
            }
        }
    }
    Tensor::new(vec![t_count, bins.len(), c, c, 2], data).expect("shape")
}

/// Differentiable MVDR on `[..., C, C, 2]` SCM tensors; returns filters
/// `[..., C, 2]`. Degenerate traces yield zero filters, as in [`mvdr_filters`].
pub fn mvdr_graph(g: &mut Graph, phi_s: Var, phi_n: Var, reference: usize, eps: f64) -> Result<Var> {
    let shape = g.shape(phi_n).to_vec();
    let r = shape.len();
    if r < 3 || shape[r - 1] != 2 || shape[r - 2] != shape[r - 3] || g.shape(phi_s) != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("MVDR expects matching [..., C, C, 2] SCMs, got {shape:?}")));
    }
    let c = shape[r - 2];
    if reference >= c {
        return Err(Error::InvalidInput(format!("reference channel {reference} of {c}")));
    }
    let batch: Vec<usize> = shape[..r - 3].to_vec();
    let tr_n = g.trace(phi_n)?;
    let tr_n = g.real_part(tr_n)?;
    let load = g.scale(tr_n, eps / c as f64);
    let load = g.diag_embed(load, c);
    let loaded = g.add(phi_n, load)?;
    let inv = g.complex_matrix_inverse(loaded)?;
    let m = g.complex_matmul(inv, phi_s)?;
    let tr = g.trace(m)?;
    let col = g.slice(m, r - 2, reference, 1)?;
    let mut col_shape = batch.clone();
    col_shape.extend([c, 2]);
    let col = g.reshape(col, &col_shape)?;

    // zero filter where the trace vanishes: the numerator is masked and the
    // denominator replaced by one, so no gradient flows there either
    let trv = g.value(tr).data().to_vec();
    let nb = trv.len() / 2;
    let valid: Vec<bool> = (0..nb).map(|i| Complex64::new(trv[2 * i], trv[2 * i + 1]).norm() >= DEGENERATE_TRACE).collect();
    let (num, den) = if valid.iter().all(|v| *v) {
        (col, tr)
    } else {
        let keep: Vec<f64> = valid.iter().flat_map(|&v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(2 * c)).collect();
        let keep = g.constant(Tensor::new(col_shape.clone(), keep)?);
        let num = g.mul(col, keep)?;
        let patch: Vec<f64> = valid.iter().flat_map(|&v| [if v { 0.0 } else { 1.0 }, 0.0]).collect();
        let mut tr_shape = batch.clone();
        tr_shape.push(2);
        let patch = g.constant(Tensor::new(tr_shape, patch)?);
        (num, g.add(tr, patch)?)
    };
    let den = g.repeat_axis(den, r - 3, c)?;
    Ok(g.complex_div(num, den)?)
}

/// `Σ_c conj(w_c) · y_c` over the channel axis of `[..., C, 2]` tensors.
pub fn apply_filters_graph(g: &mut Graph, w: Var, y: Var) -> Result<Var> {
    let r = g.shape(w).len();
    if r < 2 {
        return Err(Error::ShapeMismatch("filters need a channel axis".into()));
    }
    let wc = g.conj(w)?;
    let prod = g.complex_mul(wc, y)?;
    Ok(g.sum_axis(prod, r - 2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tvbf_autodiff::{gradcheck, AutodiffError};

    fn random_psd(rng: &mut ChaCha8Rng, batch: usize, c: usize) -> Tensor {
        let mut data = Vec::with_capacity(batch * c * c * 2);
        for _ in 0..batch {
            let a: Vec<Complex64> =
                (0..c * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            for i in 0..c {
                for j in 0..c {
                    let z: Complex64 = (0..c).map(|k| a[i * c + k] * a[j * c + k].conj()).sum();
                    data.push(z.re);
                    data.push(z.im);
                }
            }
        }
        Tensor::new(vec![batch, c, c, 2], data).unwrap()
    }

    fn wrap(e: Error) -> AutodiffError {
        AutodiffError::InvalidArgument { op: "mvdr", msg: e.to_string() }
    }

    #[test]
    fn graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_psd(&mut rng, 3, 3);
        let n = random_psd(&mut rng, 3, 3);
        let err = gradcheck::check(&[s, n], |g, v| mvdr_graph(g, v[0], v[1], 1, 1e-3).map_err(wrap), 1e-6, 1).unwrap();
        assert!(err < 1e-6, "mvdr relative error {err}");
        let w = Tensor::new(vec![2, 3, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(vec![2, 3, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = gradcheck::check(&[w, y], |g, v| apply_filters_graph(g, v[0], v[1]).map_err(wrap), 1e-6, 2).unwrap();
        assert!(err < 1e-7, "filtering relative error {err}");
    }
}
